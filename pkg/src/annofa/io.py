"""Data ingestion and persistence: GMT gene sets, CSV / Matrix Market
matrices, feature standardization, and the versioned JSON model archive.

CSV dialect: UTF-8, comma-separated, mandatory header row of feature names
whose first cell labels the sample-name column; empty cells or ``NA`` mark
missing entries.  Matrix Market files are read densely (coordinate entries
absent from the file are observed zeros).  The model archive stores arrays
as base64-encoded little-endian float64 with shape metadata, so save/load
round-trips are bit-exact; wall-clock timings are not serialized.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.io

from .datatypes import (
    AnnotationMask,
    ExpressionMatrix,
    FactorConfig,
    TrainedModel,
    TrainingTrace,
)

ARCHIVE_VERSION = 1


class FileFormatError(ValueError):
    """Malformed input file (bad field, ragged row, unparseable cell)."""


class ArchiveError(ValueError):
    """Model archive failed version or integrity checks."""


@dataclass(frozen=True)
class GeneSet:
    name: str
    description: str
    members: tuple


@dataclass(frozen=True)
class GeneSetCollection:
    sets: tuple

    def __post_init__(self):
        names = [s.name for s in self.sets]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ValueError(f"duplicate gene set names: {sorted(dupes)}")
        empty = [s.name for s in self.sets if not s.members]
        if empty:
            raise ValueError(f"gene sets without members: {empty}")
        object.__setattr__(self, "sets", tuple(self.sets))

    def __len__(self):
        return len(self.sets)

    def __iter__(self):
        return iter(self.sets)


def read_gmt(path) -> GeneSetCollection:
    """Parse a GMT file: per line, set name, description, then members
    (tab-separated).  Duplicate members within a line are dropped."""
    sets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise FileFormatError(
                    f"{path}:{lineno}: expected name, description and at least "
                    f"one member, got {len(fields)} fields"
                )
            members = tuple(dict.fromkeys(f for f in fields[2:] if f))
            if not members:
                raise FileFormatError(f"{path}:{lineno}: gene set has no members")
            sets.append(GeneSet(fields[0], fields[1], members))
    return GeneSetCollection(tuple(sets))


def write_gmt(collection: GeneSetCollection, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in collection:
            fh.write("\t".join((s.name, s.description, *s.members)) + "\n")


def build_mask(sets: GeneSetCollection, feature_names: Sequence[str],
               min_genes: int = 15, n_sparse: int = 0, n_dense: int = 0) -> AnnotationMask:
    """Annotation mask from gene sets: one annotated column per set with at
    least ``min_genes`` members present among ``feature_names`` (collection
    order preserved), then sparse and dense placeholder columns."""
    feature_names = list(feature_names)
    if not feature_names:
        raise ValueError("feature_names must be nonempty")
    index = {name: i for i, name in enumerate(feature_names)}
    cols, names = [], []
    for s in sets:
        hits = [index[m] for m in s.members if m in index]
        if len(hits) < min_genes:
            continue
        col = np.zeros(len(feature_names), dtype=bool)
        col[hits] = True
        cols.append(col)
        names.append(s.name)
    if not cols:
        raise ValueError(
            f"no gene set has at least {min_genes} members among the data features"
        )
    mask = AnnotationMask(np.column_stack(cols), ("annotated",) * len(cols), tuple(names))
    return mask.extended(n_sparse=n_sparse, n_dense=n_dense)


_MISSING_TOKENS = {"", "NA"}


def _parse_cell(token: str, where: str) -> tuple:
    if token in _MISSING_TOKENS:
        return 0.0, False
    try:
        value = float(token)
    except ValueError:
        raise FileFormatError(f"{where}: cannot parse {token!r} as a number") from None
    if not np.isfinite(value):
        raise FileFormatError(f"{where}: non-finite value {token!r}; use NA for missing")
    return value, True


def _read_csv_matrix(path) -> ExpressionMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError(f"{path}: empty file") from None
        feature_names = header[1:]
        if not feature_names:
            raise FileFormatError(f"{path}: header must list feature names")
        rows, names, flags = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FileFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            names.append(row[0])
            parsed = [_parse_cell(tok, f"{path}:{lineno}:{j + 2}")
                      for j, tok in enumerate(row[1:])]
            rows.append([v for v, _ in parsed])
            flags.append([ok for _, ok in parsed])
    if not rows:
        raise FileFormatError(f"{path}: no data rows")
    return ExpressionMatrix(np.array(rows), np.array(flags), tuple(names), tuple(feature_names))


def _read_mm_matrix(path) -> ExpressionMatrix:
    m = scipy.io.mmread(path)
    if hasattr(m, "toarray"):
        m = m.toarray()
    return ExpressionMatrix(np.asarray(m, dtype=np.float64))


def read_matrix(path, format: str = "csv") -> ExpressionMatrix:
    """Read a samples-by-features matrix (``csv`` or ``matrix-market``)."""
    if format == "csv":
        return _read_csv_matrix(path)
    if format == "matrix-market":
        return _read_mm_matrix(path)
    raise ValueError(f"unknown matrix format {format!r}")


def write_matrix(y: ExpressionMatrix, path, format: str = "csv"):
    """Write a matrix; CSV preserves values to full precision and marks
    missing entries as NA.  Matrix Market requires a fully observed matrix."""
    if format == "csv":
        write_named_csv(path, y.data, y.sample_names, y.feature_names,
                        observed=None if y.fully_observed else y.observed)
    elif format == "matrix-market":
        if not y.fully_observed:
            raise ValueError("Matrix Market cannot represent missing entries")
        scipy.io.mmwrite(path, y.data, precision=17)
    else:
        raise ValueError(f"unknown matrix format {format!r}")


def write_named_csv(path, data, row_names, col_names, observed=None, corner: str = "sample"):
    """Dense CSV with a header of column names and leading row-name column."""
    data = np.asarray(data)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([corner, *col_names])
        for i, name in enumerate(row_names):
            cells = [repr(float(v)) for v in data[i]]
            if observed is not None:
                cells = ["NA" if not ok else c for c, ok in zip(cells, observed[i])]
            writer.writerow([name, *cells])


def standardize(y: ExpressionMatrix):
    """Per-feature center and scale to unit variance over observed entries.

    Returns (standardized matrix, dropped feature names); constant features
    are dropped with a warning.  Every feature needs at least two observed
    values.
    """
    obs = y.observed
    counts = obs.sum(axis=0)
    if (counts < 2).any():
        bad = [y.feature_names[g] for g in np.flatnonzero(counts < 2)]
        raise ValueError(f"features with fewer than 2 observed values: {bad[:5]}")
    data = np.where(obs, y.data, 0.0)
    mean = data.sum(axis=0) / counts
    centered = np.where(obs, y.data - mean, 0.0)
    var = (centered * centered).sum(axis=0) / (counts - 1)
    sd = np.sqrt(var)
    keep = sd > 0
    if not keep.any():
        raise ValueError("all features are constant")
    dropped = [y.feature_names[g] for g in np.flatnonzero(~keep)]
    if dropped:
        warnings.warn(f"dropping {len(dropped)} constant features: {dropped[:5]}")
    out = (centered[:, keep] / sd[keep])
    out = np.where(obs[:, keep], out, 0.0)
    names = tuple(n for n, k in zip(y.feature_names, keep) if k)
    return ExpressionMatrix(out, obs[:, keep], y.sample_names, names), dropped


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_array(obj) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).copy()


def _payload_checksum(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_model(model: TrainedModel, path):
    """Write the versioned JSON archive (config, mask, posterior arrays,
    trace) with an integrity checksum."""
    mask = model.mask
    trace = model.trace
    payload = {
        "format_version": ARCHIVE_VERSION,
        "config": {
            "n_annotated": model.config.n_annotated,
            "n_sparse_unannotated": model.config.n_sparse_unannotated,
            "n_dense_unannotated": model.config.n_dense_unannotated,
            "slab_annotated": model.config.slab_annotated,
            "slab_unannotated": model.config.slab_unannotated,
            "tau0": model.config.tau0,
        },
        "mask": {
            "active": {"shape": list(mask.active.shape),
                       "data": base64.b64encode(np.packbits(mask.active).tobytes()).decode("ascii")},
            "kinds": list(mask.kinds),
            "factor_names": list(mask.factor_names),
        },
        "posterior": {name: _encode_array(getattr(model, name))
                      for name in ("w_mean", "w_scale", "x_mean", "x_scale", "sigma2")},
        "trace": {
            "iterations": list(trace.iterations),
            "elbo": _encode_array(np.asarray(trace.elbo)),
            "f1": None if trace.f1 is None else _encode_array(np.asarray(trace.f1)),
        },
    }
    payload["checksum"] = _payload_checksum({k: v for k, v in payload.items()})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_model(path) -> TrainedModel:
    """Read a model archive; fails loudly on version or checksum mismatch."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != ARCHIVE_VERSION:
        raise ArchiveError(
            f"unsupported archive version {version!r}; this build reads version {ARCHIVE_VERSION}"
        )
    stored = payload.pop("checksum", None)
    if stored is None or stored != _payload_checksum(payload):
        raise ArchiveError("archive checksum mismatch; file is corrupt or was modified")
    mask_obj = payload["mask"]
    shape = tuple(mask_obj["active"]["shape"])
    bits = np.unpackbits(
        np.frombuffer(base64.b64decode(mask_obj["active"]["data"]), dtype=np.uint8),
        count=int(np.prod(shape)),
    )
    mask = AnnotationMask(bits.reshape(shape).astype(bool),
                          tuple(mask_obj["kinds"]), tuple(mask_obj["factor_names"]))
    config = FactorConfig(**payload["config"])
    post = {name: _decode_array(obj) for name, obj in payload["posterior"].items()}
    tr = payload["trace"]
    iters = tuple(tr["iterations"])
    trace = TrainingTrace(
        iterations=iters,
        elbo=tuple(_decode_array(tr["elbo"])),
        seconds=(0.0,) * len(iters),
        f1=None if tr["f1"] is None else tuple(_decode_array(tr["f1"])),
    )
    return TrainedModel(config=config, mask=mask, trace=trace, **post)
