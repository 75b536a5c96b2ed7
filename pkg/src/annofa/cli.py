"""Command-line workflows: simulate, train, evaluate, rank, impute, and the
annotation-noise experiment grid.

Every flag can be overridden by an environment variable named
``ANNOFA_<FLAG>`` (upper case, dashes as underscores).  Output files are
byte-identical across runs with identical arguments and seed; wall-clock
timings go to ``run.log`` only.  Exit codes: 0 ok, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, inference, io, synthetic
from .datatypes import FactorConfig
from .io import GeneSet, GeneSetCollection

log = logging.getLogger("annofa")

DEFAULT_SEED = 42


def _env_name(flag: str) -> str:
    return "ANNOFA_" + flag.lstrip("-").replace("-", "_").upper()


def _opt(parser, *names, **kwargs):
    """add_argument with ANNOFA_* environment override for the default."""
    flag = next(n for n in names if n.startswith("--"))
    env = _env_name(flag)
    if env in os.environ:
        raw = os.environ[env]
        if kwargs.get("action") == "store_true":
            kwargs["default"] = raw.lower() in ("1", "true", "yes", "on")
        elif kwargs.get("nargs") in ("+", "*"):
            typ = kwargs.get("type", str)
            kwargs["default"] = [typ(tok) for tok in raw.replace(",", " ").split()]
        else:
            typ = kwargs.get("type", str)
            kwargs["default"] = typ(raw)
        kwargs.pop("required", None)
    parser.add_argument(*names, **kwargs)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _setup_logging(args, out: Path = None):
    log.setLevel(logging.INFO)
    log.handlers.clear()
    if args.verbose:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(handler)
    if out is not None:
        # timestamps are confined to the log file so data outputs stay reproducible
        handler = logging.FileHandler(out / "run.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(handler)
    if not log.handlers:
        log.addHandler(logging.NullHandler())


def _apply_threads(args):
    if getattr(args, "threads", None):
        from threadpoolctl import threadpool_limits

        global _THREAD_LIMITS
        _THREAD_LIMITS = threadpool_limits(limits=args.threads)


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _train_options(args, truth_mask=None) -> inference.TrainOptions:
    return inference.TrainOptions(
        max_iters=args.max_iters,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        n_mc=args.n_mc,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        lr_decay=args.lr_decay,
        active_threshold=args.threshold,
        truth_mask=truth_mask,
    )


def _add_train_flags(p):
    _opt(p, "--max-iters", type=int, default=20_000, help="iteration budget (default %(default)s)")
    _opt(p, "--batch-size", type=int, default=None,
         help="mini-batch rows; default: full batch up to 10000 samples")
    _opt(p, "--lr", type=float, default=0.01, help="Adam learning rate (default %(default)s)")
    _opt(p, "--n-mc", type=int, default=1, help="Monte Carlo draws per step (default %(default)s)")
    _opt(p, "--checkpoint-every", type=int, default=50,
         help="iterations between trace checkpoints (default %(default)s)")
    _opt(p, "--lr-decay", action="store_true", default=False,
         help="exponential learning-rate decay (0.999 per 100 steps)")
    _opt(p, "--threshold", type=float, default=0.1,
         help="|loading| threshold for active features (default %(default)s)")
    _opt(p, "--slab-annotated", type=float, default=1.0,
         help="slab width for annotated entries (default %(default)s)")
    _opt(p, "--slab-unannotated", type=float, default=0.05,
         help="slab width for unannotated entries (default %(default)s)")
    _opt(p, "--tau0", type=float, default=0.1,
         help="global-shrinkage hyperprior scale (default %(default)s)")


def _truth_active(path, feature_names) -> np.ndarray:
    """Ground-truth activity matrix from a GMT file, one column per set in
    file order, restricted to the data's features."""
    sets = io.read_gmt(path)
    index = {name: g for g, name in enumerate(feature_names)}
    active = np.zeros((len(feature_names), len(sets)), dtype=bool)
    for k, s in enumerate(sets):
        for m in s.members:
            if m in index:
                active[index[m], k] = True
    return active


def _mask_to_gene_sets(active, factor_names, feature_names, description) -> GeneSetCollection:
    sets = []
    for k, name in enumerate(factor_names):
        members = tuple(feature_names[g] for g in np.flatnonzero(active[:, k]))
        if members:
            sets.append(GeneSet(name, description, members))
    return GeneSetCollection(tuple(sets))


def _write_report(path, y, model, top_n=None, threshold=0.1):
    reports = evaluation.rank_factors(y, model, top_n, threshold=threshold)
    rows = [
        (r.index, r.name, r.kind, float(r.r2), r.n_active,
         ";".join(f"{g}:{w:.4g}" for g, w in r.top_weights))
        for r in reports
    ]
    _write_rows(path, ["factor", "name", "kind", "r2", "n_active", "top_weights"], rows)
    return reports


def _cmd_simulate(args):
    out = _out_dir(args)
    _setup_logging(args, out)
    spec = synthetic.SyntheticSpec(
        n_samples=args.n, n_features=args.g, n_factors=args.k,
        loading_sd=args.loading_sd, min_abs_loading=args.min_abs_loading,
        sparsity_range=(args.sparsity_min, args.sparsity_max),
        noise_variance=args.noise_variance, seed=args.seed,
    )
    data = synthetic.generate(spec)
    io.write_matrix(data.y, out / "y.csv")
    io.write_named_csv(out / "w_true.csv", data.w_true, data.y.feature_names,
                       data.mask_true.factor_names, corner="feature")
    io.write_named_csv(out / "x_true.csv", data.x_true, data.y.sample_names,
                       data.mask_true.factor_names, corner="sample")
    io.write_gmt(
        _mask_to_gene_sets(data.mask_true.active, data.mask_true.factor_names,
                           data.y.feature_names, "true loading support"),
        out / "mask_true.gmt",
    )
    log.info("wrote y.csv, w_true.csv, x_true.csv, mask_true.gmt to %s", out)
    return 0


def _load_data(args):
    y = io.read_matrix(args.data, format=args.format)
    if args.standardize:
        y, dropped = io.standardize(y)
        if dropped:
            log.info("dropped %d constant features", len(dropped))
    return y


def _cmd_train(args):
    out = _out_dir(args)
    _setup_logging(args, out)
    y = _load_data(args)
    sets = io.read_gmt(args.gmt)
    mask = io.build_mask(sets, y.feature_names, min_genes=args.min_genes,
                         n_sparse=args.sparse, n_dense=args.dense)
    config = FactorConfig.for_mask(
        mask, slab_annotated=args.slab_annotated,
        slab_unannotated=args.slab_unannotated, tau0=args.tau0,
    )
    truth = _truth_active(args.truth_gmt, y.feature_names) if args.truth_gmt else None
    t0 = time.perf_counter()
    model = inference.fit(y, mask, config, _train_options(args, truth))
    log.info("trained %d factors in %.1f s (%d iterations)",
             mask.n_factors, time.perf_counter() - t0, model.trace.iterations[-1])
    io.save_model(model, out / "model.json")
    trace = model.trace
    header = ["iteration", "elbo"] + (["f1"] if trace.f1 is not None else [])
    rows = [
        (it, float(e), *((float(f),) if trace.f1 is not None else ()))
        for it, e, f in zip(trace.iterations, trace.elbo,
                            trace.f1 or [None] * len(trace))
    ]
    _write_rows(out / "trace.csv", header, rows)
    _write_report(out / "report.csv", y, model, threshold=args.threshold)
    log.info("wrote model.json, trace.csv, report.csv to %s", out)
    return 0


def _cmd_evaluate(args):
    out = _out_dir(args)
    _setup_logging(args, out)
    y = _load_data(args)
    model = io.load_model(args.model)
    reports = _write_report(out / "evaluation.csv", y, model, threshold=args.threshold)
    refined = evaluation.refined_annotations(model, args.threshold)
    active = np.abs(model.w_mean) > args.threshold
    io.write_gmt(
        _mask_to_gene_sets(active, model.mask.factor_names, y.feature_names,
                           "data-refined annotations"),
        out / "refined.gmt",
    )
    edit_rows = []
    for k, edits in enumerate(refined):
        for g in sorted(edits["added"]):
            edit_rows.append((k, model.mask.factor_names[k], "added", y.feature_names[g]))
        for g in sorted(edits["removed"]):
            edit_rows.append((k, model.mask.factor_names[k], "removed", y.feature_names[g]))
    _write_rows(out / "refinements.csv", ["factor", "name", "edit", "feature"], edit_rows)
    if args.truth_gmt:
        from .evaluation import mask_f1
        from .datatypes import AnnotationMask

        truth = _truth_active(args.truth_gmt, y.feature_names)
        ann = model.mask.annotated_columns
        padded = np.zeros((truth.shape[0], ann.size), dtype=bool)
        padded[:, : truth.shape[1]] = truth
        scores = mask_f1(AnnotationMask.from_active(padded),
                         model.w_mean[:, ann], args.threshold)
        print(f"overall F1 vs truth: {scores.overall:.4f}")
    print(f"top factor by variance explained: {reports[0].name} (r2={reports[0].r2:.4f})")
    log.info("wrote evaluation.csv, refinements.csv, refined.gmt to %s", out)
    return 0


def _cmd_rank(args):
    _setup_logging(args)
    y = _load_data(args)
    model = io.load_model(args.model)
    reports = evaluation.rank_factors(y, model, args.top, threshold=args.threshold)
    print(f"{'rank':>4}  {'factor':<24} {'kind':<10} {'r2':>9} {'active':>7}  top features")
    for rank, r in enumerate(reports, start=1):
        tops = ", ".join(name for name, _ in r.top_weights[:5])
        print(f"{rank:>4}  {r.name:<24} {r.kind:<10} {r.r2:>9.4f} {r.n_active:>7}  {tops}")
    return 0


def _cmd_impute(args):
    out = _out_dir(args)
    _setup_logging(args, out)
    from .model import impute

    y = _load_data(args)
    model = io.load_model(args.model)
    io.write_matrix(impute(model, y), out / "imputed.csv")
    log.info("wrote imputed.csv to %s", out)
    return 0


def _cmd_noise_experiment(args):
    out = _out_dir(args)
    _setup_logging(args, out)
    spec = synthetic.SyntheticSpec(
        n_samples=args.n, n_features=args.g, n_factors=args.k, seed=args.seed,
    )
    report = synthetic.noise_experiment(
        spec, args.noise, args.redundant, _train_options(args),
        n_sparse=args.sparse, n_dense=args.dense,
    )
    _write_rows(out / "experiment.csv",
                ["noise", "redundant", "iteration", "f1", "elbo"],
                [tuple(float(v) if isinstance(v, float) else v for v in row)
                 for row in report.rows()])
    factor_rows = []
    for cell in report.cells:
        for k, name in enumerate(cell.factor_names):
            factor_rows.append((cell.noise_fraction, cell.redundant_fraction, k, name,
                                cell.factor_kinds[k], float(cell.factor_r2[k]),
                                int(cell.redundant_flags[k])))
    _write_rows(out / "factors.csv",
                ["noise", "redundant", "factor", "name", "kind", "r2", "is_redundant"],
                factor_rows)
    log.info("wrote experiment.csv, factors.csv to %s", out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="annofa",
        description="Annotation-guided sparse Bayesian factor analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        _opt(p, "--seed", type=int, default=DEFAULT_SEED,
             help="random seed (default %(default)s)")
        _opt(p, "--threads", type=int, default=None,
             help="bound internal BLAS parallelism")
        _opt(p, "--verbose", "-v", action="store_true", default=False,
             help="log progress to stderr")
        if needs_out:
            _opt(p, "--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="generate a planted-factor benchmark dataset")
    common(p)
    _opt(p, "--n", type=int, required=True, help="number of samples")
    _opt(p, "--g", type=int, required=True, help="number of features")
    _opt(p, "--k", type=int, required=True, help="number of factors")
    _opt(p, "--loading-sd", type=float, default=2.0, help="loading sd (default %(default)s)")
    _opt(p, "--min-abs-loading", type=float, default=0.5,
         help="threshold below which loadings are zeroed (default %(default)s)")
    _opt(p, "--sparsity-min", type=float, default=0.85,
         help="lower bound of per-factor zeroing fraction (default %(default)s)")
    _opt(p, "--sparsity-max", type=float, default=0.95,
         help="upper bound of per-factor zeroing fraction (default %(default)s)")
    _opt(p, "--noise-variance", type=float, default=1.0,
         help="observation noise variance (default %(default)s)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="fit the model to a data matrix with gene set annotations")
    common(p)
    _opt(p, "--data", required=True, help="samples-by-features matrix")
    _opt(p, "--format", default="csv", choices=("csv", "matrix-market"),
         help="matrix file format (default %(default)s)")
    _opt(p, "--gmt", required=True, help="gene set annotations (GMT)")
    _opt(p, "--sparse", type=int, default=0, help="unannotated sparse factors (default %(default)s)")
    _opt(p, "--dense", type=int, default=0, help="unannotated dense factors (default %(default)s)")
    _opt(p, "--min-genes", type=int, default=15,
         help="minimum gene-set members present in the data (default %(default)s)")
    _opt(p, "--truth-gmt", default=None,
         help="optional ground-truth GMT for F1 tracking")
    _opt(p, "--standardize", action=argparse.BooleanOptionalAction, default=True,
         help="center and scale features before fitting (default on)")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="per-factor metrics and refined annotations")
    common(p)
    _opt(p, "--model", required=True, help="model archive (model.json)")
    _opt(p, "--data", required=True, help="samples-by-features matrix")
    _opt(p, "--format", default="csv", choices=("csv", "matrix-market"))
    _opt(p, "--standardize", action=argparse.BooleanOptionalAction, default=True)
    _opt(p, "--threshold", type=float, default=0.1,
         help="|loading| threshold for active features (default %(default)s)")
    _opt(p, "--truth-gmt", default=None, help="optional ground-truth GMT for overall F1")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("rank", help="print factors ranked by variance explained")
    common(p, needs_out=False)
    _opt(p, "--model", required=True, help="model archive (model.json)")
    _opt(p, "--data", required=True, help="samples-by-features matrix")
    _opt(p, "--format", default="csv", choices=("csv", "matrix-market"))
    _opt(p, "--standardize", action=argparse.BooleanOptionalAction, default=True)
    _opt(p, "--top", type=int, default=10, help="rows to print (default %(default)s)")
    _opt(p, "--threshold", type=float, default=0.1)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("impute", help="fill missing entries with model reconstructions")
    common(p)
    _opt(p, "--model", required=True, help="model archive (model.json)")
    _opt(p, "--data", required=True, help="matrix with NA cells to fill")
    _opt(p, "--format", default="csv", choices=("csv", "matrix-market"))
    _opt(p, "--standardize", action=argparse.BooleanOptionalAction, default=False,
         help="standardize before imputing (default off)")
    p.set_defaults(func=_cmd_impute)

    p = sub.add_parser("noise-experiment",
                       help="train across an annotation-noise and redundancy grid")
    common(p)
    _opt(p, "--n", type=int, required=True, help="samples")
    _opt(p, "--g", type=int, required=True, help="features")
    _opt(p, "--k", type=int, required=True, help="true factors")
    _opt(p, "--noise", type=float, nargs="+", default=[0.0],
         help="noise fractions (default %(default)s)")
    _opt(p, "--redundant", type=float, nargs="+", default=[0.0],
         help="redundant-factor fractions (default %(default)s)")
    _opt(p, "--sparse", type=int, default=0)
    _opt(p, "--dense", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_noise_experiment)

    return parser


def run(argv=None) -> int:
    """Parse arguments and dispatch; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failure -> exit 1 with diagnostic
        print(f"annofa: error: {exc}", file=sys.stderr)
        return 1


def main():
    raise SystemExit(run())


if __name__ == "__main__":
    main()
