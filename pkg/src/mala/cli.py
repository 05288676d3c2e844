"""Command-line entry point.

Subcommands write their records to ``--out`` (CSV with a header, or JSON) and
print ``key=value`` summary lines on stdout. Exit codes: 0 success, 1 a
checked property failed, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis, bench, grad
from .attention import ABLATION_MODES, ablated_mala_scores, linear_scores, mala_scores
from .kernels import KernelKind, kernel_apply
from .numerics import instance_rng, row_softmax

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DISTRIBUTION_COLUMNS = ["mechanism", "scale", "query", "key", "score"]
DISTRIBUTION_SUMMARY_COLUMNS = ["mechanism", "scale", "entropy", "max_score", "score_variance", "negative_count"]
RATIO_COLUMNS = ["instance", "a", "m", "n", "beta", "gamma", "beta_new", "gamma_new", "p", "p_m",
                 "all_scores_positive"]
ABLATE_COLUMNS = ["instance", "mode", "scale", "mean_row_sum_dev", "max_row_sum_dev", "mean_abs_score",
                  "max_abs_score", "full_max_row_sum_dev"]
BENCH_COLUMNS = ["mechanism", "form", "n", "d", "wall_time_s", "repeats"]
GRADCHECK_COLUMNS = ["tensor", "max_rel_error", "tol", "passed"]

EPILOG = {
    "distribution": "CSV columns: " + ",".join(DISTRIBUTION_COLUMNS)
    + ". Summary (<out>_summary.csv): " + ",".join(DISTRIBUTION_SUMMARY_COLUMNS)
    + ". Softmax scales Q; linear and MALA scale phi(Q).",
    "ratios": "CSV columns: " + ",".join(RATIO_COLUMNS)
    + ". p / p_m are empty when the score of key n is not positive.",
    "ablate": "CSV columns: " + ",".join(ABLATE_COLUMNS)
    + ". Row sum deviation is |sum_j score_ij - 1|; scale multiplies phi(Q).",
    "bench": "CSV columns: " + ",".join(BENCH_COLUMNS) + ". Times are medians in seconds.",
    "gradcheck": "CSV columns: " + ",".join(GRADCHECK_COLUMNS) + ".",
}


@dataclass
class RunConfig:
    seed: int = 0
    n: int = 16
    d: int = 8
    kernel: KernelKind = KernelKind.ELU1
    mechanism: str = "mala"
    scale_factors: list = field(default_factory=lambda: [1.0])
    output_path: Optional[Path] = None
    format: str = "csv"


def _scales(text: str) -> list:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals or any(not v >= 1 for v in vals):
        raise argparse.ArgumentTypeError("scale factors must all be >= 1")
    return vals


def _ints(text: str) -> list:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_records(path: Optional[Path], fmt: str, columns, rows, extra: Optional[dict] = None) -> None:
    if path is None:
        return
    path = Path(path)
    if fmt == "json":
        payload = {"records": [dict(zip(columns, r)) for r in rows]}
        if extra:
            payload.update(extra)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
        return
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _summary(**items) -> None:
    for key, val in items.items():
        print(f"{key}={_fmt(val)}")


# --- subcommands -------------------------------------------------------------

def cmd_distribution(cfg: RunConfig) -> int:
    rng = instance_rng(cfg.seed, 0)
    q = rng.standard_normal((cfg.n, cfg.d))
    k = rng.standard_normal((cfg.n, cfg.d))
    phi_q = kernel_apply(cfg.kernel, q)
    phi_k = kernel_apply(cfg.kernel, k)
    root = np.sqrt(cfg.d)
    rows, summary = [], []
    for mech in ("softmax", "linear", "mala"):
        for a in cfg.scale_factors:
            if mech == "softmax":
                scores = row_softmax((a * q) @ k.T / root)
            elif mech == "linear":
                scores = linear_scores(a * phi_q, phi_k)
            else:
                scores = mala_scores(a * phi_q, phi_k)[0]
            for i in range(cfg.n):
                for j in range(cfg.n):
                    rows.append((mech, a, i, j, scores[i, j]))
            s = analysis.spikiness_from_scores(scores, mech)
            summary.append((mech, a, s.entropy, s.max_score, s.score_variance, s.negative_count))
    _write_records(cfg.output_path, cfg.format, DISTRIBUTION_COLUMNS, rows,
                   {"summary": [dict(zip(DISTRIBUTION_SUMMARY_COLUMNS, r)) for r in summary]})
    if cfg.output_path is not None and cfg.format == "csv":
        out = Path(cfg.output_path)
        _write_records(out.with_name(out.stem + "_summary" + out.suffix), "csv",
                       DISTRIBUTION_SUMMARY_COLUMNS, summary)
    for mech, a, ent, mx, var, neg in summary:
        print(f"mechanism={mech} scale={_fmt(a)} entropy={_fmt(ent)} max_score={_fmt(mx)} "
              f"score_variance={_fmt(var)} negative_count={neg}")
    return EXIT_OK


def cmd_ratios(cfg: RunConfig, trials: int) -> int:
    scales = cfg.scale_factors if cfg.scale_factors else None
    if scales and any(not a > 1 for a in scales):
        print("error: ratio scale factors must be > 1", file=sys.stderr)
        return EXIT_USAGE
    sweep = analysis.ratio_sweep(cfg.seed, trials, scales, cfg.kernel, max_n=cfg.n, max_d=cfg.d)
    rows = [(i, r.a, r.m, r.n, r.beta, r.gamma, r.beta_new, r.gamma_new, r.p, r.p_m, r.all_scores_positive)
            for i, r in enumerate(sweep.reports)]
    summary = dict(
        instances=len(sweep.reports),
        positive_score_instances=sweep.positive_count,
        filtered_negative_score=sweep.filtered_count,
        filtered_fraction=sweep.filtered_fraction,
        counterexamples=len(sweep.counterexamples),
        monotone_failures=sweep.monotone_failures,
        lemma_trials=sweep.lemma_trials,
        lemma_failures=sweep.lemma_failures,
        max_beta_new_error=sweep.max_beta_error,
        max_gamma_new_error=sweep.max_gamma_error,
    )
    _write_records(cfg.output_path, cfg.format, RATIO_COLUMNS, rows, {"summary": summary})
    _summary(**summary)
    bad = sweep.counterexamples or sweep.monotone_failures or sweep.lemma_failures
    return EXIT_FAIL if bad else EXIT_OK


def cmd_ablate(cfg: RunConfig, mode: str, trials: int, beta=None, gamma=None) -> int:
    rows = []
    worst_full = 0.0
    devs = []
    for t in range(trials):
        rng = instance_rng(cfg.seed, t)
        phi_q, phi_k = analysis.sample_features(rng, cfg.n, cfg.d, cfg.kernel)
        phi_q = np.vstack([phi_q, kernel_apply(cfg.kernel, rng.standard_normal((cfg.n - 1, cfg.d)))])
        # ReLU rows with no overlap have no defined normalizer
        phi_q = phi_q[phi_q @ phi_k.sum(axis=0) > 0]
        for a in cfg.scale_factors:
            scores = ablated_mala_scores(a * phi_q, phi_k, mode, beta, gamma)
            full = ablated_mala_scores(a * phi_q, phi_k, "full")
            dev = np.abs(scores.sum(axis=1) - 1.0)
            full_dev = float(np.abs(full.sum(axis=1) - 1.0).max())
            worst_full = max(worst_full, full_dev)
            devs.append(dev.mean())
            rows.append((t, mode, a, float(dev.mean()), float(dev.max()), float(np.abs(scores).mean()),
                         float(np.abs(scores).max()), full_dev))
    summary = dict(mode=mode, instances=trials, mean_row_sum_dev=float(np.mean(devs)),
                   full_max_row_sum_dev=worst_full)
    _write_records(cfg.output_path, cfg.format, ABLATE_COLUMNS, rows, {"summary": summary})
    _summary(**summary)
    return EXIT_FAIL if worst_full >= 1e-10 else EXIT_OK


def cmd_bench(cfg: RunConfig, ns, repeats: int, memory_cap_mb: int) -> int:
    try:
        records, slopes = bench.scaling_sweep(ns, cfg.d, repeats=repeats, seed=cfg.seed, kernel=cfg.kernel,
                                              memory_cap=memory_cap_mb * 2**20)
    except bench.MemoryCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rows = [(r.mechanism, r.form, r.n, r.d, r.wall_time, r.repeats) for r in records]
    sep = bench.separation(slopes)
    _write_records(cfg.output_path, cfg.format, BENCH_COLUMNS, rows,
                   {"slopes": [{"mechanism": m, "form": f, "slope": s} for (m, f), s in slopes.items()],
                    "separation": sep})
    for (mech, form), s in slopes.items():
        print(f"slope={s:.4f} mechanism={mech} form={form}")
    print(f"separation={sep:.4f}")
    return EXIT_OK if sep > 0.5 else EXIT_FAIL


def cmd_gradcheck(cfg: RunConfig, trials: int) -> int:
    rep = grad.gradcheck(cfg.seed, trials, cfg.kernel)
    rows = [(name, err, rep.tol, err < rep.tol)
            for name, err in (("q", rep.max_error_q), ("k", rep.max_error_k), ("v", rep.max_error_v))]
    _write_records(cfg.output_path, cfg.format, GRADCHECK_COLUMNS, rows,
                   {"summary": {"seed": rep.seed, "trials": rep.trials, "kernel": rep.kernel,
                                "passed": rep.passed}})
    _summary(kernel=rep.kernel, seed=rep.seed, trials=rep.trials, max_rel_error_q=rep.max_error_q,
             max_rel_error_k=rep.max_error_k, max_rel_error_v=rep.max_error_v,
             result="pass" if rep.passed else "fail")
    return EXIT_OK if rep.passed else EXIT_FAIL


# --- parser ------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, n: int, d: int, scales: Optional[str]) -> None:
    p.add_argument("--seed", type=_seed, default=0, help="master seed (default 0)")
    p.add_argument("--n", type=_positive, default=n, help=f"tokens / max tokens per instance (default {n})")
    p.add_argument("--d", type=_positive, default=d, help=f"feature dimension (default {d})")
    p.add_argument("--kernel", choices=[k.value for k in KernelKind], default="elu1", help="feature map phi")
    p.add_argument("--scales", type=_scales, default=_scales(scales) if scales else None,
                   help=f"comma-separated scale factors >= 1 (default {scales or 'sampled'})")
    p.add_argument("--out", type=Path, default=None, help="output file")
    p.add_argument("--format", choices=["csv", "json"], default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mala", description="Attention score analysis for softmax, linear and MALA.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distribution", help="score distributions under query scaling", epilog=EPILOG["distribution"])
    _common(p, 16, 8, "1,2,4,8")

    p = sub.add_parser("ratios", help="MALA / softmax ratio laws and lemma sweeps", epilog=EPILOG["ratios"])
    _common(p, 16, 8, None)
    p.add_argument("--trials", type=_positive, default=10_000)

    p = sub.add_parser("ablate", help="MALA with beta or gamma removed or fixed", epilog=EPILOG["ablate"])
    _common(p, 16, 8, "1")
    p.add_argument("--mode", required=True, choices=[m for m in ABLATION_MODES if m != "full"])
    p.add_argument("--beta", type=float, default=None, help="constant beta for --mode fixed")
    p.add_argument("--gamma", type=float, default=None, help="constant gamma for --mode fixed")
    p.add_argument("--trials", type=_positive, default=200)

    p = sub.add_parser("bench", help="wall-clock scaling slopes", epilog=EPILOG["bench"])
    _common(p, 1024, 64, None)
    p.add_argument("--ns", type=_ints, default=[1024, 2048, 4096, 8192, 16384])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--mem-cap-mb", type=_positive, default=bench.DEFAULT_MEMORY_CAP // 2**20)

    p = sub.add_parser("gradcheck", help="MALA backward vs central differences", epilog=EPILOG["gradcheck"])
    _common(p, 8, 4, None)
    p.add_argument("--trials", type=_positive, default=20)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = RunConfig(
        seed=args.seed,
        n=args.n,
        d=args.d,
        kernel=KernelKind.parse(args.kernel),
        scale_factors=args.scales or [],
        output_path=args.out,
        format=args.format,
    )
    if cfg.output_path is not None and not cfg.output_path.parent.is_dir():
        print(f"error: cannot write {cfg.output_path}: directory does not exist", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "distribution":
            return cmd_distribution(cfg)
        if args.command == "ratios":
            return cmd_ratios(cfg, args.trials)
        if args.command == "ablate":
            if args.mode == "fixed" and (args.beta is None or args.gamma is None):
                parser.error("--mode fixed needs --beta and --gamma")
            if not cfg.scale_factors:
                cfg.scale_factors = [1.0]
            return cmd_ablate(cfg, args.mode, args.trials, args.beta, args.gamma)
        if args.command == "bench":
            if args.repeats < bench.MIN_REPEATS:
                parser.error(f"--repeats must be >= {bench.MIN_REPEATS}")
            return cmd_bench(cfg, args.ns, args.repeats, args.mem_cap_mb)
        return cmd_gradcheck(cfg, args.trials)
    except OSError as exc:
        print(f"error: cannot write {cfg.output_path}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
