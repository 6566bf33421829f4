"""Command-line entry point: ``tsac train | analyze | plot | verify``.

Exit codes: 0 success, 1 I/O failure, 2 invalid config or input,
3 divergence guard tripped, 4 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, default_out_root, load_config

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3, 4


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


# train --------------------------------------------------------------------------

def run_dir_for(cfg, out: str | None) -> Path:
    if out:
        return Path(out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return default_out_root() / f"{cfg.env_id}-{cfg.reward_mode}-seed{cfg.seed}"


def cmd_train(args) -> int:
    from .learner import DivergenceError, train

    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    out = run_dir_for(cfg, args.out)
    cfg.out_dir = str(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "VERSION").write_text(f"tsac {__version__}\n")
        result = train(cfg, out)
    except DivergenceError as exc:
        _err(f"diverged: {exc}")
        return EXIT_DIVERGED
    except OSError as exc:
        _err(f"I/O failure: {exc}")
        return EXIT_IO
    last = result.rows[-1]
    print(f"done: {result.steps} steps in {result.wall_seconds:.1f}s; final iqm_success={last['iqm_success']:.3f} "
          f"iqm_return={last['iqm_return']:.3f}; metrics at {result.metrics_path}")
    return EXIT_OK


# analyze ------------------------------------------------------------------------

def _fmt(v) -> str:
    return "none" if v is None else f"{v:.6g}"


def analyze_rows(Ns, gammas, rhos, kappas, lmins, lmaxs) -> list[str]:
    """Formula values over the cartesian grid; raises ``ValueError`` on an invalid point."""
    from .analysis import formulas as F

    rows = []
    for N in Ns:
        for g in gammas:
            for r in rhos:
                for k in kappas:
                    m = F.VarianceModel(N, g, rho=r, kappa=k)
                    p = f"N={N} gamma={g:g} rho={r:g} kappa={k:g}"
                    rows.append(f"{p} | R_gamma = {_fmt(F.reward_ratio(m))}")
                    rows.append(f"{p} | R_B = {_fmt(F.bootstrap_ratio(m))}")
                    rows.append(f"{p} | total_ratio = {_fmt(F.total_ratio(m))}")
            lo, hi = F.bootstrap_ratio_bounds(N, g)
            rows.append(f"N={N} gamma={g:g} | kappa_star = {_fmt(F.kappa_star(N, g))}")
            rows.append(f"N={N} gamma={g:g} | R_B_kappa1 = {_fmt(lo)}  R_B_kappa0 = {_fmt(hi)}")
        for lo in lmins:
            for hi in lmaxs:
                wm = F.WindowModel(N, lo, N if hi is None else hi)
                p = f"N={N} l_min={wm.l_min} l_max={wm.l_max}"
                rows.append(f"{p} | reuse_last = {_fmt(F.reuse_last(wm))}")
                rows.append(f"{p} | mean_reuse = {_fmt(F.mean_reuse(wm))}")
                rows.append(f"{p} | mean_reuse_untruncated = {_fmt(F.mean_reuse_untruncated(wm))}")
                rows.append(f"{p} | reward_bearing_updates = {_fmt(F.reward_bearing_updates(wm))}")
                rows.append(f"{p} | sparse_amplification = {_fmt(F.sparse_amplification(wm))}")
                if N <= 32:
                    for j in range(1, N + 1):
                        rows.append(f"{p} j={j} | expected_reuse = {_fmt(F.expected_reuse(j, wm))}  "
                                    f"coverage = {_fmt(F.coverage_probability(j, wm))}")
    return rows


def cmd_analyze(args) -> int:
    try:
        rows = analyze_rows(args.N, args.gamma, args.rho, args.kappa, args.lmin, args.lmax or [None])
    except ValueError as exc:
        _err(f"invalid grid: {exc}")
        return EXIT_CONFIG
    print("\n".join(rows))
    return EXIT_OK


# verify -------------------------------------------------------------------------

def cmd_verify(args) -> int:
    from .analysis.verify import run_all, summarize

    checks = run_all(trials=args.trials, seed=args.seed)
    summary = summarize(checks)
    print(f"{'check':<28} {'count':>6} {'failed':>6} {'max_discrepancy':>16} {'max_z':>8}")
    for name, row in summary.items():
        print(f"{name:<28} {row['count']:>6} {row['failed']:>6} {row['max_discrepancy']:>16.3e} "
              f"{row['max_z']:>8.2f}")
    failed = [c for c in checks if not c.passed]
    for c in failed[:20]:
        print(f"FAIL {c.name} {c.params}: formula={c.formula!r} oracle={c.oracle!r} stderr={c.stderr:.3g}")
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# plot ---------------------------------------------------------------------------

def cmd_plot(args) -> int:
    from .plotting import plot_runs

    if args.labels and len(args.labels) != len(args.paths):
        _err("--labels needs one label per path")
        return EXIT_CONFIG
    try:
        written = plot_runs(args.paths, args.out, labels=args.labels)
    except ValueError as exc:
        _err(f"malformed metrics: {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"I/O failure: {exc}")
        return EXIT_IO
    for p in written:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsac", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tsac {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run from a config")
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help="run directory (default: $TSAC_OUT_ROOT/<env>-<mode>-seed<seed>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="print closed-form values on a parameter grid")
    p.add_argument("--N", type=int, nargs="+", default=[4])
    p.add_argument("--gamma", type=float, nargs="+", default=[0.99])
    p.add_argument("--rho", type=float, nargs="+", default=[0.0])
    p.add_argument("--kappa", type=float, nargs="+", default=[0.0])
    p.add_argument("--lmin", type=int, nargs="+", default=[1])
    p.add_argument("--lmax", type=int, nargs="+", default=None, help="default: N")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify", help="check every closed form against its oracle")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", help="IQM curves with bootstrap bands")
    p.add_argument("paths", nargs="+", help="metrics.csv files or run directories (one curve each)")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out", default="plots")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
