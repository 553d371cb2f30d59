"""Command-line entry point: ``rlmcmc <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import RlmcmcError
from .compare import compare, plot_traces
from .config import METHODS, ExperimentConfig
from .experiments import EXPERIMENTS, build_experiment
from .oracles import gradcheck, mh_oracle
from .runner import run, run_matrix
from .trace import RunTrace

GRADCHECK_TOL = 1e-4
MH_TV_TOL = 0.05


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else build_experiment(args.experiment)
    changes = {}
    if args.method is not None:
        changes["method"] = args.method
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.max_steps is not None:
        changes["max_steps"] = args.max_steps
    if args.timing is not None:
        changes["timing"] = args.timing
    return cfg.replace(**changes) if changes else cfg


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--experiment", choices=EXPERIMENTS, default="exp1")
    p.add_argument("--config", type=Path, help="JSON config file; overrides --experiment")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--timing", choices=("wall", "none"))


def cmd_run(args) -> int:
    cfg = _config(args)
    trace = run(cfg, out_dir=args.out, audit=args.audit)
    meta = trace.meta
    print(
        f"{cfg.name} {meta['method']} seed={cfg.seed}: accepted={trace.final.accepted_total} "
        f"final misfit={trace.final.misfit:.6g} threshold={meta['threshold']:.6g} "
        f"steps to threshold={trace.steps_to_threshold(meta['threshold'])}"
    )
    if "error" in meta:
        print(f"aborted: {meta['error']}", file=sys.stderr)
        return 1
    return 0


def cmd_matrix(args) -> int:
    args.method = args.seed = None
    cfg = _config(args)
    traces = run_matrix(cfg, args.methods, range(args.seeds), args.out, workers=args.workers)
    report = compare(traces)
    report.write(args.out)
    print(report.text())
    return 0


def cmd_compare(args) -> int:
    report = compare([RunTrace.read(p) for p in args.traces])
    report.write(args.out)
    print(report.text())
    return 0


def cmd_plot(args) -> int:
    traces = [RunTrace.read(p) for p in args.traces]
    thr = {t.meta.get("threshold") for t in traces}
    plot_traces(traces, args.out, threshold=thr.pop() if len(thr) == 1 else None)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = gradcheck(n_nets=args.nets, seed=args.seed)
    ok = all(v < GRADCHECK_TOL for v in worst.values())
    for k, v in worst.items():
        print(f"{k}: max relative error {v:.3e} (tolerance {GRADCHECK_TOL:g})")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_oracle_mh(args) -> int:
    res = mh_oracle(n_steps=args.steps, seed=args.seed)
    for s, p, q in zip(res.states, res.exact, res.empirical):
        print(f"x={s[0].x:2d}  exact={p:.4f}  empirical={q:.4f}")
    ok = res.tv < MH_TV_TOL
    print(f"total variation {res.tv:.4f} (tolerance {MH_TV_TOL})  {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rlmcmc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one chain")
    _add_config_args(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--audit", action="store_true", help="check proposal densities at every step")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("matrix", help="every method over seeds 0..N-1, then compare")
    _add_config_args(p)
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("compare", help="tabulate finished runs")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("traces", nargs="+", type=Path, help="run directories or trace.csv files")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot", help="misfit against accepted step")
    p.add_argument("--out", type=Path, default=Path("misfit.svg"))
    p.add_argument("traces", nargs="+", type=Path)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gradcheck", help="analytic against finite-difference gradients")
    p.add_argument("--nets", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle-mh", help="ten-state chain against its enumerated posterior")
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_mh)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (RlmcmcError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
