"""Command-line interface: ``stochtopo run | compare | sweep | oracle``.

Exit status is 0 when every run converged, 2 when some run did not, and 1
for usage or validation errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .driver import delta_c, read_baseline, run_spec, write_artifacts
from .problems import BUILTINS, ProblemError, builtin_problem, parse_problem

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

log = logging.getLogger("stochtopo")


def load_spec(source: str, engine=None):
    if source in BUILTINS:
        return builtin_problem(source, engine or "standard")
    spec = parse_problem(source)
    if engine:
        spec.engine = engine
    return spec


def _overrides(args) -> dict:
    over = {}
    for flag, name in (("n", "n"), ("tau_step", "tau_step"), ("gamma", "gamma"), ("n_step_window", "n_step"),
                       ("budget", "max_steps")):
        v = getattr(args, flag, None)
        if v is not None:
            over[name] = v
    if getattr(args, "diagnostics", False):
        over["diagnostics"] = True
    if getattr(args, "no_damping", False):
        over["damping"] = False
    return over


def _common(p: argparse.ArgumentParser):
    p.add_argument("problem", help=f"YAML problem file or built-in name ({', '.join(BUILTINS)})")
    p.add_argument("--n", type=int, help="sample size of the stochastic engine")
    p.add_argument("--tau-step", type=float, help="effective step ratio tolerance")
    p.add_argument("--gamma", type=float, help="move-limit reduction factor")
    p.add_argument("--n-step-window", type=int, help="damping window length")
    p.add_argument("--seed", type=int, help="master seed for the trials")
    p.add_argument("--trials", type=int, default=1, help="number of independent trials")
    p.add_argument("--budget", type=int, help="maximum optimization steps per run")
    p.add_argument("--diagnostics", action="store_true", help="record exact compliance and cos(theta) each step")
    p.add_argument("--no-damping", action="store_true", help="disable move-limit damping")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochtopo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="optimize a problem")
    _common(p)
    p.add_argument("--engine", choices=("standard", "stochastic"))
    p.add_argument("--baseline", help="summary.json or metrics.csv of a reference run")
    p.add_argument("--out", default="runs", help="output directory")

    p = sub.add_parser("compare", help="standard vs. stochastic on one problem")
    _common(p)
    p.add_argument("--out", help="optional output directory")

    p = sub.add_parser("sweep", help="stochastic runs over a range of n or tau_step")
    _common(p)
    p.add_argument("--param", choices=("n", "tau_step"), default="n")
    p.add_argument("--values", type=float, nargs="+", required=True)

    p = sub.add_parser("oracle", help="run brute-force oracle checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _pct(x) -> str:
    return "-" if x is None else f"{100.0 * x:.2f}%"


def cmd_run(args) -> int:
    spec = load_spec(args.problem, args.engine)
    baseline = read_baseline(args.baseline) if args.baseline else None
    art = run_spec(spec, args.engine, args.trials, args.seed, baseline, _overrides(args))
    out = write_artifacts(art, spec, Path(args.out) / spec.name / art.engine)
    s = art.summary()
    for k, t in enumerate(s["trials"]):
        print(f"trial {k}: C={t['compliance']:.6g} steps={t['n_step']} N_solve={t['n_solve']} "
              f"converged={t['converged']} dC={_pct(t.get('delta_c'))}")
    print(f"mean C={s['compliance_mean']:.6g} dC={_pct(s.get('delta_c_mean'))} -> {out}")
    return EXIT_OK if art.all_converged else EXIT_NOT_CONVERGED


def cmd_compare(args) -> int:
    over = _overrides(args)
    std_spec = load_spec(args.problem, "standard")
    std = run_spec(std_spec, "standard", 1, None, None, {k: v for k, v in over.items() if k == "max_steps"})
    c_star = float(std.compliances[0])
    sto_spec = load_spec(args.problem, "stochastic")
    sto = run_spec(sto_spec, "stochastic", args.trials, args.seed, c_star, over)
    if args.out:
        write_artifacts(std, std_spec, Path(args.out) / std_spec.name / "standard")
        write_artifacts(sto, sto_spec, Path(args.out) / sto_spec.name / "stochastic")
    s = sto.summary()
    header = f"{'':14}{'C*':>10}{'C^S':>10}{'dC':>9}{'tau_step':>10}{'cos':>8}{'n':>5}{'N_step':>9}{'N_solve':>10}"
    print(header)
    print(f"{'standard':14}{c_star:>10.4f}{'-':>10}{'-':>9}{'-':>10}{'-':>8}{std_spec.loads.m:>5}"
          f"{std.results[0].n_step:>9}{std.results[0].n_solve:>10}")
    cos = "-" if s["mean_cos_theta"] is None else f"{s['mean_cos_theta']:.3f}"
    print(f"{'stochastic':14}{'-':>10}{s['compliance_mean']:>10.4f}{_pct(s['delta_c_mean']):>9}"
          f"{sto.params.tau_step:>10g}{cos:>8}{sto.params.n:>5}{s['n_step_mean']:>9.0f}{s['n_solve_mean']:>10.0f}")
    print(f"cost ratio N_solve(stochastic)/N_solve(standard) = {s['n_solve_mean'] / std.results[0].n_solve:.3f}")
    return EXIT_OK if std.all_converged and sto.all_converged else EXIT_NOT_CONVERGED


def cmd_sweep(args) -> int:
    spec = load_spec(args.problem, "stochastic")
    base = _overrides(args)
    ok = True
    print(f"{args.param:>10}{'mean C':>12}{'std C':>12}{'N_step':>9}{'N_solve':>10}")
    for v in args.values:
        over = dict(base, **{args.param: int(v) if args.param == "n" else float(v)})
        art = run_spec(spec, "stochastic", args.trials, args.seed, None, over)
        s = art.summary()
        ok &= art.all_converged
        print(f"{v:>10g}{s['compliance_mean']:>12.6g}{s['compliance_std']:>12.3g}"
              f"{s['n_step_mean']:>9.0f}{s['n_solve_mean']:>10.0f}")
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def cmd_oracle(args) -> int:
    from .oracles import run_all
    checks = run_all(args.seed)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_ERROR


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep, "oracle": cmd_oracle}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ProblemError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
