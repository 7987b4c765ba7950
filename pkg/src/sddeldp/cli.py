"""Command line entry point: ``sddeldp <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure (blow-up,
non-convergence, fit error), 3 warnings promoted by ``--strict``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import warnings

from .core import (EventSpec, GridAlignmentError, SddeError, check_assumptions, make_grid,
                   read_control_csv, read_path_csv, write_control_csv, write_path_csv)
from .mc import FitError, ReliabilityWarning, epsilon_sweep, estimate_prob
from .modelfile import ModelFileError, load_phi, parse_model_file
from .rate import MinimizeConfig, evaluate_rate, minimize_rate
from .sdde import HypothesisWarning, RngStream, SCHEMES, moment_sweep, simulate, simulate_controlled
from .skeleton import SkeletonConfig, solve_skeleton

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_WARN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class Numerical(Exception):
    """A subcommand finished but its numerical result is not trustworthy."""


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(type(o))


def _emit_json(payload, path):
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _emit_csv(rows, fields, path):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in fields})
    finally:
        if path:
            fh.close()


def _summary(msg):
    print(msg, file=sys.stderr)


def parse_event(spec: str) -> EventSpec:
    """``halfspace:<i>:<a>[:+|-]``, ``ball:<c0,c1,..>:<r>`` or ``tube:<ref.csv>:<delta>``."""
    parts = spec.split(":")
    kind = parts[0]
    try:
        if kind == "halfspace" and len(parts) in (3, 4):
            direction = -1 if len(parts) == 4 and parts[3] == "-" else 1
            if len(parts) == 4 and parts[3] not in "+-":
                raise ValueError(parts[3])
            return EventSpec.halfspace(int(parts[1]), float(parts[2]), direction)
        if kind == "ball" and len(parts) == 3:
            return EventSpec.ball_exterior([float(c) for c in parts[1].split(",")], float(parts[2]))
        if kind == "tube" and len(parts) == 3:
            return EventSpec.tube_exit(read_path_csv(parts[1]), float(parts[2]))
    except (ValueError, OSError) as exc:
        raise UsageError(f"bad --event {spec!r}: {exc}") from None
    raise UsageError(f"bad --event {spec!r}; expected halfspace:i:a[:+|-], ball:c:r or tube:file:delta")


def _model_and_grid(args):
    model = parse_model_file(args.model)
    if args.tau is not None:
        model = model.with_tau(args.tau)
    return model, make_grid(args.T, args.h, model.tau)


def _phi(args, model, grid):
    return load_phi(args.phi, grid, model.d)


# ---------------------------------------------------------------------------
# subcommands


def cmd_check(args):
    model = parse_model_file(args.model)
    rep = check_assumptions(model, n_points=args.n_points, radius=args.radius, seed=args.seed, T=args.T)
    payload = rep.as_dict()
    payload["model"] = model.name
    payload["declared"] = model.declared.as_dict()
    _emit_json(payload, args.out)
    failed = [r.condition for r in rep.conditions if not r.passed]
    _summary(f"check {model.name}: {'all pass' if not failed else 'FAIL ' + ','.join(failed)}; "
             f"largest feasible eta {rep.largest_feasible_eta:.4g}; gate "
             f"{'pass' if rep.theorem_gate_pass else 'fail'}")
    return EXIT_OK


def cmd_skeleton(args):
    model, grid = _model_and_grid(args)
    phi = _phi(args, model, grid)
    ctrl = read_control_csv(args.control, grid) if args.control else None
    traj = solve_skeleton(model, phi, ctrl, grid, SkeletonConfig(method=args.method))
    write_path_csv(traj, args.out or sys.stdout)
    _summary(f"skeleton {args.method}: z(T) = {traj.values[-1].tolist()}")
    return EXIT_OK


def cmd_simulate(args):
    model, grid = _model_and_grid(args)
    phi = _phi(args, model, grid)
    rng = RngStream(args.seed, args.stream)
    if args.control:
        run = simulate_controlled(model, phi, args.eps, read_control_csv(args.control, grid), grid,
                                  args.scheme, rng)
        traj, extra = run.trajectory, f", log weight {run.log_weight:.6g}"
    else:
        traj, extra = simulate(model, phi, args.eps, grid, args.scheme, rng), ""
    write_path_csv(traj, args.out or sys.stdout)
    _summary(f"simulate {args.scheme} eps={args.eps:g}: X(T) = {traj.values[-1].tolist()}{extra}")
    return EXIT_OK


def cmd_rate_eval(args):
    model = parse_model_file(args.model)
    path = read_path_csv(args.path)
    if not math.isclose(path.grid.tau, model.tau, rel_tol=1e-9):
        model = model.with_tau(path.grid.tau)
    cert = evaluate_rate(model, path, tol=args.tol)
    _emit_json(cert.as_dict(), args.out)
    _summary(f"rate-eval: value {cert.value:.8g}, feasible {cert.feasible}, "
             f"max residual {cert.max_residual:.3g}")
    return EXIT_OK


def _stem(path, suffix):
    base = path[:-5] if path.endswith(".json") else path
    return f"{base}.{suffix}.csv"


def cmd_rate_min(args):
    model, grid = _model_and_grid(args)
    phi = _phi(args, model, grid)
    event = parse_event(args.event)
    res = minimize_rate(model, phi, event, grid, MinimizeConfig(gradient=args.gradient))
    payload = res.as_dict()
    payload["event"] = event.describe()
    if args.out:
        payload["control_csv"] = _stem(args.out, "control")
        payload["trajectory_csv"] = _stem(args.out, "trajectory")
        write_control_csv(res.control, payload["control_csv"])
        write_path_csv(res.trajectory, payload["trajectory_csv"])
    _emit_json(payload, args.out)
    _summary(f"rate-min {event.describe()}: value {res.value:.8g}, violation {res.violation:.2g}, "
             f"{'converged' if res.converged else 'NOT converged: ' + res.message}")
    if not res.converged:
        raise Numerical(res.message)
    return EXIT_OK


def cmd_mc(args):
    model, grid = _model_and_grid(args)
    phi = _phi(args, model, grid)
    event = parse_event(args.event)
    ctrl = None
    if args.importance:
        if not event.is_endpoint:
            raise UsageError("--importance needs an end-point event")
        ctrl = minimize_rate(model, phi, event, grid).control
    est = estimate_prob(model, phi, args.eps, event, args.n, grid, args.scheme, args.seed, ctrl)
    payload = est.as_dict()
    payload.update(eps=args.eps, event=event.describe())
    _emit_json(payload, args.out)
    _summary(f"mc {est.method} eps={args.eps:g}: p = {est.p_hat:.6g} +- {est.stderr:.2g}")
    return EXIT_OK


def cmd_moments(args):
    model, grid = _model_and_grid(args)
    phi = _phi(args, model, grid)
    eps_list = [float(e) for e in args.eps_list.split(",")]
    rows = moment_sweep(model, phi, eps_list, args.p, args.n, grid, args.scheme, args.seed)
    _emit_csv([{"eps": r.eps, "p": r.p, "estimate": r.estimate, "stderr": r.stderr, "n": r.n}
               for r in rows], ["eps", "p", "estimate", "stderr", "n"], args.out)
    _summary(f"moments p={args.p:g}: " + ", ".join(f"{r.eps:g}->{r.estimate:.4g}" for r in rows))
    return EXIT_OK


def cmd_sweep(args):
    model, grid = _model_and_grid(args)
    phi = _phi(args, model, grid)
    event = parse_event(args.event)
    eps_list = [float(e) for e in args.eps_list.split(",")]
    res = epsilon_sweep(model, phi, eps_list, event, args.n, grid, args.scheme, args.seed,
                        use_is=not args.plain, budget=args.budget)
    _emit_csv(res.csv_rows(), ["eps", "p_hat", "stderr", "eps_log_p", "ess"], args.out)
    summary = res.summary()
    summary.update(event=event.describe(), eps_list=eps_list, seed=args.seed,
                   method="plain" if args.plain else "importance")
    if args.summary:
        _emit_json(summary, args.summary)
    elif args.out:
        _emit_json(summary, None)
    _summary(f"sweep: extrapolated rate {res.extrapolated_rate:.5g} +- {res.rate_stderr:.2g}, "
             f"variational {res.variational_value:.5g}, gap {res.gap:.3g}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sddeldp", description="Large deviations laboratory for delay SDEs.")
    p.add_argument("--strict", action="store_true", help="exit 3 on reliability warnings")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def grid_args(sp, T=1.0, h=0.01):
        sp.add_argument("--T", type=float, default=T)
        sp.add_argument("--h", type=float, default=h)
        sp.add_argument("--tau", type=float, default=None, help="override the model's delay")

    sp = sub.add_parser("check", help="sample the coefficient assumptions")
    sp.add_argument("--model", required=True)
    sp.add_argument("--T", type=float, default=1.0)
    sp.add_argument("--n-points", type=int, default=100_000)
    sp.add_argument("--radius", type=float, default=5.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("skeleton", help="solve the controlled skeleton equation")
    sp.add_argument("--model", required=True)
    sp.add_argument("--phi", required=True)
    sp.add_argument("--control")
    grid_args(sp)
    sp.add_argument("--method", choices=("steps_rk4", "picard_truncated"), default="steps_rk4")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_skeleton)

    sp = sub.add_parser("simulate", help="simulate one path")
    sp.add_argument("--model", required=True)
    sp.add_argument("--phi", required=True)
    sp.add_argument("--eps", type=float, required=True)
    grid_args(sp)
    sp.add_argument("--scheme", choices=SCHEMES, default="tamed_euler")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--stream", type=int, default=0)
    sp.add_argument("--control")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("rate-eval", help="evaluate the rate function of a path")
    sp.add_argument("--model", required=True)
    sp.add_argument("--path", required=True)
    sp.add_argument("--tol", type=float, default=None)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_rate_eval)

    sp = sub.add_parser("rate-min", help="minimise the rate over an end-point event")
    sp.add_argument("--model", required=True)
    sp.add_argument("--phi", required=True)
    sp.add_argument("--event", required=True)
    grid_args(sp)
    sp.add_argument("--gradient", choices=("adjoint", "finite_difference"), default="adjoint")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_rate_min)

    sp = sub.add_parser("mc", help="estimate one event probability")
    sp.add_argument("--model", required=True)
    sp.add_argument("--phi", required=True)
    sp.add_argument("--eps", type=float, required=True)
    sp.add_argument("--event", required=True)
    grid_args(sp)
    sp.add_argument("--n", type=int, default=10_000)
    sp.add_argument("--scheme", choices=SCHEMES, default="tamed_euler")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--importance", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_mc)

    sp = sub.add_parser("moments", help="moment sweep of the running maximum")
    sp.add_argument("--model", required=True)
    sp.add_argument("--phi", required=True)
    sp.add_argument("--eps-list", required=True)
    sp.add_argument("--p", type=float, default=4.0)
    grid_args(sp)
    sp.add_argument("--n", type=int, default=10_000)
    sp.add_argument("--scheme", choices=SCHEMES, default="tamed_euler")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_moments)

    sp = sub.add_parser("sweep", help="noise sweep and decay-rate extrapolation")
    sp.add_argument("--model", required=True)
    sp.add_argument("--phi", required=True)
    sp.add_argument("--eps-list", required=True)
    sp.add_argument("--event", required=True)
    grid_args(sp)
    sp.add_argument("--n", type=int, default=100_000)
    sp.add_argument("--scheme", choices=SCHEMES, default="tamed_euler")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--plain", action="store_true", help="plain Monte Carlo instead of importance sampling")
    sp.add_argument("--budget", choices=("uniform", "geometric"), default="uniform")
    sp.add_argument("--out", help="rows CSV (stdout when omitted)")
    sp.add_argument("--summary", help="summary JSON path")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            code = args.func(args)
        except (UsageError, ModelFileError, GridAlignmentError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except (SddeError, Numerical, FloatingPointError) as exc:
            kind = "fit error" if isinstance(exc, FitError) else "numerical failure"
            print(f"error: {kind}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    promoted = [w for w in caught if issubclass(w.category, (ReliabilityWarning, HypothesisWarning))]
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if args.strict and promoted:
        return EXIT_WARN
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
