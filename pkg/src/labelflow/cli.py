"""Command-line entry point: ``labelflow simulate | study | prox``."""

from __future__ import annotations

import argparse
import contextlib
import json
import sys

import numpy as np

from .errors import (ContractViolation, GeodesicFailure, LabelflowError, NearSingularMetricError,
                     ProxNonConvergence, SchemeAbort)
from .harness import (MODES, convergence_study, export_report, export_trajectory, load_scenario,
                      residual_study, run_scenario)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ABORT = 3
EXIT_NONCONVERGENCE = 4


def _thread_context(threads):
    """Limit BLAS/OpenMP pools; ``pinned`` means one thread and no timings."""
    if threads is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1 if threads == "pinned" else int(threads))


def _threads(value):
    if value == "pinned":
        return value
    try:
        count = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a positive integer or 'pinned'") from None
    if count < 1:
        raise argparse.ArgumentTypeError("expected a positive integer or 'pinned'")
    return count


def _int_list(value):
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def _float_list(value):
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="labelflow", description="Mean-field label dynamics schemes.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one scheme on a scenario and write agent tables")
    sim.add_argument("scenario")
    sim.add_argument("--k", type=int, help="number of time steps (default: scenario k)")
    sim.add_argument("--mode", choices=MODES)
    sim.add_argument("--out", help="output file; a summary is printed either way")
    sim.add_argument("--format", choices=("csv", "json"), default="csv")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--threads", type=_threads)

    study = sub.add_parser("study", help="convergence or residual study over several k")
    study.add_argument("kind", choices=("convergence", "residual"))
    study.add_argument("scenario")
    study.add_argument("--ks", type=_int_list, help="comma-separated step counts (default: scenario ks)")
    study.add_argument("--mode", choices=MODES)
    study.add_argument("--oracle", action="store_true", help="compare against the closed-form solution")
    study.add_argument("--out", help="report file")
    study.add_argument("--format", choices=("csv", "json"))
    study.add_argument("--seed", type=int)
    study.add_argument("--threads", type=_threads)

    prox = sub.add_parser("prox", help="single proximal-step debugging")
    prox_sub = prox.add_subparsers(dest="prox_command", required=True)
    ev = prox_sub.add_parser("eval", help="evaluate one proximal step and print it as JSON")
    ev.add_argument("--kind", choices=("hellinger", "markov", "markov-surrogate"), required=True)
    ev.add_argument("--lam-hat", type=_float_list, required=True)
    ev.add_argument("--tau", type=float, required=True)
    ev.add_argument("--payoff", type=_float_list, help="payoff vector (hellinger)")
    ev.add_argument("--convention", choices=("geodesic", "literal"), default="geodesic")
    ev.add_argument("--Q", dest="rates", help="rate matrix as JSON (markov kinds)")
    ev.add_argument("--lam-ref", type=_float_list, help="metric anchor (markov-surrogate; default lam-hat)")
    return parser


def _simulate(args):
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_overrides(seed=args.seed)
    traj = run_scenario(scenario, args.k, mode=args.mode)
    if args.out:
        export_trajectory(traj, args.format, args.out)
    summary = {"scenario": scenario.name, "mode": args.mode or scenario.mode, "k": traj.config.k,
               "steps": traj.steps, "horizon": traj.horizon, "N": traj.positions.shape[1]}
    if "T_f" in traj.log:
        summary["T_f"] = traj.log["T_f"]
        summary["margin_violation"] = traj.log["margin_violation"]
    print(json.dumps(summary))
    if traj.terminated_at is not None:
        step, agent = traj.log.get("margin_violation") or (traj.terminated_at, None)
        print(f"margin violated by agent {agent} at step {step}; run stopped at t={traj.horizon:.6g}",
              file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def _study(args):
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_overrides(seed=args.seed)
    pinned = args.threads == "pinned"
    if args.kind == "convergence":
        report = convergence_study(scenario, args.ks, mode=args.mode, oracle=args.oracle or None, pinned=pinned)
    else:
        report = residual_study(scenario, args.ks, mode=args.mode, pinned=pinned)
    if args.out:
        fmt = args.format or ("json" if args.out.endswith(".json") else "csv")
        export_report(report, fmt, args.out)
    name = "w1_gap" if args.kind == "convergence" else "residual_max"
    for row in report.rows:
        print(f"k={row.k:<6d} tau={row.tau:<10.4g} {name}={getattr(row, name)!r}")
    slope = report.slope(name)
    print(f"slope({name}) = {'undefined' if slope is None else format(slope, '.4f')}")
    if report.aborted:
        print(f"aborted at k={report.aborted['k']}: {report.aborted['message']}", file=sys.stderr)
        return EXIT_NONCONVERGENCE if report.aborted["reason"] == "prox" else EXIT_ABORT
    return EXIT_OK


def _prox_eval(args):
    from .markov_geometry import MarkovGeometry
    from .markov_prox import prox_markov_full, prox_markov_surrogate
    from .replicator_prox import _stationarity_ok, prox_hs_batch

    lam_hat = np.array(args.lam_hat)
    if args.kind == "hellinger":
        if args.payoff is None or len(args.payoff) != lam_hat.size:
            raise ContractViolation("--payoff must have one entry per label")
        payoff = np.array(args.payoff)
        lam, obj, stat, its = prox_hs_batch(lam_hat[None], payoff[None], args.tau, args.convention)
        result = {"lambda_new": lam[0].tolist(), "objective_value": float(obj[0]), "iterations": its,
                  "converged": bool(_stationarity_ok(stat[0], payoff, args.tau)), "stationarity": float(stat[0])}
    else:
        if args.rates is None:
            raise ContractViolation("--Q is required for markov proximal steps")
        try:
            Q = np.array(json.loads(args.rates), dtype=float)
        except (json.JSONDecodeError, ValueError) as exc:
            raise ContractViolation(f"--Q is not a JSON matrix: {exc}") from None
        geom = MarkovGeometry(Q)
        if args.kind == "markov":
            res = prox_markov_full(lam_hat, geom, args.tau)
        else:
            ref = lam_hat if args.lam_ref is None else np.array(args.lam_ref)
            res = prox_markov_surrogate(lam_hat, ref, geom, args.tau)
        result = {"lambda_new": res.lambda_new.tolist(), "objective_value": res.objective_value,
                  "iterations": int(res.iterations), "converged": res.converged, "stationarity": res.stationarity}
    print(json.dumps(result))
    return EXIT_OK if result["converged"] else EXIT_NONCONVERGENCE


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_context(getattr(args, "threads", None)):
            if args.command == "simulate":
                return _simulate(args)
            if args.command == "study":
                return _study(args)
            return _prox_eval(args)
    except (ProxNonConvergence, GeodesicFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (SchemeAbort, NearSingularMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ContractViolation, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (LabelflowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
