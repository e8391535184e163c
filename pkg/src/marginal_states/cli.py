"""Command-line entry point.

Exit codes: 0 success, 1 solver failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import report
from .errors import CaseError, MarginalStateError, SolverError
from .marginal import Direction, continuation_to_ms, distributed_ms_identities, slack_relocation_check
from .network import load_case, to_per_unit
from .powerflow import Distributed, Single, assign_slack, newton_solve
from .sensitivity import NORMALIZATIONS, itl, lagrange_from_itl, smallest_singular

def _pairs(text: str, what: str) -> dict[int, float]:
    out = {}
    try:
        for item in text.split(","):
            if not item.strip():
                continue
            bus, val = item.split(":")
            out[int(bus)] = float(val)
    except ValueError:
        raise CaseError(f"bad {what} {text!r}; expected 'bus:value,...'") from None
    if not out:
        raise CaseError(f"empty {what}")
    return out


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--sbase", type=float, default=None, help="override the case power base, MVA")
    p.add_argument("--quiet", action="store_true", help="only report errors")
    p.add_argument("--out", type=Path, default=None, help="write the result here instead of stdout")
    return p


def _case_args(p: argparse.ArgumentParser, direction: bool = False):
    p.add_argument("--case", required=True, type=Path, help="case file (JSON)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--slack", type=int, default=None, help="single slack bus id (default: the VD bus)")
    g.add_argument("--distributed", default=None, help="participation factors 'bus:alpha,...'")
    p.add_argument("--ref-bus", type=int, default=None, help="angle reference for --distributed")
    p.add_argument("--tol", type=float, default=1e-8, help="mismatch tolerance, pu")
    p.add_argument("--max-iter", type=int, default=50)
    if direction:
        p.add_argument("--direction", required=True, help="active power change 'bus:dP_MW,...'")
        p.add_argument("--direction-q", default=None, help="reactive power change 'bus:dQ_MVAr,...'")
        p.add_argument("--tol-sigma", type=float, default=1e-6,
                       help="MS threshold relative to the base-case sigma_min")
        p.add_argument("--step", type=float, default=10.0, help="initial continuation step, MW")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="marginal-states", parents=[common],
                                     description="Load flow, loss sensitivities and marginal states.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="solve the load flow")
    _case_args(p)

    p = sub.add_parser("itl", parents=[common], help="incremental transmission loss coefficients")
    _case_args(p)

    p = sub.add_parser("lambda", parents=[common], help="Lagrange multipliers (base state or MS)")
    _case_args(p)
    p.add_argument("--direction", default=None, help="if given, report multipliers at the MS")
    p.add_argument("--norm", choices=NORMALIZATIONS, default=None)

    p = sub.add_parser("ms-direction", parents=[common], help="marginal state along a direction")
    _case_args(p, direction=True)
    p.add_argument("--norm", choices=NORMALIZATIONS[1:], default="unit-euclidean")

    p = sub.add_parser("nose", parents=[common], help="continuation trace as CSV")
    _case_args(p, direction=True)

    p = sub.add_parser("slack-swap", parents=[common], help="relocate the slack at the MS")
    _case_args(p, direction=True)
    p.add_argument("--new-slack", required=True, help="comma-separated bus ids")

    p = sub.add_parser("ms-identities", parents=[common], help="slack identities at the MS")
    _case_args(p, direction=True)
    p.add_argument("--alpha", default=None, help="factors for the sums (default: the run's own)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--new-slack", type=int, default=None)
    g.add_argument("--new-distributed", default=None)

    p = sub.add_parser("report-table", parents=[common], help="base case and MS per slack as a table")
    p.add_argument("--case", required=True, type=Path)
    p.add_argument("--direction", required=True)
    p.add_argument("--slacks", default=None, help="comma-separated slack bus ids (default: VD bus)")
    p.add_argument("--ms-norm", choices=NORMALIZATIONS[1:], default="unit-euclidean")
    return parser


def _load(args):
    if not args.case.is_file():
        raise CaseError(f"case file not found: {args.case}")
    case = load_case(args.case)
    net = to_per_unit(case, args.sbase)
    if getattr(args, "distributed", None):
        ref = args.ref_bus if args.ref_bus is not None else net.slack_bus
        slack = Distributed(_pairs(args.distributed, "participation factors"), ref)
    else:
        slack = Single(args.slack if args.slack is not None else net.slack_bus)
    opts = {"tol": getattr(args, "tol", 1e-8), "max_iter": getattr(args, "max_iter", 50)}
    return assign_slack(net, slack, **opts), slack, opts


def _direction(args) -> Direction:
    dq = _pairs(args.direction_q, "direction") if getattr(args, "direction_q", None) else {}
    return Direction(_pairs(args.direction, "direction"), dq)


def _ms(args, net, slack, opts):
    return continuation_to_ms(net, slack, _direction(args), step_mw=args.step, sigma_factor=args.tol_sigma, **opts)


def cmd_solve(args):
    net, slack, opts = _load(args)
    return report.dumps(report.state_dict(newton_solve(net, slack, **opts)))


def cmd_itl(args):
    net, slack, opts = _load(args)
    state = newton_solve(net, slack, **opts)
    out = report.itl_dict(itl(state))
    out["sigma_min"] = smallest_singular(state.jacobians().jlf).sigma
    return report.dumps(out)


def cmd_lambda(args):
    net, slack, opts = _load(args)
    if args.direction:
        args.direction_q, args.step, args.tol_sigma = None, 10.0, 1e-6
        ms = _ms(args, net, slack, opts)
        lam = ms.lam.normalized(args.norm or "unit-euclidean")
        out = report.lambda_dict(lam)
        out["sigma_min"] = ms.sigma_min
        out["t"] = ms.t
        return report.dumps(out)
    state = newton_solve(net, slack, **opts)
    lam = lagrange_from_itl(itl(state)).normalized(args.norm or "slack-one")
    out = report.lambda_dict(lam)
    out["sigma_min"] = smallest_singular(state.jacobians().jlf).sigma
    return report.dumps(out)


def cmd_ms_direction(args):
    net, slack, opts = _load(args)
    ms = _ms(args, net, slack, opts)
    out = report.ms_dict(ms)
    if ms.lam is not None:
        out["lambda"] = report.lambda_dict(ms.lam.normalized(args.norm))
    return report.dumps(out)


def cmd_nose(args):
    net, slack, opts = _load(args)
    return report.nose_csv(_ms(args, net, slack, opts))


def cmd_slack_swap(args):
    net, slack, opts = _load(args)
    ms = _ms(args, net, slack, opts)
    results = []
    for bus in [int(b) for b in args.new_slack.split(",") if b.strip()]:
        r = slack_relocation_check(ms, bus)
        entry = {"new_slack": bus, "marginal": r.marginal, "sigma_min": r.sigma_min,
                 "sigma_over_threshold": r.sigma_min / r.threshold}
        if r.lam is not None:
            entry["lambda"] = report.lambda_dict(r.lam)
        if isinstance(slack, Single) and not r.marginal:
            entry["itl_old_slack"] = itl(ms.state, Single(bus)).p_of(slack.bus)
        results.append(entry)
    return report.dumps({"ms": report.ms_dict(ms), "relocations": results})


def cmd_ms_identities(args):
    net, slack, opts = _load(args)
    ms = _ms(args, net, slack, opts)
    if args.alpha:
        alpha = _pairs(args.alpha, "alpha")
    elif isinstance(slack, Distributed):
        alpha = slack.factors
    else:
        alpha = {slack.bus: 1.0}
    new = None
    if args.new_slack is not None:
        new = Single(args.new_slack)
    elif args.new_distributed:
        ref = args.ref_bus if args.ref_bus is not None else net.slack_bus
        new = Distributed(_pairs(args.new_distributed, "participation factors"), ref)
    ident = distributed_ms_identities(ms, alpha, new)
    return report.dumps({
        "alpha": {str(k): v for k, v in alpha.items()},
        "new_slack": None if new is None else report.slack_dict(new),
        "sum_alpha_lambda": ident.sum_alpha_lambda,
        "itl_weighted_sum": ident.itl_weighted_sum,
        "sigma_min": ms.sigma_min,
    })


def cmd_report_table(args):
    case = load_case(args.case) if args.case.is_file() else None
    if case is None:
        raise CaseError(f"case file not found: {args.case}")
    net = to_per_unit(case, args.sbase)
    vd = net.slack_bus
    slacks = [int(b) for b in args.slacks.split(",")] if args.slacks else [vd]
    direction = Direction(_pairs(args.direction, "direction"))
    base = newton_solve(net)
    lam0 = lagrange_from_itl(itl(base))
    scenarios = [("Base Case", base.p * net.s_base, lam0.p)]
    for b in slacks:
        slack = Single(b)
        ms = continuation_to_ms(assign_slack(net, slack), slack, direction)
        lam = ms.lam.normalized(args.ms_norm).p if ms.lam is not None else None
        scenarios.append((f"MS With Slack Bus {b}", ms.state.p * net.s_base, lam))
    return report.render_table(f"{args.case.stem}", net.ids, scenarios)


COMMANDS = {
    "solve": cmd_solve,
    "itl": cmd_itl,
    "lambda": cmd_lambda,
    "ms-direction": cmd_ms_direction,
    "nose": cmd_nose,
    "slack-swap": cmd_slack_swap,
    "ms-identities": cmd_ms_identities,
    "report-table": cmd_report_table,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        text = COMMANDS[args.command](args)
    except CaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, ZeroDivisionError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1
    except MarginalStateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
