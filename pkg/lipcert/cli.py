# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""Command line front end.

Exit codes: 0 on success, 1 on usage, model or file errors (a method failing in ``compare``
included), 2 when a certificate could not be established (non-optimal solve, violated
quadratic constraint).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import typing as t
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from lipcert._version import VERSION
from lipcert.activations import ActivationKind, ActivationSpec
from lipcert.assembly import MultiplierClass
from lipcert.baselines import (
    BoundMethod,
    BoundReport,
    Norm,
    fgl_bound,
    mp_bound,
    norm_eq_bound,
    rr_bound,
    sample_lower_bound,
)
from lipcert.certify import Certificate, certify, certify_deq
from lipcert.constants import (
    DEFAULT_LOGGER,
    QC_TOL,
    SAMPLE_COUNT,
    SOLVER_MAX_ITERS,
    SOLVER_TOL,
    THREADS,
)
from lipcert.exceptions import LipcertError, Unsupported
from lipcert.model import Architecture, Model, load_model
from lipcert.qc import verify_qc_sample
from lipcert.report import RunReport
from lipcert.solver import SdpaConvention, SolverBackend, SolverConfig

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CERTIFIED = 2

BOUND_METHODS = ("mp", "sample", "fgl", "norm-eq", "rr")
COMPARE_METHODS = (*BOUND_METHODS, "nsr-l2", "nsr-linf")

_NOT_OPTIONS = frozenset({"command", "handler", "model", "out", "verbose"})


# Arguments


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    parser.add_argument(
        "--out", type=Path, help="Write the report to this file (.json or .csv) instead of stdout"
    )


def _model_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", type=Path, required=True, help="JSON model file")


def _solver_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--solver",
        choices=[b.value for b in SolverBackend],
        default=SolverBackend.INTERNAL.value,
        help="Solve internally or export the problems in SDPA format",
    )
    parser.add_argument("--sdpa-out", type=Path, help="Target file of the sdpa-export solver")
    parser.add_argument(
        "--sdpa-convention",
        choices=[c.value for c in SdpaConvention],
        default=SdpaConvention.NEGATED.value,
        help="Sign convention of exported files; sdpa is the form external solvers read",
    )
    parser.add_argument("--tol", type=float, default=SOLVER_TOL, help="Solver tolerance")
    parser.add_argument("--max-iters", type=int, default=SOLVER_MAX_ITERS)


def _certificate_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--label", type=int, help="Output row to certify")
    parser.add_argument(
        "--mclass",
        choices=[m.value for m in MultiplierClass],
        default=MultiplierClass.NEURON2.value,
        help="Multiplier class of feedforward certificates",
    )
    parser.add_argument(
        "--dense", action="store_true", help="Single dense LMI with free S and P multipliers"
    )
    parser.add_argument(
        "--free-s", action="store_true", help="Leave S free in residual certificates"
    )
    parser.add_argument("--zero-p", action="store_true", help="Fix P = 0 in residual certificates")


def _baseline_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--samples", type=int, default=SAMPLE_COUNT, help="Sampled inputs")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-patterns", type=int, help="FGL enumeration guard")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lipcert", description="Certify Lipschitz bounds of GroupSort and Householder nets."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("certify", help="Certify a bound with a semidefinite program")
    _model_arg(p)
    p.add_argument("--norm", choices=[n.value for n in Norm], default=Norm.L2.value)
    _certificate_args(p)
    p.add_argument("--split", type=int, help="Cut a feedforward network every k layers")
    _solver_args(p)
    _common(p)
    p.set_defaults(handler=_certify)

    p = commands.add_parser("bound", help="Compute a baseline bound")
    _model_arg(p)
    p.add_argument("--method", choices=BOUND_METHODS, required=True)
    p.add_argument("--norm", choices=[n.value for n in Norm], default=Norm.L2.value)
    _certificate_args(p)
    _baseline_args(p)
    p.add_argument("--tol", type=float, default=SOLVER_TOL, help="Solver tolerance")
    p.add_argument("--max-iters", type=int, default=SOLVER_MAX_ITERS)
    _common(p)
    p.set_defaults(handler=_bound)

    p = commands.add_parser("compare", help="Run several methods on one model")
    _model_arg(p)
    p.add_argument(
        "--methods",
        default="mp,sample,nsr-l2",
        help=f"Comma separated list among {', '.join(COMPARE_METHODS)}",
    )
    p.add_argument("--norm", choices=[n.value for n in Norm], default=Norm.L2.value)
    _certificate_args(p)
    _baseline_args(p)
    p.add_argument("--tol", type=float, default=SOLVER_TOL, help="Solver tolerance")
    p.add_argument("--max-iters", type=int, default=SOLVER_MAX_ITERS)
    _common(p)
    p.set_defaults(handler=_compare)

    p = commands.add_parser("qc-check", help="Sample the quadratic constraint of an activation")
    p.add_argument(
        "--activation", choices=[k.value for k in ActivationKind], default="maxmin"
    )
    p.add_argument("--group-size", type=int, help="Group size; default 2 (1 for relu)")
    p.add_argument("--groups", type=int, default=1, help="Number of groups per sample")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=QC_TOL, help="Accepted negative QC value")
    _common(p)
    p.set_defaults(handler=_qc_check)

    p = commands.add_parser("deq", help="Certify a deep equilibrium model")
    _model_arg(p)
    p.add_argument("--check", choices=("wellposed", "lipschitz"), default="lipschitz")
    _solver_args(p)
    _common(p)
    p.set_defaults(handler=_deq)

    p = commands.add_parser("node", help="Certify a neural ODE flow map")
    _model_arg(p)
    _solver_args(p)
    _common(p)
    p.set_defaults(handler=_node)
    return parser


# Commands


def _config(args: argparse.Namespace) -> SolverConfig:
    if getattr(args, "solver", None) == SolverBackend.SDPA_EXPORT.value and args.sdpa_out is None:
        raise ValueError("--solver sdpa-export needs --sdpa-out")
    return SolverConfig(
        tol_gap=args.tol,
        tol_feas=args.tol,
        max_iters=args.max_iters,
        backend=getattr(args, "solver", SolverBackend.INTERNAL.value),
        sdpa_convention=getattr(args, "sdpa_convention", SdpaConvention.NEGATED.value),
    )


def _certificate_exit(certificate: Certificate) -> int:
    if certificate.exported or certificate.certified:
        return EXIT_OK
    return EXIT_NOT_CERTIFIED


def _certify_model(args: argparse.Namespace, model: Model, norm: Norm) -> Certificate:
    return certify(
        model,
        norm=norm,
        label=args.label,
        mclass=MultiplierClass(args.mclass),
        dense=args.dense,
        split=getattr(args, "split", None),
        zero_s=not args.free_s,
        zero_p=args.zero_p,
        config=_config(args),
        sdpa_path=getattr(args, "sdpa_out", None),
        log=DEFAULT_LOGGER,
    )


def _certify(args: argparse.Namespace, model: Model) -> tuple[int, list[dict[str, t.Any]]]:
    certificate = _certify_model(args, model, Norm(args.norm))
    return _certificate_exit(certificate), [certificate.to_dict()]


def _run_method(method: str, args: argparse.Namespace, model: Model) -> BoundReport:
    norm = Norm(args.norm)
    method = BoundMethod(method)
    if method is BoundMethod.MP:
        return mp_bound(model if args.label is None else model.select_output(args.label))
    if method is BoundMethod.SAMPLE:
        return sample_lower_bound(
            model, norm, n_samples=args.samples, seed=args.seed, label=args.label
        )
    if method is BoundMethod.FGL:
        extra = {} if args.max_patterns is None else {"max_patterns": args.max_patterns}
        return fgl_bound(model, norm, label=args.label, **extra)
    if method is BoundMethod.RR:
        selected = model if args.label is None else model.select_output(args.label)
        return rr_bound(selected, _config(args))
    if method is BoundMethod.NSR_LINF:
        return _certify_model(args, model, Norm.LINF_L1).to_bound_report()
    certificate = _certify_model(args, model, Norm.L2)
    if method is BoundMethod.NSR_L2:
        return certificate.to_bound_report()
    if not certificate.certified:
        return BoundReport(BoundMethod.NORM_EQ, math.nan, Norm.LINF_L1)
    return norm_eq_bound(certificate.lipschitz_bound, model.input_width)


def _bound(args: argparse.Namespace, model: Model) -> tuple[int, list[dict[str, t.Any]]]:
    report = _run_method(args.method, args, model)
    status = EXIT_NOT_CERTIFIED if math.isnan(report.value) else EXIT_OK
    return status, [report.to_dict()]


def _compare(args: argparse.Namespace, model: Model) -> tuple[int, list[dict[str, t.Any]]]:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = sorted(set(methods) - set(COMPARE_METHODS))
    if unknown or not methods:
        raise ValueError(f"Unknown methods {unknown}; choose among {', '.join(COMPARE_METHODS)}")

    def run_one(method: str) -> dict[str, t.Any]:
        try:
            return _run_method(method, args, model).to_dict()
        except (LipcertError, ValueError) as e:
            DEFAULT_LOGGER.warning("Method %s failed on %s: %s", method, model.name, e)
            norm = Norm.LINF_L1.value if method in ("nsr-linf", "norm-eq") else args.norm
            return {"method": method, "value": None, "norm": norm, "error": str(e)}

    with ThreadPoolExecutor(max_workers=min(THREADS, len(methods))) as pool:
        results = list(pool.map(run_one, methods))
    if any("error" in r for r in results):
        return EXIT_ERROR, results
    failed = any(math.isnan(r["value"]) for r in results)
    return (EXIT_NOT_CERTIFIED if failed else EXIT_OK), results


def _qc_activation(args: argparse.Namespace) -> ActivationSpec:
    kind = ActivationKind(args.activation)
    default = 1 if kind is ActivationKind.RELU else 2
    group_size = args.group_size or default
    v = None
    if kind is ActivationKind.HOUSEHOLDER:
        v = np.random.default_rng(args.seed).standard_normal(group_size)
        v /= np.linalg.norm(v)
    return ActivationSpec(kind=kind, group_size=group_size, householder_v=v)


def _qc_check(args: argparse.Namespace, model: None) -> tuple[int, list[dict[str, t.Any]]]:
    activation = _qc_activation(args)
    sample = verify_qc_sample(activation, None, args.trials, args.seed, groups=args.groups)
    passed = sample.min_value >= -args.tol
    result = {
        "activation": activation.kind.value,
        "group_size": activation.group_size,
        "groups": args.groups,
        "trials": sample.trials,
        "min_value": sample.min_value,
        "passed": passed,
        "witness": [sample.witness[0], sample.witness[1]],
    }
    return (EXIT_OK if passed else EXIT_NOT_CERTIFIED), [result]


def _deq(args: argparse.Namespace, model: Model) -> tuple[int, list[dict[str, t.Any]]]:
    if model.arch is not Architecture.DEQ:
        raise Unsupported(f"Expected a deq model, got {model.arch.value}")
    certificate = certify_deq(
        model,
        _config(args),
        check_only=args.check == "wellposed",
        sdpa_path=args.sdpa_out,
        log=DEFAULT_LOGGER,
    )
    result = {**certificate.to_dict(), "check": args.check}
    return _certificate_exit(certificate), [result]


def _node(args: argparse.Namespace, model: Model) -> tuple[int, list[dict[str, t.Any]]]:
    if model.arch is not Architecture.NODE:
        raise Unsupported(f"Expected a node model, got {model.arch.value}")
    certificate = certify(
        model, config=_config(args), sdpa_path=args.sdpa_out, log=DEFAULT_LOGGER
    )
    return _certificate_exit(certificate), [certificate.to_dict()]


# Entry points


def _parse(argv: list[str] | None) -> argparse.Namespace | int:
    try:
        return _build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if not e.code else EXIT_ERROR


def _execute(
    args: argparse.Namespace, timestamp: str | None = None
) -> tuple[int, RunReport | None]:
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    options = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_OPTIONS}
    model_path = getattr(args, "model", None)
    try:
        model = load_model(model_path) if model_path is not None else None
        code, results = args.handler(args, model)
    except (LipcertError, ValueError, OSError) as e:
        sys.stderr.write(f"lipcert {args.command}: {e}\n")
        return EXIT_ERROR, None
    report = RunReport(
        model_path=None if model_path is None else str(model_path),
        command=args.command,
        options=options,
        results=results,
    )
    if timestamp is not None:
        report.timestamp = timestamp
    return code, report


def run(
    argv: list[str] | None = None, timestamp: str | None = None
) -> tuple[int, RunReport | None]:
    """Parse ``argv`` and run the command.

    Args:
        argv: [optional] Command line arguments; default ``sys.argv``
        timestamp: [optional] Report timestamp; default the current UTC time

    Returns:
        The exit code and the report; no report on usage, model or file errors
    """
    args = _parse(argv)
    if isinstance(args, int):
        return args, None
    return _execute(args, timestamp)


def main(argv: list[str] | None = None) -> int:
    args = _parse(argv)
    if isinstance(args, int):
        return args
    code, report = _execute(args)
    if report is None:
        return code
    if args.out is None:
        sys.stdout.write(report.to_json())
        return code
    try:
        report.write(args.out)
    except OSError as e:
        sys.stderr.write(f"lipcert: cannot write {args.out}: {e}\n")
        return EXIT_ERROR
    return code


if __name__ == "__main__":
    raise SystemExit(main())
