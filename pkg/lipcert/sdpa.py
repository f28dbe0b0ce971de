# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""SDPA sparse format (``.dat-s``) interchange.

Our blocks ``F0 + Σ_k z_k F_k ⪯ 0`` are written negated by default, as
``G0 - Σ_k z_k G_k ⪰ 0`` with ``G0 = -F0`` and ``G_k = F_k``. External SDPA solvers expect
``Σ_k x_k F'_k - F'_0 ⪰ 0``; :attr:`SdpaConvention.SDPA` writes ``F'_0 = F0`` and
``F'_k = -F_k`` for them. The slack matrix is ``-(F0 + Σ_k z_k F_k)`` in both conventions,
so the dual matrix ``Y`` of a solution file is our ``Z`` unchanged.
"""

from __future__ import annotations

import logging
import math
import re
import typing as t
from pathlib import Path

import numpy as np

from lipcert._version import VERSION
from lipcert.assembly import AffineLmiBlock, BoundSemantics, SdpProblem
from lipcert.constants import DEFAULT_LOGGER
from lipcert.exceptions import DimensionError, ParseError
from lipcert.solver import (
    KktResiduals,
    SdpaConvention,
    SolverConfig,
    SolveResult,
    SolveStatus,
    build_result,
    dual_objective,
    kkt_residuals,
    psd_check,
)

_PHASES = {
    SolveStatus.OPTIMAL: "pdOPT",
    SolveStatus.INFEASIBLE: "pINF_dFEAS",
    SolveStatus.UNBOUNDED: "pUNBD_dINF",
    SolveStatus.MAX_ITERATIONS: "noINFO",
    SolveStatus.NUMERICAL_ERROR: "noINFO",
}

_MAPPINGS = {
    SdpaConvention.NEGATED: "F0 + sum_k z_k F_k <= 0 is written as -F0 - sum_k z_k F_k >= 0",
    SdpaConvention.SDPA: "F0 + sum_k z_k F_k <= 0 is written as sum_k z_k (-F_k) - F0 >= 0",
}

# File matrix = sign * our matrix, for the constant and for the variable terms
_SIGNS = {SdpaConvention.NEGATED: (-1.0, 1.0), SdpaConvention.SDPA: (1.0, -1.0)}

_SEPARATORS = re.compile(r"[,{}()]")
_TOKENS = re.compile(r"[{}]|[^\s{},]+")


def _number(value: float) -> str:
    return format(float(value), ".17g")


def export_sdpa(
    problem: SdpProblem,
    path: str | Path,
    convention: SdpaConvention = SdpaConvention.NEGATED,
    log: logging.Logger | None = None,
) -> None:
    """Write ``problem`` in SDPA sparse format.

    The header comments record the sign convention, the bound semantics and the variable
    names so that :func:`read_sdpa` restores the problem.

    Args:
        problem: Problem to write
        path: Target file
        convention: [optional] Sign convention; default negated
        log: [optional] Custom logger; default local logger

    Raises:
        ValueError: Problem without blocks
        OSError: ``path`` is not writable
    """
    if not problem.blocks:
        raise ValueError(f"Problem {problem.name} has no blocks to export")
    convention = SdpaConvention(convention)
    rho = "-" if problem.rho_index is None else str(problem.rho_index)
    lines = [
        f'"lipcert export of {problem.name}',
        f'"{_MAPPINGS[convention]}',
        f'"convention {convention.value}',
        f'"semantics {problem.bound_semantics.value} rho {rho} horizon {_number(problem.horizon)}',
        f'"variables {" ".join(problem.var_names)}',
        str(problem.num_vars),
        str(len(problem.blocks)),
        " ".join(str(-b.size if b.diagonal else b.size) for b in problem.blocks),
        " ".join(_number(v) for v in problem.objective) if problem.num_vars else "",
    ]
    constant, variable = _SIGNS[convention]
    # Within a block, the constant then the variables in increasing order
    for number, block in enumerate(problem.blocks, start=1):
        ordered = sorted(block.terms, key=lambda term: term[0])
        matrices = [(0, constant * block.F0)] + [(k + 1, variable * m) for k, m in ordered]
        for k, matrix in matrices:
            rows, cols = np.nonzero(np.triu(matrix))
            for i, j in zip(rows, cols):
                if block.diagonal and i != j:
                    continue
                lines.append(f"{k} {number} {i + 1} {j + 1} {_number(matrix[i, j] + 0.0)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    (log or DEFAULT_LOGGER).info(
        "Exported %s to %s (%s convention): %d variables, %d blocks.",
        problem.name,
        path,
        convention.value,
        problem.num_vars,
        len(problem.blocks),
    )


def _header(comments: list[str]) -> dict[str, list[str]]:
    fields: dict[str, list[str]] = {}
    for comment in comments:
        parts = comment.lstrip('"*').split()
        if parts and parts[0] in ("convention", "semantics", "variables"):
            fields[parts[0]] = parts[1:]
    return fields


def read_sdpa(
    path: str | Path,
    convention: SdpaConvention | None = None,
    log: logging.Logger | None = None,
) -> SdpProblem:
    """Read an SDPA sparse file back into a problem.

    Files without a lipcert header are read as feasibility problems with variables named
    ``z[k]``.

    Args:
        path: Source file
        convention: [optional] Sign convention; default the one recorded in the header, or
            ``sdpa`` for files written elsewhere
        log: [optional] Custom logger; default local logger

    Raises:
        ParseError: Malformed or truncated file
        OSError: ``path`` is not readable
    """
    comments: list[str] = []
    tokens: list[str] = []
    entries: list[list[str]] = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        if line[0] in '"*':
            comments.append(line)
            continue
        # "2 =mdim" style annotations end at "="
        fields = _SEPARATORS.sub(" ", line.split("=", 1)[0]).split()
        if entries or _header_complete(tokens):
            entries.append(fields)
        else:
            tokens.extend(fields)
    try:
        num_vars, num_blocks = int(tokens[0]), int(tokens[1])
        sizes = [int(v) for v in tokens[2 : 2 + num_blocks]]
        objective = np.array([float(v) for v in tokens[2 + num_blocks :]], dtype=np.float64)
    except (IndexError, ValueError) as e:
        raise ParseError(f"Malformed SDPA header in {path}: {e}") from e
    if len(sizes) != num_blocks or objective.shape != (num_vars,) or 0 in sizes:
        raise ParseError(f"Truncated SDPA header in {path}")

    header = _header(comments)
    if convention is None:
        try:
            recorded = header.get("convention", [SdpaConvention.SDPA.value])
            convention = SdpaConvention(recorded[0])
        except (IndexError, ValueError) as e:
            raise ParseError(f"Unknown SDPA sign convention in {path}") from e
    constant, variable = _SIGNS[SdpaConvention(convention)]

    constants = [np.zeros((abs(n), abs(n))) for n in sizes]
    terms: list[dict[int, np.ndarray]] = [{} for _ in sizes]
    for fields in entries:
        try:
            k, b, i, j = (int(v) for v in fields[:4])
            value = float(fields[4])
        except (IndexError, ValueError) as e:
            raise ParseError(f"Malformed SDPA entry {' '.join(fields)!r} in {path}") from e
        if len(fields) != 5 or not (0 <= k <= num_vars and 1 <= b <= num_blocks):
            raise ParseError(f"SDPA entry {' '.join(fields)!r} out of range in {path}")
        n = abs(sizes[b - 1])
        if not (1 <= i <= n and 1 <= j <= n):
            raise ParseError(f"SDPA entry {' '.join(fields)!r} out of range in {path}")
        if k == 0:
            target = constants[b - 1]
            value *= constant
        else:
            target = terms[b - 1].setdefault(k - 1, np.zeros((n, n)))
            value *= variable
        target[i - 1, j - 1] = target[j - 1, i - 1] = value + 0.0

    names = header.get("variables") or [f"z[{k}]" for k in range(num_vars)]
    semantics = BoundSemantics.FEASIBILITY
    rho_index: int | None = None
    horizon = 1.0
    if "semantics" in header:
        try:
            fields = header["semantics"]
            semantics = BoundSemantics(fields[0])
            rho_index = None if fields[2] == "-" else int(fields[2])
            horizon = float(fields[4])
        except (IndexError, ValueError) as e:
            raise ParseError(f"Malformed lipcert header in {path}") from e
    name = comments[0].lstrip('"*').split(" export of ", 1)[-1] if comments else Path(path).stem
    try:
        problem = SdpProblem(
            num_vars=num_vars,
            objective=objective,
            blocks=tuple(
                AffineLmiBlock(
                    size=abs(n),
                    F0=constants[b],
                    terms=tuple(sorted(terms[b].items(), key=lambda item: item[0])),
                    diagonal=n < 0,
                    label=f"block {b + 1}",
                )
                for b, n in enumerate(sizes)
            ),
            var_names=tuple(names),
            bound_semantics=semantics,
            rho_index=rho_index,
            horizon=horizon,
            name=name,
        )
    except DimensionError as e:
        raise ParseError(f"Inconsistent SDPA file {path}: {e}") from e
    (log or DEFAULT_LOGGER).debug("Read SDPA problem %s from %s.", problem.name, path)
    return problem


def _header_complete(tokens: list[str]) -> bool:
    if len(tokens) < 2:
        return False
    try:
        num_vars, num_blocks = int(tokens[0]), int(tokens[1])
    except ValueError:
        return False
    return len(tokens) >= 2 + num_blocks + num_vars


# Solutions


def _format_vector(values: t.Iterable[float]) -> str:
    return "{" + ",".join(_number(v) for v in values) + "}"


def _format_blocks(problem: SdpProblem, matrices: t.Sequence[np.ndarray]) -> list[str]:
    lines = ["{"]
    for block, matrix in zip(problem.blocks, matrices):
        if block.diagonal:
            lines.append(_format_vector(np.diag(matrix)))
        else:
            lines.append("{ " + ", ".join(_format_vector(row) for row in matrix) + " }")
    lines.append("}")
    return lines


def export_sdpa_solution(
    problem: SdpProblem, result: SolveResult, path: str | Path, log: logging.Logger | None = None
) -> None:
    """Write ``result`` in the SDPA output layout.

    ``xMat`` holds the slack ``-(F0 + Σ z_k F_k)`` and ``yMat`` the dual matrices.

    Raises:
        OSError: ``path`` is not writable
    """
    lines = [
        f"lipcert {VERSION} solution of {problem.name}",
        f"phase.value = {_PHASES[result.status]}",
        f"objValPrimal = {_number(result.primal_obj)}",
        f"objValDual   = {_number(result.dual_obj)}",
        "xVec = ",
        _format_vector(result.z),
    ]
    if np.all(np.isfinite(result.z)):
        lines += ["xMat = ", *_format_blocks(problem, [-m for m in problem.evaluate(result.z)])]
    if result.dual:
        lines += ["yMat = ", *_format_blocks(problem, result.dual)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    (log or DEFAULT_LOGGER).info("Exported %s solution to %s.", result.status.value, path)


def _parse_nested(text: str, start: int, label: str, path: str | Path) -> t.Any:
    """Nested lists of floats from the brace group following ``start``."""
    tokens = _TOKENS.findall(text[start:])
    stack: list[list[t.Any]] = []
    for token in tokens:
        if token == "{":
            stack.append([])
        elif token == "}":
            if not stack:
                raise ParseError(f"Unbalanced braces in {label} of {path}")
            done = stack.pop()
            if not stack:
                return done
            stack[-1].append(done)
        elif not stack:
            raise ParseError(f"Expected '{{' after {label} in {path}, got {token!r}")
        else:
            try:
                stack[-1].append(float(token))
            except ValueError as e:
                raise ParseError(f"Invalid number {token!r} in {label} of {path}") from e
    raise ParseError(f"Truncated {label} in {path}")


def _dual_blocks(problem: SdpProblem, values: t.Any, path: str | Path) -> list[np.ndarray]:
    if not isinstance(values, list) or len(values) != len(problem.blocks):
        raise ParseError(f"yMat of {path} does not match the {len(problem.blocks)} problem blocks")
    out = []
    for block, value in zip(problem.blocks, values):
        try:
            array = np.array(value, dtype=np.float64)
        except ValueError as e:
            raise ParseError(f"Ragged yMat block in {path}") from e
        if block.diagonal and array.ndim == 1:
            array = np.diag(array)
        if array.shape != (block.size, block.size):
            raise ParseError(
                f"yMat block {block.label!r} of {path} has shape {array.shape}, "
                f"expected {block.size}x{block.size}"
            )
        out.append(0.5 * (array + array.T))
    return out


def _verify_ray(problem: SdpProblem, dual: list[np.ndarray], config: SolverConfig) -> KktResiduals:
    scale = dual_objective(problem, dual)
    if not scale > 0:
        return KktResiduals(math.nan, math.inf, math.nan)
    stationarity = np.zeros(problem.num_vars)
    for block, Z in zip(problem.blocks, dual):
        for index, matrix in block.terms:
            stationarity[index] += np.vdot(matrix, Z)
    residual = float(np.linalg.norm(stationarity)) / scale
    if not all(psd_check(Z / scale, config.tol_feas) for Z in dual):
        residual = math.inf
    return KktResiduals(primal_feas=math.nan, dual_feas=residual, gap=math.nan)


def import_sdpa_solution(
    path: str | Path,
    problem: SdpProblem,
    config: SolverConfig | None = None,
    log: logging.Logger | None = None,
) -> SolveResult:
    """Read an external solver's solution and verify it locally.

    Residuals are always recomputed from ``problem``; a solution that misses the tolerances,
    or comes without ``yMat``, is reported with the ``numerical_error`` status.

    Raises:
        ParseError: Malformed or truncated file
        OSError: ``path`` is not readable
    """
    config = config or SolverConfig()
    logger = log or DEFAULT_LOGGER
    text = Path(path).read_text(encoding="utf-8")
    phase = re.search(r"phase\.value\s*=\s*(\S+)", text)
    x_at = re.search(r"xVec\s*=", text)
    if x_at is None:
        raise ParseError(f"No xVec in {path}")
    z = np.array(_parse_nested(text, x_at.end(), "xVec", path), dtype=np.float64)
    if z.shape != (problem.num_vars,):
        raise ParseError(f"xVec of {path} has {z.size} entries, expected {problem.num_vars}")
    y_at = re.search(r"yMat\s*=", text)
    dual = None
    if y_at is not None:
        dual = _dual_blocks(problem, _parse_nested(text, y_at.end(), "yMat", path), path)

    if phase is not None and phase.group(1).startswith("pINF") and dual is not None:
        certificate = _verify_ray(problem, dual, config)
        if certificate.dual_feas <= config.tol_feas:
            scale = dual_objective(problem, dual)
            return build_result(
                problem, SolveStatus.INFEASIBLE, z, [Z / scale for Z in dual], certificate
            )
        logger.warning("Infeasibility ray in %s fails local verification.", path)
        return build_result(problem, SolveStatus.NUMERICAL_ERROR, z, dual, certificate)

    if not np.all(np.isfinite(z)):
        raise ParseError(f"xVec of {path} has non-finite entries")
    residuals = kkt_residuals(problem, z, dual)
    dual_cone = dual is not None and all(psd_check(Z, config.tol_feas) for Z in dual)
    status = SolveStatus.OPTIMAL
    if not (dual_cone and residuals.accepts(config, float(problem.objective @ z))):
        status = SolveStatus.NUMERICAL_ERROR
        logger.warning(
            "Solution in %s downgraded: primal %.2e, dual %.2e, gap %.2e.",
            path,
            residuals.primal_feas,
            residuals.dual_feas,
            residuals.gap,
        )
    return build_result(problem, status, z, dual, residuals)
