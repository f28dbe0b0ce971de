# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""Primal-dual interior-point solver for block-diagonal SDPs.

Problems are ``min c⊤z`` subject to ``F0 + Σ_k z_k F_k ⪯ 0`` blockwise. Writing
``S = -F0 - Σ_k z_k F_k ⪰ 0`` the solver runs a Mehrotra predictor-corrector on the
homogeneous self-dual embedding

    0 = 𝒢*(Z) + c τ,   S = -𝒢 z - F0 τ,   κ = -c⊤z + ⟨F0, Z⟩,

with Nesterov-Todd scaling on dense blocks and elementwise scaling on diagonal blocks. The
embedding is always strictly feasible from ``S = Z = I, τ = κ = 1`` and yields either an
optimal pair (``τ > 0``) or an infeasibility certificate (``κ > 0``).
"""

from __future__ import annotations

import enum
import logging
import math
import time
import typing as t
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from lipcert.constants import DEFAULT_LOGGER, SOLVER_MAX_ITERS, SOLVER_TOL, STEP_FRACTION
from lipcert.exceptions import DimensionError, Unsupported

if t.TYPE_CHECKING:
    from lipcert.assembly import AffineLmiBlock, SdpProblem

SYMMETRY_TOL = 1e-12
"""Largest asymmetry accepted by :func:`psd_check`."""

DEPENDENCE_TOL = 1e-10
"""Relative Schur complement below which a variable is a combination of the others."""

MIN_STEP = 1e-12
"""Step length below which the iteration is considered stalled."""

CHOLESKY_SHIFTS = (0.0, 1e-14, 1e-12, 1e-10, 1e-8)
"""Diagonal shifts tried on the equilibrated Schur complement, in order."""

REFINEMENT_STEPS = 2
"""Iterative refinement steps on each Newton solve."""


class SolveStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITERATIONS = "max_iterations"
    NUMERICAL_ERROR = "numerical_error"


class SolverBackend(str, enum.Enum):
    INTERNAL = "internal"
    SDPA_EXPORT = "sdpa-export"


class SdpaConvention(str, enum.Enum):
    """Sign convention of SDPA files.

    ``negated`` writes ``G0 - Σ_k z_k G_k ⪰ 0`` with ``G0 = -F0`` and ``G_k = F_k``; ``sdpa``
    writes the solver form ``Σ_k z_k F'_k - F'_0 ⪰ 0`` with ``F'_0 = F0`` and ``F'_k = -F_k``.
    """

    NEGATED = "negated"
    SDPA = "sdpa"


@dataclass(frozen=True)
class SolverConfig:
    """Solver tolerances and backend.

    Args:
        tol_gap: [optional] Relative duality gap tolerance; default to environment variable
            LIPCERT_TOL
        tol_feas: [optional] Feasibility tolerance; default to environment variable LIPCERT_TOL
        max_iters: [optional] Iteration cap; default to environment variable LIPCERT_MAX_ITERS
        backend: [optional] ``internal`` solves, ``sdpa-export`` hands the problem to an
            external solver through an SDPA file; default internal
        sdpa_convention: [optional] Sign convention of exported files; default negated
    """

    tol_gap: float = SOLVER_TOL
    tol_feas: float = SOLVER_TOL
    max_iters: int = SOLVER_MAX_ITERS
    backend: SolverBackend = SolverBackend.INTERNAL
    sdpa_convention: SdpaConvention = SdpaConvention.NEGATED

    def __post_init__(self) -> None:
        object.__setattr__(self, "backend", SolverBackend(self.backend))
        object.__setattr__(self, "sdpa_convention", SdpaConvention(self.sdpa_convention))
        if not (self.tol_gap > 0 and self.tol_feas > 0):
            raise ValueError(
                f"Solver tolerances must be positive, got gap {self.tol_gap} "
                f"and feasibility {self.tol_feas}"
            )
        if self.max_iters < 1:
            raise ValueError(f"Iteration cap must be positive, got {self.max_iters}")


@dataclass(frozen=True)
class KktResiduals:
    """Optimality residuals, recomputed from the problem data.

    Feasibility residuals are relative to the size of the data they involve:

    - ``primal_feas`` is the positive part of the largest eigenvalue over all blocks, divided
      by ``1 + max(‖F0‖, max_k |z_k|‖F_k‖)``;
    - ``dual_feas`` is ``‖𝒢*(Z) + c‖`` divided by ``1 + max(‖c‖, max_k ‖F_k‖‖Z‖)``;
    - ``gap`` is ``|⟨S, Z⟩|``.

    Norms are Frobenius norms over all blocks. Unknown values are NaN.
    """

    primal_feas: float
    dual_feas: float
    gap: float

    def accepts(self, config: SolverConfig, primal_obj: float) -> bool:
        # NaN compares False, so unknown residuals never pass
        return (
            self.primal_feas <= config.tol_feas
            and self.dual_feas <= config.tol_feas
            and self.gap <= config.tol_gap * (1.0 + abs(primal_obj))
        )

    def to_dict(self) -> dict[str, float]:
        return {"primal_feas": self.primal_feas, "dual_feas": self.dual_feas, "gap": self.gap}


@dataclass(frozen=True, eq=False)
class SolveResult:
    """Outcome of a solve.

    ``rho`` and ``lipschitz_bound`` are NaN unless the status is optimal. ``dual`` holds one
    dual matrix per block; for an infeasible problem it is the improving ray normalized to
    ``⟨F0, Z⟩ = 1``.
    """

    status: SolveStatus
    z: np.ndarray
    rho: float
    lipschitz_bound: float
    primal_obj: float
    dual_obj: float
    kkt_residuals: KktResiduals
    iterations: int = 0
    dual: tuple[np.ndarray, ...] = field(default=(), repr=False)
    runtime_seconds: float = 0.0

    @property
    def is_optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL

    def to_dict(self) -> dict[str, t.Any]:
        return {
            "status": self.status.value,
            "rho": self.rho,
            "lipschitz_bound": self.lipschitz_bound,
            "primal_obj": self.primal_obj,
            "dual_obj": self.dual_obj,
            "kkt_residuals": self.kkt_residuals.to_dict(),
            "iterations": self.iterations,
            "runtime_seconds": self.runtime_seconds,
        }


def psd_check(M: np.ndarray, tol: float) -> bool:
    """Whether ``λ_min(M) ≥ -tol``.

    Raises:
        DimensionError: ``M`` is not square
        ValueError: ``M`` is asymmetric beyond 1e-12 or ``tol`` is negative
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"Expected a square matrix, got shape {M.shape}")
    if tol < 0:
        raise ValueError(f"Tolerance must be nonnegative, got {tol}")
    if np.max(np.abs(M - M.T), initial=0.0) > SYMMETRY_TOL:
        raise ValueError("Matrix is not symmetric")
    if M.size == 0:
        return True
    smallest = scipy.linalg.eigvalsh(M, subset_by_index=[0, 0])[0]
    return bool(smallest >= -tol)


def _largest_eigenvalue(block: AffineLmiBlock, M: np.ndarray) -> float:
    if block.diagonal:
        return float(np.max(np.diag(M)))
    n = M.shape[0]
    return float(scipy.linalg.eigvalsh(M, subset_by_index=[n - 1, n - 1])[0])


def coefficient_norms(problem: SdpProblem) -> np.ndarray:
    """Frobenius norm of each variable's coefficient matrices over all blocks."""
    squares = np.zeros(problem.num_vars)
    for block in problem.blocks:
        for index, matrix in block.terms:
            squares[index] += float(np.sum(matrix**2))
    return np.sqrt(squares)


def primal_scale(problem: SdpProblem, z: np.ndarray) -> float:
    """``1 + max(‖F0‖, max_k |z_k|‖F_k‖)``, the scale of the primal residual."""
    f0 = math.sqrt(sum(float(np.sum(b.F0**2)) for b in problem.blocks))
    terms = np.abs(np.asarray(z, dtype=np.float64)) * coefficient_norms(problem)
    return 1.0 + max(f0, float(np.max(terms, initial=0.0)))


def kkt_residuals(
    problem: SdpProblem, z: np.ndarray, dual: t.Sequence[np.ndarray] | None
) -> KktResiduals:
    """Residuals of ``(z, Z)`` recomputed from the problem data alone.

    Args:
        problem: Problem the pair refers to
        z: Decision vector
        dual: Dual matrices, one per block; None leaves the dual residual and gap unknown
    """
    z = np.asarray(z, dtype=np.float64)
    values = problem.evaluate(z)
    primal = max(
        0.0, max(_largest_eigenvalue(b, v) for b, v in zip(problem.blocks, values))
    )
    primal /= primal_scale(problem, z)
    if dual is None:
        return KktResiduals(primal_feas=primal, dual_feas=math.nan, gap=math.nan)
    if len(dual) != len(problem.blocks):
        raise DimensionError(f"Expected {len(problem.blocks)} dual blocks, got {len(dual)}")
    stationarity = problem.objective.copy()
    gap = 0.0
    for block, value, Z in zip(problem.blocks, values, dual):
        for index, matrix in block.terms:
            stationarity[index] += np.vdot(matrix, Z)
        gap -= float(np.vdot(value, Z))
    dual_norm = math.sqrt(sum(float(np.sum(np.asarray(Z) ** 2)) for Z in dual))
    largest = float(np.max(coefficient_norms(problem), initial=0.0))
    scale = 1.0 + max(float(np.linalg.norm(problem.objective)), largest * dual_norm)
    return KktResiduals(
        primal_feas=primal,
        dual_feas=float(np.linalg.norm(stationarity)) / scale,
        gap=abs(gap),
    )


def dual_objective(problem: SdpProblem, dual: t.Sequence[np.ndarray]) -> float:
    """``⟨F0, Z⟩`` summed over blocks."""
    return float(sum(np.vdot(block.F0, Z) for block, Z in zip(problem.blocks, dual)))


def build_result(
    problem: SdpProblem,
    status: SolveStatus,
    z: np.ndarray,
    dual: t.Sequence[np.ndarray] | None,
    residuals: KktResiduals | None = None,
    iterations: int = 0,
    runtime_seconds: float = 0.0,
) -> SolveResult:
    """Assemble a :class:`SolveResult`, deriving ``ρ`` and the bound from optimal points."""
    z = np.asarray(z, dtype=np.float64)
    if residuals is None:
        residuals = kkt_residuals(problem, z, dual)
    optimal = status is SolveStatus.OPTIMAL
    rho = problem.rho(z) if optimal else math.nan
    return SolveResult(
        status=status,
        z=z,
        rho=rho,
        lipschitz_bound=problem.lipschitz_bound(rho) if optimal else math.nan,
        primal_obj=float(problem.objective @ z) if np.all(np.isfinite(z)) else math.nan,
        dual_obj=dual_objective(problem, dual) if dual is not None else math.nan,
        kkt_residuals=residuals,
        iterations=iterations,
        dual=tuple(dual or ()),
        runtime_seconds=runtime_seconds,
    )


# Cones


class _DenseCone:
    """PSD block with Nesterov-Todd scaling ``s̃ = R⁻¹ S R⁻⊤ = R⊤ Z R = Λ``."""

    def __init__(self, h: np.ndarray, terms: np.ndarray, positions: np.ndarray):
        self.size = h.shape[0]
        self.h = h
        self.terms = terms
        self.positions = positions
        self.R = np.eye(self.size)
        self.R_inv = np.eye(self.size)
        self.lam = np.ones(self.size)

    def scale(self, M: np.ndarray) -> np.ndarray:
        return self.R_inv @ M @ self.R_inv.T

    def scaled(self) -> tuple[np.ndarray, np.ndarray]:
        A = self.scale(self.terms).reshape(len(self.positions), self.size * self.size)
        return A, self.scale(self.h).ravel()

    def flat_lam(self) -> np.ndarray:
        return np.diag(self.lam).ravel()

    def complementarity(
        self, target: float, ds: np.ndarray | None, dz: np.ndarray | None
    ) -> np.ndarray:
        n = self.size
        d = np.diag(target - self.lam**2)
        if ds is not None and dz is not None:
            Ds, Dz = ds.reshape(n, n), dz.reshape(n, n)
            d = d - 0.5 * (Ds @ Dz + Dz @ Ds)
        return (2.0 * d / (self.lam[:, None] + self.lam[None, :])).ravel()

    def max_step(self, direction: np.ndarray) -> float:
        D = direction.reshape(self.size, self.size)
        root = 1.0 / np.sqrt(self.lam)
        M = root[:, None] * (0.5 * (D + D.T)) * root[None, :]
        smallest = scipy.linalg.eigvalsh(M, subset_by_index=[0, 0])[0]
        return math.inf if smallest >= 0 else -1.0 / smallest

    def update(self, ds: np.ndarray, dz: np.ndarray, alpha: float) -> None:
        n = self.size
        base = np.diag(self.lam)
        s = base + alpha * ds.reshape(n, n)
        z = base + alpha * dz.reshape(n, n)
        L1 = scipy.linalg.cholesky(0.5 * (s + s.T), lower=True)
        L2 = scipy.linalg.cholesky(0.5 * (z + z.T), lower=True)
        _, lam, Vt = scipy.linalg.svd(L2.T @ L1)
        if np.any(lam <= 0):
            raise np.linalg.LinAlgError("Scaling point left the cone interior")
        self.R = (self.R @ L1 @ Vt.T) / np.sqrt(lam)[None, :]
        self.R_inv = (np.sqrt(lam)[:, None] * Vt) @ scipy.linalg.solve_triangular(
            L1, self.R_inv, lower=True
        )
        self.lam = lam

    def primal(self) -> np.ndarray:
        return (self.R * self.lam[None, :]) @ self.R.T

    def dual(self) -> np.ndarray:
        return (self.R_inv.T * self.lam[None, :]) @ self.R_inv

    def combine(self, x: np.ndarray) -> np.ndarray:
        return np.tensordot(x, self.terms, axes=1)

    def as_matrix(self, value: np.ndarray) -> np.ndarray:
        return value


class _DiagonalCone:
    """Nonnegative orthant block; ``d`` holds the squared scaling ``√(s/z)``."""

    def __init__(self, h: np.ndarray, terms: np.ndarray, positions: np.ndarray):
        self.size = h.shape[0]
        self.h = h
        self.terms = terms
        self.positions = positions
        self.d = np.ones(self.size)
        self.lam = np.ones(self.size)

    def scale(self, M: np.ndarray) -> np.ndarray:
        return M / self.d

    def scaled(self) -> tuple[np.ndarray, np.ndarray]:
        return self.scale(self.terms), self.scale(self.h)

    def flat_lam(self) -> np.ndarray:
        return self.lam

    def complementarity(
        self, target: float, ds: np.ndarray | None, dz: np.ndarray | None
    ) -> np.ndarray:
        d = target - self.lam**2
        if ds is not None and dz is not None:
            d = d - ds * dz
        return d / self.lam

    def max_step(self, direction: np.ndarray) -> float:
        smallest = float(np.min(direction / self.lam))
        return math.inf if smallest >= 0 else -1.0 / smallest

    def update(self, ds: np.ndarray, dz: np.ndarray, alpha: float) -> None:
        s = self.lam + alpha * ds
        z = self.lam + alpha * dz
        if np.any(s <= 0) or np.any(z <= 0):
            raise np.linalg.LinAlgError("Scaling point left the cone interior")
        self.d = self.d * np.sqrt(s / z)
        self.lam = np.sqrt(s * z)

    def primal(self) -> np.ndarray:
        return self.d * self.lam

    def dual(self) -> np.ndarray:
        return self.lam / self.d

    def combine(self, x: np.ndarray) -> np.ndarray:
        return x @ self.terms

    def as_matrix(self, value: np.ndarray) -> np.ndarray:
        return np.diag(value)


_Cone = t.Union[_DenseCone, _DiagonalCone]


def _coefficient_gram(problem: SdpProblem) -> np.ndarray:
    gram = np.zeros((problem.num_vars, problem.num_vars))
    for block in problem.blocks:
        if not block.terms:
            continue
        indices = np.array([k for k, _ in block.terms])
        V = np.stack([matrix.ravel() for _, matrix in block.terms])
        gram[np.ix_(indices, indices)] += V @ V.T
    return gram


def independent_variables(problem: SdpProblem, rel_tol: float = DEPENDENCE_TOL) -> np.ndarray:
    """Variables kept by the solver, in increasing order.

    A greedy pivoted Cholesky of the coefficient Gram matrix visits the objective variables
    first; variables in no block, or whose coefficients are combinations of kept ones, are
    left out and fixed at 0.
    """
    gram = _coefficient_gram(problem)
    order = sorted(range(problem.num_vars), key=lambda k: (problem.objective[k] == 0, k))
    kept: list[int] = []
    L = np.zeros((0, 0))
    for k in order:
        diag = gram[k, k]
        if diag <= 0:
            continue
        w = scipy.linalg.solve_triangular(L, gram[kept, k], lower=True) if kept else np.zeros(0)
        schur = diag - float(w @ w)
        if schur <= rel_tol * diag:
            continue
        L = np.block([[L, np.zeros((len(kept), 1))], [w[None, :], np.array([[math.sqrt(schur)]])]])
        kept.append(k)
    return np.array(sorted(kept), dtype=int)


def _make_cones(
    problem: SdpProblem, active: np.ndarray, h_scale: float, column_scale: np.ndarray
) -> list[_Cone]:
    position = {int(k): i for i, k in enumerate(active)}
    cones: list[_Cone] = []
    for block in problem.blocks:
        terms = [
            (position[k], m / column_scale[position[k]]) for k, m in block.terms if k in position
        ]
        positions = np.array([p for p, _ in terms], dtype=int)
        h = -block.F0 / h_scale
        if block.diagonal:
            stack = np.array([np.diag(m) for _, m in terms]).reshape(len(terms), block.size)
            cones.append(_DiagonalCone(np.diag(h).copy(), stack, positions))
        else:
            stack = np.array([m for _, m in terms]).reshape(len(terms), block.size, block.size)
            cones.append(_DenseCone(h, stack, positions))
    return cones


class _NewtonSystem:
    """Bordered system ``[[H, u], [v⊤, -d]]`` solved through a Cholesky factor of ``H``.

    ``H = Ĝ⊤Ĝ`` is factored after a diagonal equilibration, with a growing diagonal shift
    when it is numerically singular. Eliminating ``τ`` leaves the scalar
    ``v⊤H⁻¹u + d = c⊤H⁻¹c + (ĥ⊤ĥ - ĥ⊤Πĥ) + κ/τ > 0``. Solutions are refined against the
    unshifted system.
    """

    def __init__(self, H: np.ndarray, u: np.ndarray, v: np.ndarray, d: float):
        self.H = H
        self.u = u
        self.v = v
        self.d = d
        diag = np.diag(H)
        self.equilibration = np.where(diag > 0, 1.0 / np.sqrt(np.where(diag > 0, diag, 1.0)), 1.0)
        scaled = self.equilibration[:, None] * H * self.equilibration[None, :]
        self.cholesky: tuple[np.ndarray, bool] | None = None
        for shift in CHOLESKY_SHIFTS if H.size else ():
            try:
                self.cholesky = scipy.linalg.cho_factor(
                    scaled + shift * np.eye(len(diag)), lower=True, check_finite=True
                )
                break
            except (np.linalg.LinAlgError, ValueError):
                continue
        if self.cholesky is None and H.size:
            raise np.linalg.LinAlgError("Schur complement is not positive definite")
        self.Hu = self._h_solve(u)
        self.denominator = float(v @ self.Hu) + d
        if not (math.isfinite(self.denominator) and self.denominator > 0):
            raise np.linalg.LinAlgError("Singular embedding system")

    def _h_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.cholesky is None:
            return np.zeros(0)
        e = self.equilibration
        return e * scipy.linalg.cho_solve(self.cholesky, e * rhs)

    def _solve_once(self, rhs: np.ndarray) -> np.ndarray:
        y = self._h_solve(rhs[:-1])
        dtau = (float(self.v @ y) - rhs[-1]) / self.denominator
        return np.append(y - self.Hu * dtau, dtau)

    def apply(self, sol: np.ndarray) -> np.ndarray:
        dx, dtau = sol[:-1], sol[-1]
        return np.append(self.H @ dx + self.u * dtau, float(self.v @ dx) - self.d * dtau)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        sol = self._solve_once(rhs)
        for _ in range(REFINEMENT_STEPS):
            sol = sol + self._solve_once(rhs - self.apply(sol))
        return sol


@dataclass
class _Direction:
    dx: np.ndarray
    dtau: float
    ds: list[np.ndarray]
    dz: list[np.ndarray]
    dkappa: float


@dataclass
class _Linearization:
    """Scaled data and residuals of the embedding at the current iterate."""

    scaled: list[tuple[np.ndarray, np.ndarray]]
    gz: np.ndarray
    hz: float
    rx: np.ndarray
    rz: list[np.ndarray]
    rt: float
    mu: float
    system: _NewtonSystem | None = None


class _Embedding:
    """Iterate ``(x, S, Z, τ, κ)`` of the self-dual embedding on the rescaled problem.

    The rescaled problem has ``F0 / ‖F0‖``, unit-norm coefficient matrices and a unit-norm
    cost, so ``z_k = ‖F0‖ x_k / ‖F_k‖`` and the original dual is ``Z`` times the cost norm.
    """

    def __init__(self, problem: SdpProblem, active: np.ndarray):
        self.problem = problem
        self.active = active
        self.h_scale = math.sqrt(sum(float(np.sum(b.F0**2)) for b in problem.blocks)) or 1.0
        self.column_scale = coefficient_norms(problem)[active]
        self.cones = _make_cones(problem, active, self.h_scale, self.column_scale)
        c = problem.objective[active] / self.column_scale
        self.c_scale = float(np.linalg.norm(c)) or 1.0
        self.c = c / self.c_scale
        self.degree = sum(cone.size for cone in self.cones)
        self.x = np.zeros(len(active))
        self.tau = 1.0
        self.kappa = 1.0

    def full_vector(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.problem.num_vars)
        out[self.active] = values / self.column_scale
        return out

    def estimate(self) -> tuple[np.ndarray, list[np.ndarray]]:
        """Primal and dual estimates ``(x/τ, Z/τ)`` on the original scaling."""
        z_hat = self.full_vector(self.h_scale * self.x / self.tau)
        scale = self.c_scale / self.tau
        return z_hat, [cone.as_matrix(cone.dual()) * scale for cone in self.cones]

    def linearize(self) -> _Linearization:
        p = len(self.active)
        scaled = [cone.scaled() for cone in self.cones]
        gz = np.zeros(p)
        hz = 0.0
        rz = []
        squares = self.tau * self.kappa
        for cone, (A, hs) in zip(self.cones, scaled):
            lam = cone.flat_lam()
            np.add.at(gz, cone.positions, A @ lam)
            hz += float(hs @ lam)
            rz.append(lam + A.T @ self.x[cone.positions] - self.tau * hs)
            squares += float(lam @ lam)
        return _Linearization(
            scaled=scaled,
            gz=gz,
            hz=hz,
            rx=gz + self.c * self.tau,
            rz=rz,
            rt=self.kappa + float(self.c @ self.x) + hz,
            mu=squares / (self.degree + 1),
        )

    def primal_ray_residual(self) -> float:
        """``‖𝒢x + S‖`` on the rescaled problem."""
        total = 0.0
        for cone in self.cones:
            total += float(np.sum((cone.primal() + cone.combine(self.x[cone.positions])) ** 2))
        return math.sqrt(total)

    def factor(self, lin: _Linearization) -> None:
        """Reduced system ``[[Ĝ⊤Ĝ, c - Ĝ⊤ĥ], [(c + Ĝ⊤ĥ)⊤, -(κ/τ + ĥ⊤ĥ)]]``."""
        p = len(self.active)
        H = np.zeros((p, p))
        g = np.zeros(p)
        hh = 0.0
        for cone, (A, hs) in zip(self.cones, lin.scaled):
            H[np.ix_(cone.positions, cone.positions)] += A @ A.T
            np.add.at(g, cone.positions, A @ hs)
            hh += float(hs @ hs)
        lin.system = _NewtonSystem(H, self.c - g, self.c + g, self.kappa / self.tau + hh)

    def direction(
        self, lin: _Linearization, sigma: float, corrector: _Direction | None = None
    ) -> _Direction:
        """Newton direction targeting ``σμ`` and residuals reduced by ``1 - σ``."""
        p = len(self.active)
        q = [
            cone.complementarity(
                sigma * lin.mu,
                None if corrector is None else corrector.ds[i],
                None if corrector is None else corrector.dz[i],
            )
            for i, cone in enumerate(self.cones)
        ]
        w = [q_b + (1.0 - sigma) * rz_b for q_b, rz_b in zip(q, lin.rz)]
        target = sigma * lin.mu - self.tau * self.kappa
        if corrector is not None:
            target -= corrector.dtau * corrector.dkappa
        rhs = np.empty(p + 1)
        rhs[:p] = -(1.0 - sigma) * lin.rx
        rhs[p] = -(1.0 - sigma) * lin.rt - target / self.tau
        for cone, (A, hs), w_b in zip(self.cones, lin.scaled, w):
            np.add.at(rhs, cone.positions, -(A @ w_b))
            rhs[p] -= float(hs @ w_b)
        sol = t.cast(_NewtonSystem, lin.system).solve(rhs)
        dx, dtau = sol[:p], float(sol[p])
        if not (np.all(np.isfinite(dx)) and math.isfinite(dtau)):
            raise np.linalg.LinAlgError("Non-finite Newton direction")
        ds = [
            -(1.0 - sigma) * rz_b - A.T @ dx[cone.positions] + hs * dtau
            for cone, (A, hs), rz_b in zip(self.cones, lin.scaled, lin.rz)
        ]
        dz = [q_b - ds_b for q_b, ds_b in zip(q, ds)]
        return _Direction(dx, dtau, ds, dz, (target - self.kappa * dtau) / self.tau)

    def step_limit(self, d: _Direction) -> float:
        """Largest step keeping the iterate in the cone."""
        alpha = math.inf
        for cone, ds, dz in zip(self.cones, d.ds, d.dz):
            alpha = min(alpha, cone.max_step(ds), cone.max_step(dz))
        if d.dtau < 0:
            alpha = min(alpha, -self.tau / d.dtau)
        if d.dkappa < 0:
            alpha = min(alpha, -self.kappa / d.dkappa)
        return alpha

    def step(self, lin: _Linearization) -> float:
        """One Mehrotra predictor-corrector step; returns its length."""
        self.factor(lin)
        predictor = self.direction(lin, 0.0)
        sigma = (1.0 - min(1.0, self.step_limit(predictor))) ** 3
        d = self.direction(lin, sigma, predictor)
        alpha = min(1.0, STEP_FRACTION * self.step_limit(d))
        if alpha < MIN_STEP:
            # Recenter without the second-order term, then on the central path itself
            for fallback in (sigma, 1.0):
                d = self.direction(lin, fallback)
                alpha = min(1.0, STEP_FRACTION * self.step_limit(d))
                if alpha >= MIN_STEP:
                    break
            else:
                raise np.linalg.LinAlgError(f"Step length {alpha:.2e} stalled")
        for cone, ds, dz in zip(self.cones, d.ds, d.dz):
            cone.update(ds, dz, alpha)
        self.x = self.x + alpha * d.dx
        self.tau += alpha * d.dtau
        self.kappa += alpha * d.dkappa
        return alpha


def solve(
    problem: SdpProblem,
    config: SolverConfig | None = None,
    log: logging.Logger | None = None,
) -> SolveResult:
    """Solve ``problem`` with the homogeneous self-dual interior-point method.

    Failures are reported in the result status, never raised.

    Args:
        problem: Problem to solve
        config: [optional] Tolerances and iteration cap; default :class:`SolverConfig`
        log: [optional] Custom logger; default local logger

    Returns:
        The solve result; an optimal ``z`` satisfies every block within ``tol_feas``

    Raises:
        Unsupported: Backend other than ``internal``
        ValueError: Problem without blocks
    """
    config = config or SolverConfig()
    logger = log or DEFAULT_LOGGER
    if config.backend is not SolverBackend.INTERNAL:
        raise Unsupported(f"solve runs the internal backend only, got {config.backend.value}")
    if not problem.blocks:
        raise ValueError(f"Problem {problem.name} has no blocks")
    start = time.perf_counter()

    active = independent_variables(problem)
    if len(active) < problem.num_vars:
        logger.debug(
            "Fix %d dependent or unused variables of %s at 0.",
            problem.num_vars - len(active),
            problem.name,
        )
    embedding = _Embedding(problem, active)

    def finish(
        status: SolveStatus,
        z: np.ndarray,
        dual: list[np.ndarray] | None,
        iterations: int,
        residuals: KktResiduals,
    ) -> SolveResult:
        elapsed = time.perf_counter() - start
        result = build_result(problem, status, z, dual, residuals, iterations, elapsed)
        logger.info(
            "Solved %s: %s after %d iterations, primal %.8e, dual %.8e.",
            problem.name,
            status.value,
            iterations,
            result.primal_obj,
            result.dual_obj,
        )
        return result

    iteration = 0
    while True:
        lin = embedding.linearize()
        z_hat, dual_hat = embedding.estimate()
        residuals = kkt_residuals(problem, z_hat, dual_hat)
        pcost = float(problem.objective @ z_hat)
        logger.debug(
            "%3d pcost % .8e dcost % .8e gap %.2e pres %.2e dres %.2e tau %.2e kappa %.2e",
            iteration,
            pcost,
            dual_objective(problem, dual_hat),
            residuals.gap,
            residuals.primal_feas,
            residuals.dual_feas,
            embedding.tau,
            embedding.kappa,
        )
        if residuals.accepts(config, pcost):
            return finish(SolveStatus.OPTIMAL, z_hat, dual_hat, iteration, residuals)

        if lin.hz < 0 and float(np.linalg.norm(lin.gz)) / -lin.hz <= config.tol_feas:
            ray = [cone.as_matrix(cone.dual()) for cone in embedding.cones]
            scale = dual_objective(problem, ray)
            certificate = KktResiduals(
                primal_feas=math.nan,
                dual_feas=float(np.linalg.norm(lin.gz)) / -lin.hz,
                gap=math.nan,
            )
            return finish(
                SolveStatus.INFEASIBLE,
                np.full(problem.num_vars, math.nan),
                [Z / scale for Z in ray],
                iteration,
                certificate,
            )

        cx = float(embedding.c @ embedding.x)
        if cx < 0 and embedding.primal_ray_residual() / -cx <= config.tol_feas:
            certificate = KktResiduals(
                primal_feas=embedding.primal_ray_residual() / -cx,
                dual_feas=math.nan,
                gap=math.nan,
            )
            ray_z = embedding.full_vector(embedding.x)
            ray_z /= -float(problem.objective @ ray_z)
            return finish(SolveStatus.UNBOUNDED, ray_z, None, iteration, certificate)

        if iteration == config.max_iters:
            logger.warning("Solver hit the iteration cap %d on %s.", iteration, problem.name)
            return finish(SolveStatus.MAX_ITERATIONS, z_hat, dual_hat, iteration, residuals)

        try:
            embedding.step(lin)
        except np.linalg.LinAlgError as e:
            logger.warning("Solver stopped on %s: %s", problem.name, e)
            return finish(SolveStatus.NUMERICAL_ERROR, z_hat, dual_hat, iteration, residuals)
        iteration += 1
