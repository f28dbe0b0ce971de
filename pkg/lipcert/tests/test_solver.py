# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

import math

import numpy as np
import pytest

from lipcert.assembly import AffineLmiBlock, BoundSemantics, SdpProblem
from lipcert.exceptions import DimensionError, Unsupported
from lipcert.solver import (
    SolverBackend,
    SolverConfig,
    SolveStatus,
    independent_variables,
    kkt_residuals,
    primal_scale,
    psd_check,
    solve,
)


def _scalar_problem(constraints, objective=1.0):
    """``min objective·z`` subject to ``f0 + f1 z ≤ 0`` for every ``(f0, f1)``."""
    blocks = tuple(
        AffineLmiBlock(size=1, F0=np.array([[f0]]), terms=((0, np.array([[f1]])),), label=str(i))
        for i, (f0, f1) in enumerate(constraints)
    )
    return SdpProblem(
        num_vars=1,
        objective=np.array([objective]),
        blocks=blocks,
        var_names=("z",),
        bound_semantics=BoundSemantics.RHO_LINF_L1,
        rho_index=0,
    )


def test_solve__largest_eigenvalue(lambda_max, random_symmetric, rng):
    for _ in range(20):
        A = random_symmetric(int(rng.integers(2, 9)))
        expected = float(np.linalg.eigvalsh(A)[-1])
        problem = lambda_max(A)
        result = solve(problem)
        assert result.status is SolveStatus.OPTIMAL
        tol = 1e-8 * primal_scale(problem, result.z)
        assert abs(result.rho - expected) <= max(1e-7, tol)
        # The certified point is feasible on its own
        assert psd_check(result.rho * np.eye(A.shape[0]) - A, tol)
        assert result.kkt_residuals.accepts(SolverConfig(), result.primal_obj)


def test_solve__diagonal_matrix(lambda_max):
    result = solve(lambda_max(np.diag([1.0, 3.0])))
    assert result.rho == pytest.approx(3.0, abs=1e-7)
    assert result.dual_obj == pytest.approx(3.0, abs=1e-6)
    assert result.iterations > 0


def test_solve__infeasible_problem_returns_a_certificate():
    # z ≥ 1 and z ≤ -1
    result = solve(_scalar_problem([(1.0, -1.0), (1.0, 1.0)]))
    assert result.status is SolveStatus.INFEASIBLE
    assert math.isnan(result.rho)
    assert math.isnan(result.lipschitz_bound)
    assert np.all(np.isnan(result.z))
    first, second = (float(Z[0, 0]) for Z in result.dual)
    assert first == pytest.approx(0.5, abs=1e-6)
    assert second == pytest.approx(0.5, abs=1e-6)


def test_solve__unbounded_problem_returns_a_ray():
    # min z subject to z ≤ 0
    result = solve(_scalar_problem([(0.0, 1.0)]))
    assert result.status is SolveStatus.UNBOUNDED
    assert math.isnan(result.rho)
    assert result.z[0] < 0


def test_solve__iteration_cap(lambda_max, random_symmetric):
    result = solve(lambda_max(random_symmetric(6)), SolverConfig(max_iters=1))
    assert result.status is SolveStatus.MAX_ITERATIONS
    assert math.isnan(result.rho)
    assert result.iterations == 1


def test_solve__dependent_variables_are_fixed_at_zero():
    A = np.diag([2.0, -1.0, 0.5])
    twin = ((0, -np.eye(3)), (1, -np.eye(3)))
    problem = SdpProblem(
        num_vars=3,
        objective=np.array([1.0, 1.0, 0.0]),
        blocks=(AffineLmiBlock(size=3, F0=A, terms=twin),),
        var_names=("a", "b", "unused"),
        bound_semantics=BoundSemantics.RHO_LINF_L1,
        rho_index=0,
    )
    np.testing.assert_array_equal(independent_variables(problem), [0])
    result = solve(problem)
    assert result.status is SolveStatus.OPTIMAL
    assert result.primal_obj == pytest.approx(2.0, abs=1e-7)
    assert result.z[1] == 0.0
    assert result.z[2] == 0.0


def test_solve__rejects_export_backend(lambda_max):
    with pytest.raises(Unsupported):
        solve(lambda_max(np.eye(2)), SolverConfig(backend=SolverBackend.SDPA_EXPORT))


def test_solve__rejects_problem_without_blocks():
    problem = SdpProblem(
        num_vars=1,
        objective=np.ones(1),
        blocks=(),
        var_names=("t",),
        bound_semantics=BoundSemantics.FEASIBILITY,
    )
    with pytest.raises(ValueError):
        solve(problem)


def test_kkt_residuals__without_dual(lambda_max):
    problem = lambda_max(np.diag([1.0, 3.0]))
    residuals = kkt_residuals(problem, np.array([2.0]), None)
    # λ_max(diag(-1, 1)) relative to 1 + max(‖diag(1, 3)‖, 2‖I‖)
    assert residuals.primal_feas == pytest.approx(1.0 / (1.0 + math.sqrt(10.0)))
    assert math.isnan(residuals.dual_feas)
    assert not residuals.accepts(SolverConfig(), 2.0)
    with pytest.raises(DimensionError):
        kkt_residuals(problem, np.array([3.0]), [np.eye(2), np.eye(2)])


def test_psd_check():
    assert psd_check(np.diag([1.0, 0.0]), 0.0)
    assert not psd_check(np.diag([1.0, -1e-3]), 1e-6)
    assert psd_check(np.diag([1.0, -1e-9]), 1e-6)
    assert psd_check(np.zeros((0, 0)), 0.0)
    with pytest.raises(DimensionError):
        psd_check(np.zeros((2, 3)), 0.0)
    with pytest.raises(ValueError):
        psd_check(np.array([[0.0, 1.0], [0.0, 0.0]]), 0.0)
    with pytest.raises(ValueError):
        psd_check(np.eye(2), -1.0)


@pytest.mark.parametrize(
    "kwargs",
    [{"tol_gap": 0.0}, {"tol_feas": -1e-8}, {"max_iters": 0}, {"backend": "mosek"}],
)
def test_solver_config__rejects_invalid_settings(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


def test_sdp_problem__rejects_inconsistent_data():
    with pytest.raises(DimensionError):
        AffineLmiBlock(size=2, F0=np.zeros((2, 2)), terms=((0, np.eye(3)),))
    with pytest.raises(ValueError):
        AffineLmiBlock(size=2, F0=np.array([[0.0, 1.0], [0.0, 0.0]]), terms=())
    block = AffineLmiBlock(size=1, F0=np.zeros((1, 1)), terms=((1, np.eye(1)),))
    with pytest.raises(DimensionError):
        SdpProblem(
            num_vars=1,
            objective=np.ones(1),
            blocks=(block,),
            var_names=("t",),
            bound_semantics=BoundSemantics.RHO_LINF_L1,
        )


def test_solve_result__to_dict(lambda_max):
    data = solve(lambda_max(np.eye(2))).to_dict()
    assert data["status"] == "optimal"
    assert set(data) == {
        "status",
        "rho",
        "lipschitz_bound",
        "primal_obj",
        "dual_obj",
        "kkt_residuals",
        "iterations",
        "runtime_seconds",
    }
    assert set(data["kkt_residuals"]) == {"primal_feas", "dual_feas", "gap"}


def test_solve__is_deterministic(lambda_max, random_symmetric):
    problem = lambda_max(random_symmetric(6))
    first, second = solve(problem), solve(problem)
    np.testing.assert_array_equal(first.z, second.z)
    assert first.iterations == second.iterations
    assert first.rho == second.rho
    for Z1, Z2 in zip(first.dual, second.dual):
        np.testing.assert_array_equal(Z1, Z2)


@pytest.mark.parametrize("scale", [10.0, 1e4])
def test_solve__scaled_problem(lambda_max, random_symmetric, scale):
    A = random_symmetric(5)
    expected = float(np.linalg.eigvalsh(A)[-1])
    result = solve(lambda_max(scale * A))
    assert result.status is SolveStatus.OPTIMAL
    assert result.rho / scale == pytest.approx(expected, rel=1e-6, abs=1e-7)


def test_kkt_residuals__are_scale_relative(lambda_max):
    # λ_max(1e6 diag(1, 3)) = 3e6 is missed by 1e-3
    z = 3e6 - 1e-3
    residuals = kkt_residuals(lambda_max(np.diag([1e6, 3e6])), np.array([z]), None)
    assert residuals.primal_feas == pytest.approx(1e-3 / (1.0 + z * math.sqrt(2.0)), rel=1e-5)
    assert residuals.primal_feas <= SolverConfig().tol_feas
