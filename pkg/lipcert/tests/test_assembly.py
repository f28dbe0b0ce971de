# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

import math

from dataclasses import replace

import numpy as np
import pytest

from lipcert.activations import ActivationKind, ActivationSpec
from lipcert.assembly import (
    AffineMatrix,
    BoundSemantics,
    MultiplierClass,
    assemble_deq_lipschitz,
    assemble_deq_wellposed,
    assemble_l2_feedforward,
    assemble_l2_residual,
    assemble_linf,
    assemble_node_lipschitz,
    assemble_rr,
)
from lipcert.baselines import sample_lower_bound, spectral_norm
from lipcert.exceptions import PreconditionError, Unsupported
from lipcert.model import Architecture, DeqParams, Layer, Model, SingleResidualParams
from lipcert.solver import SolveStatus, dual_objective, psd_check, solve

MAXMIN = ActivationSpec(ActivationKind.MAXMIN, 2)


def _sum_of_maxmin() -> Model:
    """``f(x) = [1, 1] MaxMin(x)``."""
    return Model(
        Architecture.FEEDFORWARD,
        activation=MAXMIN,
        layers=(
            Layer(W=np.eye(2), b=np.zeros(2), activation=MAXMIN),
            Layer(W=np.ones((1, 2)), b=np.zeros(1)),
        ),
    )


def test_affine_matrix__block_and_congruence():
    x = AffineMatrix.variable(0, np.eye(2))
    M = AffineMatrix.block([[x, np.ones((2, 1))], [np.ones((1, 2)), None]])
    np.testing.assert_allclose(M.constant, [[0, 0, 1], [0, 0, 1], [1, 1, 0]])
    np.testing.assert_allclose(M.terms[0], np.diag([1.0, 1.0, 0.0]))
    A = np.array([[1.0], [2.0]])
    np.testing.assert_allclose((2.0 * x - np.eye(2)).congruence(A).terms[0], [[10.0]])
    np.testing.assert_allclose((np.eye(2) - x).constant, np.eye(2))


def test_assemble_l2_feedforward__bare_maxmin_structure(bare_maxmin):
    problem = assemble_l2_feedforward(bare_maxmin)
    assert problem.var_names == ("rho", "lambda[1][0]", "gamma[1][0]")
    assert problem.bound_semantics is BoundSemantics.SQRT_RHO_L2
    assert problem.rho_index == 0
    assert [b.label for b in problem.blocks] == ["layer 1", "layer 2", "sign"]
    # ρ = λ = 1 and γ = 0 makes every block vanish
    for value in problem.evaluate(np.array([1.0, 1.0, 0.0])):
        assert psd_check(-value, 1e-12)


@pytest.mark.parametrize(
    "mclass,decomposed,count",
    [
        ("neuron2", True, 1 + 3 + 3),
        ("neuron1", True, 1 + 3),
        ("layer2", True, 1 + 2),
        ("layer1", True, 1 + 1),
        ("neuron2", False, 1 + 4 * 3),
        ("neuron1", False, 1 + 3 * 3),
        ("layer1", False, 1 + 3),
    ],
)
def test_assemble_l2_feedforward__variables_per_multiplier_class(
    feedforward, mclass, decomposed, count
):
    problem = assemble_l2_feedforward(feedforward([4, 6, 2]), mclass, decomposed=decomposed)
    assert problem.num_vars == count
    assert len(problem.blocks) == (3 if decomposed else 2)


def test_assemble_l2_feedforward__bare_maxmin_certifies_one(bare_maxmin):
    result = solve(assemble_l2_feedforward(bare_maxmin))
    assert result.status is SolveStatus.OPTIMAL
    assert result.lipschitz_bound == pytest.approx(1.0, abs=1e-6)


def test_assemble_l2_feedforward__dense_bare_maxmin_certifies_one(bare_maxmin):
    result = solve(assemble_l2_feedforward(bare_maxmin, decomposed=False))
    assert result.lipschitz_bound == pytest.approx(1.0, abs=1e-6)


def test_assemble_rr__bare_maxmin_certifies_sqrt_two(bare_maxmin):
    result = solve(assemble_rr(bare_maxmin))
    assert result.status is SolveStatus.OPTIMAL
    assert result.lipschitz_bound == pytest.approx(math.sqrt(2.0), abs=1e-6)


def test_assemble_rr__requires_maxmin(feedforward):
    with pytest.raises(Unsupported):
        assemble_rr(feedforward([4, 4, 1], activation=ActivationSpec(ActivationKind.GROUPSORT, 4)))
    with pytest.raises(Unsupported):
        assemble_rr(feedforward([3, 2]))


@pytest.mark.timeout(300)
@pytest.mark.parametrize("depth", [2, 3, 4])
def test_assemble_l2_feedforward__layer1_equals_spectral_norm_product(feedforward, rng, depth):
    for _ in range(3 if depth < 4 else 4):
        widths = [int(rng.integers(1, 9))] + [2 * int(rng.integers(1, 9)) for _ in range(depth - 1)]
        widths.append(int(rng.integers(1, 5)))
        model = feedforward(widths)
        result = solve(assemble_l2_feedforward(model, MultiplierClass.LAYER1))
        product = math.prod(spectral_norm(layer.W) for layer in model.layers)
        assert result.status is SolveStatus.OPTIMAL
        assert result.lipschitz_bound == pytest.approx(product, rel=1e-6)


def test_assemble_l2_feedforward__dense_keeps_s_and_p_free(feedforward):
    model = feedforward([4, 6, 2])
    for mclass in ("neuron1", "layer1"):
        names = assemble_l2_feedforward(model, mclass, decomposed=False).var_names
        assert any(name.startswith("nu") for name in names)
        assert any(name.startswith("tau") for name in names)
        assert not any(name.startswith("gamma") for name in names)
    fixed = assemble_l2_feedforward(model, decomposed=False, zero_sp=True)
    assert fixed.var_names == assemble_l2_feedforward(model).var_names


@pytest.mark.timeout(300)
def test_assemble_l2_feedforward__dense_without_s_and_p_matches_decomposed(feedforward):
    for widths in ([2, 4, 1], [3, 6, 2], [8, 6, 8], [5, 6, 2, 2], [4, 4, 4, 2]):
        model = feedforward(widths)
        decomposed = solve(assemble_l2_feedforward(model))
        fixed = solve(assemble_l2_feedforward(model, decomposed=False, zero_sp=True))
        assert decomposed.is_optimal and fixed.is_optimal
        assert fixed.lipschitz_bound == pytest.approx(decomposed.lipschitz_bound, rel=1e-5)


@pytest.mark.timeout(600)
def test_assemble_l2_feedforward__dense_is_tighter_and_sound(feedforward):
    for widths in ([2, 4, 1], [3, 6, 2], [8, 6, 8], [5, 6, 2, 2], [4, 4, 4, 2]):
        model = feedforward(widths)
        decomposed = solve(assemble_l2_feedforward(model)).lipschitz_bound
        dense = solve(assemble_l2_feedforward(model, decomposed=False))
        assert dense.is_optimal
        assert dense.lipschitz_bound <= decomposed * (1 + 1e-6)
        lower = sample_lower_bound(model, n_samples=5000, seed=0).value
        assert lower <= dense.lipschitz_bound * (1 + 1e-6)


@pytest.mark.timeout(900)
def test_assemble_l2_feedforward__dense_solves_small_networks(feedforward, rng):
    nets = [[1, 8, 8, 8], [7, 8, 4, 8], [5, 6, 2], [1, 6, 6, 3], [2, 2, 4, 7], [1, 8, 6, 2]]
    nets += [[1, 8, 6, 4], [5, 8, 8, 7]]
    while len(nets) < 20:
        depth = int(rng.integers(1, 3))
        hidden = [2 * int(rng.integers(1, 5)) for _ in range(depth)]
        nets.append([int(rng.integers(1, 9)), *hidden, int(rng.integers(1, 9))])
    for widths in nets:
        result = solve(assemble_l2_feedforward(feedforward(widths), decomposed=False))
        assert result.is_optimal
        assert math.isfinite(result.lipschitz_bound)


@pytest.mark.timeout(300)
@pytest.mark.parametrize("scale", [0.1, 10.0])
def test_assemble_l2_feedforward__scaling_robustness(feedforward, scale):
    model = feedforward([4, 6, 6, 2])
    layers = tuple(replace(layer, W=scale * layer.W) for layer in model.layers)
    scaled = replace(model, layers=layers)
    base = solve(assemble_l2_feedforward(model))
    result = solve(assemble_l2_feedforward(scaled))
    assert result.is_optimal
    assert result.lipschitz_bound == pytest.approx(base.lipschitz_bound * scale**3, rel=1e-5)


def test_assemble_linf__sum_of_maxmin_certifies_two():
    problem = assemble_linf(_sum_of_maxmin(), label=0)
    assert problem.bound_semantics is BoundSemantics.RHO_LINF_L1
    assert [b.label for b in problem.blocks] == ["layer 1", "output", "sign"]
    result = solve(problem)
    assert result.rho == pytest.approx(2.0, abs=1e-6)
    assert result.lipschitz_bound == result.rho


def test_assemble_linf__linear_certifies_l1_norm():
    w = np.array([[1.5, -2.0, 0.25]])
    model = Model(Architecture.FEEDFORWARD, layers=(Layer(W=w, b=np.zeros(1)),))
    result = solve(assemble_linf(model, label=0))
    assert result.lipschitz_bound == pytest.approx(3.75, abs=1e-6)


def test_assemble_linf__label_out_of_range():
    with pytest.raises(ValueError):
        assemble_linf(_sum_of_maxmin(), label=1)


def test_assemble_l2_residual__zero_residual_branches_certify_one(rng):
    layers = tuple(
        Layer(W=rng.standard_normal((4, 3)), b=np.zeros(4), activation=MAXMIN, G=np.zeros((3, 4)))
        for _ in range(2)
    )
    model = Model(Architecture.RESIDUAL, activation=MAXMIN, layers=layers)
    result = solve(assemble_l2_residual(model))
    assert result.status is SolveStatus.OPTIMAL
    assert result.rho == pytest.approx(1.0, abs=1e-6)


@pytest.mark.timeout(300)
def test_assemble_l2_residual__single_layer_below_norm_bound(rng):
    for _ in range(20):
        n, hidden, m = 3, 4, 2
        params = SingleResidualParams(
            H1=rng.standard_normal((m, n)),
            G1=rng.standard_normal((m, hidden)),
            W1=rng.standard_normal((hidden, n)),
            b1=rng.standard_normal(hidden),
        )
        model = Model(Architecture.SINGLE_RESIDUAL, activation=MAXMIN, single_res=params)
        result = solve(assemble_l2_residual(model))
        loose = spectral_norm(params.H1) + spectral_norm(params.G1) * spectral_norm(params.W1)
        assert result.status is SolveStatus.OPTIMAL
        assert result.lipschitz_bound <= loose + 1e-6


def test_assemble_l2_residual__rejects_s_and_p_both_fixed(residual):
    with pytest.raises(ValueError):
        assemble_l2_residual(residual(4, 4), zero_s=True, zero_p=True)


def test_assemble_l2_residual__free_multipliers_add_variables(residual):
    model = residual(4, 4)
    fixed = assemble_l2_residual(model)
    free = assemble_l2_residual(model, zero_s=False)
    assert free.num_vars == fixed.num_vars + 2
    assert any(name.startswith("tau") for name in free.var_names)


def test_assemble_deq_wellposed__contractive_deq_is_feasible(deq):
    result = solve(assemble_deq_wellposed(deq(w_norm=0.5)))
    assert result.status is SolveStatus.OPTIMAL
    assert math.isnan(result.lipschitz_bound)


def test_assemble_deq_wellposed__expansive_deq_is_infeasible():
    params = DeqParams(W=2.0 * np.eye(2), U=np.eye(2), Wo=np.eye(2), bz=np.zeros(2), by=np.zeros(2))
    model = Model(Architecture.DEQ, activation=MAXMIN, deq=params)
    problem = assemble_deq_wellposed(model)
    result = solve(problem)
    assert result.status is SolveStatus.INFEASIBLE
    assert dual_objective(problem, result.dual) == pytest.approx(1.0)
    assert all(np.linalg.eigvalsh(0.5 * (Z + Z.T))[0] >= -1e-6 for Z in result.dual)


def test_assemble_deq_lipschitz__requires_wellposedness_certificate(deq):
    model = deq()
    with pytest.raises(PreconditionError):
        assemble_deq_lipschitz(model)
    waived = assemble_deq_lipschitz(model, waive_wellposedness=True)
    assert waived.bound_semantics is BoundSemantics.SQRT_RHO_L2_DEQ


def test_assemble_node_lipschitz__horizon_enters_the_bound(node):
    problem = assemble_node_lipschitz(node(t_final=2.0))
    assert problem.horizon == 2.0
    assert problem.lipschitz_bound(1.0) == pytest.approx(math.e)


def test_assemble__rejects_wrong_architecture(deq, bare_maxmin):
    with pytest.raises(Unsupported):
        assemble_l2_feedforward(deq())
    with pytest.raises(Unsupported):
        assemble_deq_wellposed(bare_maxmin)
    relu = ActivationSpec(ActivationKind.RELU)
    model = Model(
        Architecture.FEEDFORWARD,
        activation=relu,
        layers=(
            Layer(W=np.eye(2), b=np.zeros(2), activation=relu),
            Layer(W=np.eye(2), b=np.zeros(2)),
        ),
    )
    with pytest.raises(Unsupported):
        assemble_l2_feedforward(model)
