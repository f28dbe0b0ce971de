# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

import numpy as np
import pytest

from lipcert.activations import ActivationKind, ActivationSpec, apply_activation
from lipcert.exceptions import DimensionError
from lipcert.qc import (
    MultiplierParams,
    TspMatrices,
    build_tsp,
    group_base,
    qc_block,
    qc_slope_restricted,
    qc_value,
    qc_values,
    sample_multipliers,
    verify_qc_sample,
)


def _unit(rng, n):
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def test_build_tsp__groupsort_structure():
    params = MultiplierParams(
        lam=[1.0, 2.0], gamma=[0.5, -1.0], nu=[0.0, 3.0], tau=[1.0, 0.0], group_size=2
    )
    tsp = build_tsp(params)
    ones = np.ones((2, 2))
    np.testing.assert_allclose(tsp.T[:2, :2], np.eye(2) + 0.5 * ones)
    np.testing.assert_allclose(tsp.T[2:, 2:], 2.0 * np.eye(2) - ones)
    np.testing.assert_allclose(tsp.T[:2, 2:], 0.0)
    np.testing.assert_allclose(tsp.P[2:, 2:], 3.0 * ones)
    np.testing.assert_allclose(tsp.S[:2, :2], ones)


def test_build_tsp__householder_base(rng):
    v = _unit(rng, 3)
    np.testing.assert_allclose(group_base(3, v) @ v, 0.0, atol=1e-12)
    activation = ActivationSpec(ActivationKind.HOUSEHOLDER, 3, householder_v=v)
    tsp = build_tsp(MultiplierParams.for_activation(activation, [0.0], gamma=[1.0]))
    np.testing.assert_allclose(tsp.T, np.eye(3) - np.outer(v, v))


def test_multiplier_params__rejects_negative_lambda():
    with pytest.raises(ValueError):
        MultiplierParams(lam=[-1.0], gamma=[0.0], nu=[0.0], tau=[0.0], group_size=2)


def test_multiplier_params__rejects_mismatched_lengths():
    with pytest.raises(DimensionError):
        MultiplierParams(lam=[1.0, 1.0], gamma=[0.0], nu=[0.0], tau=[0.0], group_size=2)


def test_qc_block__rejects_mismatched_shapes():
    with pytest.raises(DimensionError):
        qc_block(TspMatrices(T=np.eye(2), S=np.eye(3), P=np.eye(2)))


def test_qc_slope_restricted__requires_nonnegative_diagonal():
    np.testing.assert_allclose(
        qc_slope_restricted(np.diag([1.0, 2.0])).X[:2, 2:], np.diag([1.0, 2.0])
    )
    with pytest.raises(ValueError):
        qc_slope_restricted(np.diag([1.0, -2.0]))
    with pytest.raises(ValueError):
        qc_slope_restricted(np.ones((2, 2)))


def test_qc_values__equals_the_quadratic_form(rng):
    activation = ActivationSpec(ActivationKind.GROUPSORT, 3)
    params = sample_multipliers(rng, activation, groups=2)
    X = qc_block(build_tsp(params)).X
    du = rng.standard_normal((10, 6))
    dphi = rng.standard_normal((10, 6))
    stacked = np.hstack([du, dphi])
    expected = np.einsum("bi,ij,bj->b", stacked, X, stacked)
    np.testing.assert_allclose(qc_values(params, du, dphi, normalize=False), expected, atol=1e-10)


def test_qc_value__maxmin_equals_lambda_times_norm_gap():
    # Sorting keeps the group sum, so only λ(‖Δx‖² - ‖Δφ‖²) survives
    activation = ActivationSpec(ActivationKind.MAXMIN, 2)
    params = MultiplierParams.for_activation(activation, [2.0], [0.7], [-1.3], [0.4])
    x, y = np.array([3.0, 1.0]), np.array([0.0, 2.0])
    dphi = apply_activation(activation, x) - apply_activation(activation, y)
    expected = 2.0 * (np.sum((x - y) ** 2) - np.sum(dphi**2))
    assert qc_value(activation, params, x, y, normalize=False) == pytest.approx(expected)


@pytest.mark.timeout(120)
@pytest.mark.parametrize("group_size", [2, 4])
def test_verify_qc_sample__groupsort_never_violates(group_size):
    activation = ActivationSpec(ActivationKind.GROUPSORT, group_size)
    sample = verify_qc_sample(activation, None, trials=100_000, seed=7, groups=2)
    assert sample.trials == 100_000
    assert sample.min_value >= -1e-9


@pytest.mark.timeout(300)
def test_verify_qc_sample__householder_never_violates(rng):
    for _ in range(10):
        activation = ActivationSpec(ActivationKind.HOUSEHOLDER, 3, householder_v=_unit(rng, 3))
        sample = verify_qc_sample(activation, None, trials=100_000, seed=11, groups=2)
        assert sample.min_value >= -1e-9


def test_verify_qc_sample__relu_violates_the_groupsort_constraint():
    sample = verify_qc_sample(ActivationSpec(ActivationKind.RELU), None, trials=10_000, seed=3)
    assert sample.min_value < -0.1
    x, y = sample.witness
    assert x.shape == y.shape == (1,)


def test_verify_qc_sample__independent_of_thread_count():
    activation = ActivationSpec(ActivationKind.MAXMIN, 2)
    one = verify_qc_sample(activation, None, trials=20_000, seed=5, groups=3, threads=1)
    many = verify_qc_sample(activation, None, trials=20_000, seed=5, groups=3, threads=4)
    assert one.min_value == many.min_value
    np.testing.assert_array_equal(one.witness[0], many.witness[0])


def test_verify_qc_sample__fixed_multipliers(rng):
    activation = ActivationSpec(ActivationKind.MAXMIN, 2)
    params = MultiplierParams.for_activation(activation, [1.0, 0.5], [2.0, -1.0])
    sample = verify_qc_sample(activation, params, trials=5_000, seed=1)
    assert sample.witness[0].shape == (4,)
    assert sample.min_value >= -1e-9


def test_verify_qc_sample__rejects_zero_trials():
    with pytest.raises(ValueError):
        verify_qc_sample(ActivationSpec(ActivationKind.MAXMIN, 2), None, trials=0, seed=0)
