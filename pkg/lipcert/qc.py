# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""Quadratic constraints for GroupSort and Householder activations.

For multipliers ``λ ≥ 0`` and free ``γ, ν, τ`` the matrices

    T = diag(λ) ⊗ I + diag(γ) ⊗ B,   P = diag(ν) ⊗ B,   S = diag(τ) ⊗ B

with ``B = 11⊤`` (GroupSort) or ``B = I - vv⊤`` (Householder) give a valid incremental
quadratic constraint

    [x - y; φ(x) - φ(y)]⊤ X [x - y; φ(x) - φ(y)] ≥ 0

with ``X = [[T - 2S, P + S], [P + S, -T - 2P]]``.
"""

from __future__ import annotations

import logging
import typing as t
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lipcert.activations import ActivationSpec, apply_activation
from lipcert.constants import CHUNK_SIZE, DEFAULT_LOGGER, THREADS
from lipcert.exceptions import DimensionError

RADIUS_RANGE = (1e-2, 1e2)
"""Range of the log-uniform input radii drawn by the QC sampler."""


def group_base(group_size: int, householder_v: np.ndarray | None = None) -> np.ndarray:
    """Per-group structure matrix: ``11⊤`` for GroupSort, ``I - vv⊤`` for Householder."""
    if householder_v is None:
        return np.ones((group_size, group_size))
    v = np.asarray(householder_v, dtype=np.float64)
    return np.eye(group_size) - np.outer(v, v)


@dataclass(frozen=True, eq=False)
class MultiplierParams:
    """Multipliers of one activation layer with ``N`` groups.

    ``householder_v`` selects the Householder structure; ``None`` is GroupSort.
    """

    lam: np.ndarray
    gamma: np.ndarray
    nu: np.ndarray
    tau: np.ndarray
    group_size: int
    householder_v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        for name in ("lam", "gamma", "nu", "tau"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, value.reshape(1) if value.ndim == 0 else value)
        shape = self.lam.shape
        if self.lam.ndim not in (1, 2) or any(
            getattr(self, name).shape != shape for name in ("gamma", "nu", "tau")
        ):
            raise DimensionError("Multiplier vectors lam, gamma, nu and tau must share one length")
        if np.any(self.lam < 0):
            raise ValueError(f"Multiplier lambda must be nonnegative, got {self.lam.tolist()}")
        if self.householder_v is not None:
            v = np.asarray(self.householder_v, dtype=np.float64)
            object.__setattr__(self, "householder_v", v)

    @property
    def num_groups(self) -> int:
        return int(self.lam.shape[-1])

    @property
    def width(self) -> int:
        return self.num_groups * self.group_size

    @classmethod
    def for_activation(
        cls,
        activation: ActivationSpec,
        lam: t.Sequence[float] | np.ndarray,
        gamma: t.Sequence[float] | np.ndarray | None = None,
        nu: t.Sequence[float] | np.ndarray | None = None,
        tau: t.Sequence[float] | np.ndarray | None = None,
    ) -> MultiplierParams:
        """Multipliers with the structure matching ``activation``; omitted vectors are zero."""
        lam = np.asarray(lam, dtype=np.float64)
        zeros = np.zeros_like(lam)
        return cls(
            lam=lam,
            gamma=zeros if gamma is None else gamma,
            nu=zeros if nu is None else nu,
            tau=zeros if tau is None else tau,
            group_size=activation.group_size,
            householder_v=activation.householder_v,
        )


@dataclass(frozen=True, eq=False)
class TspMatrices:
    T: np.ndarray
    S: np.ndarray
    P: np.ndarray


@dataclass(frozen=True, eq=False)
class QcBlock:
    X: np.ndarray

    @property
    def width(self) -> int:
        return self.X.shape[0] // 2


def build_tsp(params: MultiplierParams) -> TspMatrices:
    """Block-diagonal multiplier matrices ``(T, S, P)``.

    Raises:
        ValueError: Negative ``λ`` entry
    """
    if np.any(params.lam < 0):
        raise ValueError(f"Multiplier lambda must be nonnegative, got {params.lam.tolist()}")
    base = group_base(params.group_size, params.householder_v)
    eye = np.eye(params.group_size)
    return TspMatrices(
        T=np.kron(np.diag(params.lam), eye) + np.kron(np.diag(params.gamma), base),
        S=np.kron(np.diag(params.tau), base),
        P=np.kron(np.diag(params.nu), base),
    )


def qc_block(tsp: TspMatrices) -> QcBlock:
    """``X = [[T - 2S, P + S], [P + S, -T - 2P]]``.

    Raises:
        DimensionError: Inconsistent ``T``, ``S``, ``P`` shapes
    """
    if not (tsp.T.shape == tsp.S.shape == tsp.P.shape) or tsp.T.ndim != 2:
        raise DimensionError(
            f"T, S and P must share one shape, got {tsp.T.shape}, {tsp.S.shape}, {tsp.P.shape}"
        )
    if tsp.T.shape[0] != tsp.T.shape[1]:
        raise DimensionError(f"T must be square, got {tsp.T.shape}")
    cross = tsp.P + tsp.S
    X = np.block([[tsp.T - 2.0 * tsp.S, cross], [cross, -tsp.T - 2.0 * tsp.P]])
    return QcBlock(X=0.5 * (X + X.T))


def qc_slope_restricted(T: np.ndarray) -> QcBlock:
    """``X = [[0, T], [T, -2T]]`` for a ``[0, 1]`` slope-restricted activation.

    Raises:
        ValueError: ``T`` is not diagonal or has a negative entry
    """
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise DimensionError(f"T must be a square matrix, got shape {T.shape}")
    if np.any(T - np.diag(np.diag(T))):
        raise ValueError("T must be diagonal")
    if np.any(np.diag(T) < 0):
        raise ValueError(f"T must be nonnegative, got diagonal {np.diag(T).tolist()}")
    zero = np.zeros_like(T)
    return QcBlock(X=np.block([[zero, T], [T, -2.0 * T]]))


def sample_multipliers(
    rng: np.random.Generator,
    activation: ActivationSpec,
    groups: int,
    count: int | None = None,
) -> MultiplierParams:
    """Draw ``λ ~ |N(0, 1)|`` and ``γ, ν, τ ~ N(0, 1)``.

    With ``count`` the vectors carry a leading batch axis of that size, one multiplier set
    per sampled pair for :func:`qc_values`.
    """
    shape = (groups,) if count is None else (count, groups)
    lam, gamma, nu, tau = np.abs(rng.standard_normal(shape)), *rng.standard_normal((3, *shape))
    return MultiplierParams.for_activation(activation, lam, gamma, nu, tau)


def qc_values(
    params: MultiplierParams,
    du: np.ndarray,
    dphi: np.ndarray,
    normalize: bool = True,
) -> np.ndarray:
    """Quadratic form ``[du; dphi]⊤ X [du; dphi]`` evaluated group by group.

    Args:
        params: Multipliers; vectors of shape ``(N,)`` or ``(B, N)``
        du: Input differences of shape ``(B, N·n_g)``
        dphi: Output differences of shape ``(B, N·n_g)``
        normalize: [optional] Divide by ``‖[du; dphi]‖²``; default True

    Returns:
        One value per pair, shape ``(B,)``
    """
    n_g = params.group_size
    a = du.reshape(du.shape[0], -1, n_g)
    c = dphi.reshape(dphi.shape[0], -1, n_g)
    if a.shape[1] != params.lam.shape[-1]:
        raise DimensionError(
            f"Multipliers cover {params.lam.shape[-1]} groups, differences have {a.shape[1]}"
        )
    base = group_base(n_g, params.householder_v)

    def form(p: np.ndarray, q: np.ndarray) -> np.ndarray:
        return np.einsum("bgi,ij,bgj->bg", p, base, q)

    aa = np.einsum("bgi,bgi->bg", a, a)
    cc = np.einsum("bgi,bgi->bg", c, c)
    aba, abc, cbc = form(a, a), form(a, c), form(c, c)
    values = (
        params.lam * (aa - cc)
        + params.gamma * (aba - cbc)
        - 2.0 * params.tau * aba
        + 2.0 * (params.nu + params.tau) * abc
        - 2.0 * params.nu * cbc
    ).sum(axis=-1)
    if not normalize:
        return values
    scale = aa.sum(axis=-1) + cc.sum(axis=-1)
    return np.divide(values, scale, out=np.zeros_like(values), where=scale > 0)


def qc_value(
    activation: ActivationSpec,
    params: MultiplierParams,
    x: np.ndarray,
    y: np.ndarray,
    normalize: bool = True,
) -> float:
    """QC value of a single pair ``(x, y)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    dphi = apply_activation(activation, x) - apply_activation(activation, y)
    return float(qc_values(params, x - y, dphi, normalize)[0])


@dataclass(frozen=True)
class QcSample:
    """Result of :func:`verify_qc_sample`."""

    min_value: float
    witness: tuple[np.ndarray, np.ndarray]
    trials: int


def _sample_chunk(
    activation: ActivationSpec,
    params: MultiplierParams | None,
    groups: int,
    count: int,
    seed: np.random.SeedSequence,
) -> tuple[float, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    width = groups * (params.group_size if params is not None else activation.group_size)
    low, high = np.log(RADIUS_RANGE[0]), np.log(RADIUS_RANGE[1])
    radius = np.exp(rng.uniform(low, high, size=(2, count, 1)))
    x = radius[0] * rng.standard_normal((count, width))
    y = x + radius[1] * rng.standard_normal((count, width))
    if params is None:
        params = sample_multipliers(rng, activation, groups, count)
    dphi = apply_activation(activation, x) - apply_activation(activation, y)
    values = qc_values(params, x - y, dphi)
    best = int(np.argmin(values))
    return float(values[best]), x[best], y[best]


def verify_qc_sample(
    activation: ActivationSpec,
    params: MultiplierParams | None,
    trials: int,
    seed: int,
    groups: int = 1,
    threads: int = THREADS,
    log: logging.Logger | None = None,
) -> QcSample:
    """Smallest normalized QC value over random input pairs.

    Args:
        activation: Activation evaluated on the pairs
        params: Multipliers; ``None`` draws fresh multipliers for every pair
        trials: Number of sampled pairs
        seed: Master seed; chunks use seeds spawned from it
        groups: [optional] Number of groups when ``params`` is None; default 1
        threads: [optional] Worker threads; default to environment variable LIPCERT_THREADS
        log: [optional] Custom logger; default local logger

    Returns:
        The minimum value and the pair attaining it; identical for any ``threads``
    """
    if trials < 1:
        raise ValueError(f"At least one trial is required, got {trials}")
    if params is not None:
        groups = params.num_groups
    sizes = [min(CHUNK_SIZE, trials - start) for start in range(0, trials, CHUNK_SIZE)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    (log or DEFAULT_LOGGER).debug(
        "Sample %d QC pairs for %s in %d chunks.", trials, activation.kind.value, len(sizes)
    )
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        chunks = list(
            pool.map(
                lambda job: _sample_chunk(activation, params, groups, job[0], job[1]),
                zip(sizes, seeds),
            )
        )
    value, x, y = min(chunks, key=lambda chunk: chunk[0])
    (log or DEFAULT_LOGGER).info(
        "QC check for %s over %d pairs: min value %.3e.", activation.kind.value, trials, value
    )
    return QcSample(min_value=value, witness=(x, y), trials=trials)
