# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""Reference Lipschitz bounds the SDP certificates are compared to.

``mp`` multiplies spectral norms, ``sample`` is an empirical lower bound, ``fgl``
enumerates every activation pattern, ``norm-eq`` converts an ℓ2 bound to ℓ∞ and ``rr``
solves the residual-ReLU rewrite with slope-restricted constraints.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
import time
import typing as t
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from lipcert.activations import ActivationKind, ActivationSpec, apply_jacobian_factor
from lipcert.assembly import assemble_rr
from lipcert.constants import CHUNK_SIZE, DEFAULT_LOGGER, FGL_MAX_PATTERNS, SAMPLE_COUNT, THREADS
from lipcert.exceptions import ConvergenceError, DimensionError, TooLarge, Unsupported
from lipcert.model import (
    Architecture,
    Model,
    SingleResidualParams,
    forward,
    jacobian_batch,
)
from lipcert.solver import SolverConfig, solve

SVD_DIMENSION = 32
"""Largest matrix dimension handled by a full SVD instead of power iteration."""

POWER_MAX_ITERS = 10_000
"""Iteration cap of the power iteration."""

SAMPLE_RADIUS_RANGE = (1e-1, 1e1)
"""Range of the log-uniform radii of sampled inputs."""

PAIR_OFFSET_RANGE = (1e-2, 1.0)
"""Range of the log-uniform offsets of sampled pairs for implicit models."""


class BoundMethod(str, enum.Enum):
    MP = "mp"
    SAMPLE = "sample"
    FGL = "fgl"
    NORM_EQ = "norm-eq"
    NSR_L2 = "nsr-l2"
    NSR_LINF = "nsr-linf"
    RR = "rr"

    @property
    def is_lower_bound(self) -> bool:
        return self is BoundMethod.SAMPLE


class Norm(str, enum.Enum):
    """Norm pair of the Lipschitz constant: ℓ2→ℓ2 or ℓ∞→ℓ1."""

    L2 = "l2"
    LINF_L1 = "linf"


@dataclass(frozen=True)
class BoundReport:
    """One bound on the Lipschitz constant.

    ``value`` is NaN when the method could not certify a bound; ``metadata["bound"]`` is
    ``lower`` for sampling and ``upper`` otherwise.
    """

    method: BoundMethod
    value: float
    norm: Norm
    runtime_seconds: float = 0.0
    metadata: dict[str, t.Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        method = BoundMethod(self.method)
        object.__setattr__(self, "method", method)
        object.__setattr__(self, "norm", Norm(self.norm))
        if self.value < 0:
            raise ValueError(f"A Lipschitz bound is nonnegative, got {self.value}")
        bound = "lower" if method.is_lower_bound else "upper"
        object.__setattr__(self, "metadata", {"bound": bound, **self.metadata})

    def to_dict(self) -> dict[str, t.Any]:
        return {
            "method": self.method.value,
            "value": self.value,
            "norm": self.norm.value,
            "runtime_seconds": self.runtime_seconds,
            "metadata": dict(self.metadata),
        }


def spectral_norm(W: np.ndarray, tol: float = 1e-10) -> float:
    """Largest singular value of ``W``.

    Matrices up to 32 rows and columns use a full SVD; larger ones run a power iteration on
    ``W⊤W`` from a fixed seed until the estimate changes by less than ``tol`` relatively.

    Raises:
        ConvergenceError: Power iteration did not converge in 10⁴ iterations
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionError(f"Expected a matrix, got shape {W.shape}")
    if not np.any(W):
        return 0.0
    if max(W.shape) <= SVD_DIMENSION:
        return float(scipy.linalg.svdvals(W)[0])
    rng = np.random.default_rng(0)
    v = rng.standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    estimate = math.inf
    for _ in range(POWER_MAX_ITERS):
        Wv = W @ v
        sigma = float(np.linalg.norm(Wv))
        if sigma == 0.0:
            # Start vector in the kernel
            v = rng.standard_normal(W.shape[1])
            v /= np.linalg.norm(v)
            continue
        if abs(sigma - estimate) <= tol * sigma:
            return sigma
        estimate = sigma
        v = W.T @ Wv
        v /= np.linalg.norm(v)
    raise ConvergenceError(f"Power iteration did not converge in {POWER_MAX_ITERS} iterations")


def _explicit(model: Model, method: str) -> None:
    if model.arch.is_implicit:
        raise Unsupported(f"{method} is not available for {model.arch.value} models")


def mp_bound(model: Model, log: logging.Logger | None = None) -> BoundReport:
    """Product of spectral norms.

    Residual blocks contribute ``1 + ‖G‖‖W‖``; a single-layer residual model is bounded by
    ``‖H1‖ + ‖G1‖‖W1‖``.

    Raises:
        Unsupported: Implicit models
    """
    _explicit(model, "The spectral norm product")
    start = time.perf_counter()
    if model.arch is Architecture.SINGLE_RESIDUAL:
        p = t.cast(SingleResidualParams, model.single_res)
        value = spectral_norm(p.H1) + spectral_norm(p.G1) * spectral_norm(p.W1)
    else:
        value = 1.0
        for layer in model.layers:
            if layer.G is None:
                value *= spectral_norm(layer.W)
            else:
                value *= 1.0 + spectral_norm(layer.G) * spectral_norm(layer.W)
    (log or DEFAULT_LOGGER).info("MP bound of %s: %.6e.", model.name, value)
    return BoundReport(
        method=BoundMethod.MP,
        value=value,
        norm=Norm.L2,
        runtime_seconds=time.perf_counter() - start,
        metadata={"layers": max(1, len(model.layers))},
    )


def _scalar_output(model: Model, norm: Norm, label: int | None) -> Model:
    if label is not None:
        model = model.select_output(label)
    if norm is Norm.LINF_L1 and model.output_width != 1:
        raise DimensionError(
            f"ℓ∞→ℓ1 bounds need a scalar output; select one of {model.output_width} labels"
        )
    return model


def _chunks(count: int, seed: int) -> list[tuple[int, np.random.SeedSequence]]:
    sizes = [min(CHUNK_SIZE, count - start) for start in range(0, count, CHUNK_SIZE)]
    return list(zip(sizes, np.random.SeedSequence(seed).spawn(len(sizes))))


def _log_uniform(rng: np.random.Generator, bounds: tuple[float, float], count: int) -> np.ndarray:
    return np.exp(rng.uniform(math.log(bounds[0]), math.log(bounds[1]), size=(count, 1)))


def _gradient_chunk(model: Model, norm: Norm, count: int, seed: np.random.SeedSequence) -> float:
    rng = np.random.default_rng(seed)
    x = _log_uniform(rng, SAMPLE_RADIUS_RANGE, count) * rng.standard_normal(
        (count, model.input_width)
    )
    J = jacobian_batch(model, x)
    if norm is Norm.L2:
        values = np.linalg.norm(J, ord=2, axis=(1, 2))
    else:
        values = np.abs(J[:, 0, :]).sum(axis=-1)
    return float(np.max(values))


def _pair_chunk(model: Model, norm: Norm, count: int, seed: np.random.SeedSequence) -> float:
    rng = np.random.default_rng(seed)
    n = model.input_width
    x = _log_uniform(rng, SAMPLE_RADIUS_RANGE, count) * rng.standard_normal((count, n))
    y = x + _log_uniform(rng, PAIR_OFFSET_RANGE, count) * rng.standard_normal((count, n))
    df = forward(model, x) - forward(model, y)
    if norm is Norm.L2:
        values = np.linalg.norm(df, axis=-1) / np.linalg.norm(x - y, axis=-1)
    else:
        values = np.abs(df[:, 0]) / np.max(np.abs(x - y), axis=-1)
    return float(np.max(values))


def sample_lower_bound(
    model: Model,
    norm: Norm = Norm.L2,
    n_samples: int = SAMPLE_COUNT,
    seed: int = 0,
    label: int | None = None,
    finite_differences: bool = False,
    threads: int = THREADS,
    log: logging.Logger | None = None,
) -> BoundReport:
    """Largest Jacobian norm over random inputs, a lower bound on the Lipschitz constant.

    Inputs are standard normal vectors scaled by radii drawn log-uniformly in ``[0.1, 10]``.

    Args:
        model: Network
        norm: [optional] ``l2`` uses ``σ_max(J)``, ``linf`` uses ``‖∇f‖₁``; default l2
        n_samples: [optional] Number of sampled inputs; default 200000
        seed: [optional] Master seed; default 0
        label: [optional] Output row to keep before sampling; default all outputs
        finite_differences: [optional] For implicit models, use difference quotients of
            random input pairs instead of Jacobians; default False
        threads: [optional] Worker threads; default to environment variable LIPCERT_THREADS
        log: [optional] Custom logger; default local logger

    Raises:
        Unsupported: Implicit model without ``finite_differences``
        DimensionError: ``linf`` on a model with several outputs and no label
    """
    norm = Norm(norm)
    if n_samples < 1:
        raise ValueError(f"At least one sample is required, got {n_samples}")
    if model.arch.is_implicit and not finite_differences:
        raise Unsupported(
            f"Sampling {model.arch.value} models requires finite_differences=True"
        )
    model = _scalar_output(model, norm, label)
    chunk = _pair_chunk if model.arch.is_implicit else _gradient_chunk
    jobs = _chunks(n_samples, seed)
    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        values = list(pool.map(lambda job: chunk(model, norm, job[0], job[1]), jobs))
    value = max(values)
    (log or DEFAULT_LOGGER).info(
        "Sampled %s lower bound of %s over %d points: %.6e.",
        norm.value,
        model.name,
        n_samples,
        value,
    )
    return BoundReport(
        method=BoundMethod.SAMPLE,
        value=value,
        norm=norm,
        runtime_seconds=time.perf_counter() - start,
        metadata={
            "samples": n_samples,
            "seed": seed,
            "estimator": "pairs" if model.arch.is_implicit else "jacobian",
        },
    )


# Activation pattern enumeration


def _pattern_witnesses(activation: ActivationSpec) -> np.ndarray:
    """One preactivation per group pattern, realizing each possible group Jacobian.

    Sorting groups get ``u[perm[j]] = n_g - j`` for every permutation; Householder groups
    get ``v`` (identity) and ``-v`` (reflection).
    """
    n_g = activation.group_size
    if activation.kind is ActivationKind.HOUSEHOLDER:
        v = t.cast(np.ndarray, activation.householder_v)
        return np.stack([v, -v])
    witnesses = np.zeros((math.factorial(n_g), n_g))
    for k, perm in enumerate(itertools.permutations(range(n_g))):
        witnesses[k, list(perm)] = n_g - np.arange(n_g)
    return witnesses


def _fgl_chunk(
    model: Model,
    norm: Norm,
    witnesses: np.ndarray,
    first: int,
    count: int,
) -> tuple[float, int]:
    activation = t.cast(ActivationSpec, model.activation)
    choices = witnesses.shape[0]
    hidden = model.layers[:-1]
    groups = [layer.out_width // activation.group_size for layer in hidden]
    index = np.arange(first, first + count, dtype=np.int64)
    digits = (index[:, None] // choices ** np.arange(sum(groups), dtype=np.int64)) % choices
    P = np.broadcast_to(hidden[0].W, (count, *hidden[0].W.shape)).copy()
    offset = 0
    for i, layer in enumerate(hidden):
        if i:
            P = layer.W @ P
        u = witnesses[digits[:, offset : offset + groups[i]]].reshape(count, layer.out_width)
        offset += groups[i]
        P = apply_jacobian_factor(activation, u, P)
    P = model.layers[-1].W @ P
    if norm is Norm.L2:
        values = np.linalg.norm(P, ord=2, axis=(1, 2))
    else:
        values = np.abs(P[:, 0, :]).sum(axis=-1)
    best = int(np.argmax(values))
    return float(values[best]), first + best


def fgl_bound(
    model: Model,
    norm: Norm = Norm.L2,
    label: int | None = None,
    max_patterns: int = FGL_MAX_PATTERNS,
    threads: int = THREADS,
    log: logging.Logger | None = None,
) -> BoundReport:
    """Exact maximum of the Jacobian product norm over every activation pattern.

    Each GroupSort group contributes all ``n_g!`` permutations and each Householder group the
    two Jacobians ``I`` and ``I - 2vv⊤``.

    Args:
        model: Feedforward GroupSort or Householder network
        norm: [optional] ``l2`` uses the spectral norm, ``linf`` the ℓ∞→ℓ1 norm of the
            scalar output row; default l2
        label: [optional] Output row to keep; default all outputs
        max_patterns: [optional] Enumeration guard; default 10⁷
        threads: [optional] Worker threads; default to environment variable LIPCERT_THREADS
        log: [optional] Custom logger; default local logger

    Raises:
        TooLarge: More patterns than ``max_patterns``
        Unsupported: Non-feedforward model or slope-restricted activation
    """
    norm = Norm(norm)
    if model.arch is not Architecture.FEEDFORWARD:
        raise Unsupported(f"FGL enumerates feedforward networks, got {model.arch.value}")
    model = _scalar_output(model, norm, label)
    start = time.perf_counter()
    if model.is_linear:
        W = model.layers[0].W
        value = spectral_norm(W) if norm is Norm.L2 else float(np.abs(W[0]).sum())
        return BoundReport(
            BoundMethod.FGL, value, norm, time.perf_counter() - start, {"patterns": 1}
        )
    activation = t.cast(ActivationSpec, model.activation)
    if activation.kind is ActivationKind.RELU:
        raise Unsupported("FGL enumerates GroupSort and Householder activation patterns")
    witnesses = _pattern_witnesses(activation)
    groups = sum(layer.out_width // activation.group_size for layer in model.layers[:-1])
    total = witnesses.shape[0] ** groups
    if total > max_patterns:
        raise TooLarge(
            f"FGL would enumerate {witnesses.shape[0]}^{groups} patterns, "
            f"more than the guard {max_patterns}"
        )
    (log or DEFAULT_LOGGER).debug("Enumerate %d activation patterns of %s.", total, model.name)
    jobs = [(first, min(CHUNK_SIZE, total - first)) for first in range(0, total, CHUNK_SIZE)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(
            pool.map(lambda job: _fgl_chunk(model, norm, witnesses, job[0], job[1]), jobs)
        )
    value, pattern = max(results, key=lambda result: result[0])
    (log or DEFAULT_LOGGER).info(
        "FGL bound of %s over %d patterns: %.6e.", model.name, total, value
    )
    metadata: dict[str, t.Any] = {"patterns": total, "argmax_pattern": pattern}
    if activation.kind is ActivationKind.HOUSEHOLDER:
        metadata["householder_extension"] = True
    return BoundReport(BoundMethod.FGL, value, norm, time.perf_counter() - start, metadata)


def norm_eq_bound(l2_bound: float, n0: int) -> BoundReport:
    """ℓ∞→ℓ1 bound ``√n₀ · L₂`` obtained from an ℓ2 bound by norm equivalence."""
    if not l2_bound >= 0:
        raise ValueError(f"The ℓ2 bound must be nonnegative, got {l2_bound}")
    if n0 < 1:
        raise ValueError(f"Input width must be positive, got {n0}")
    return BoundReport(
        method=BoundMethod.NORM_EQ,
        value=math.sqrt(n0) * l2_bound,
        norm=Norm.LINF_L1,
        metadata={"l2_bound": l2_bound, "n0": n0},
    )


def rr_bound(
    model: Model, config: SolverConfig | None = None, log: logging.Logger | None = None
) -> BoundReport:
    """Residual-ReLU baseline bound; NaN when the solver does not reach optimality."""
    start = time.perf_counter()
    problem = assemble_rr(model, log=log)
    result = solve(problem, config, log=log)
    return BoundReport(
        method=BoundMethod.RR,
        value=result.lipschitz_bound,
        norm=Norm.L2,
        runtime_seconds=time.perf_counter() - start,
        metadata={"status": result.status.value, "rho": result.rho},
    )

