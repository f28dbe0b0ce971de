# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

from __future__ import annotations

import typing as t
from pathlib import Path

import numpy as np
import pytest

from lipcert.activations import ActivationKind, ActivationSpec
from lipcert.assembly import AffineLmiBlock, BoundSemantics, SdpProblem
from lipcert.model import Architecture, DeqParams, Layer, Model, NodeParams, load_model

# logging.basicConfig(level=logging.DEBUG)

FIXTURES = Path(__file__).parent / "fixtures"

MAXMIN = ActivationSpec(ActivationKind.MAXMIN, 2)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def bare_maxmin() -> Model:
    """Identity weights around one MaxMin layer."""
    return load_model(FIXTURES / "bare_maxmin.json")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture
def feedforward(rng: np.random.Generator) -> t.Callable[..., Model]:
    """Factory of random feedforward networks with the given layer widths."""

    def make(
        widths: t.Sequence[int], activation: ActivationSpec = MAXMIN, scale: float = 1.0
    ) -> Model:
        layers = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            W = scale * rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
            b = 0.1 * rng.standard_normal(n_out)
            final = i == len(widths) - 2
            layers.append(Layer(W=W, b=b, activation=None if final else activation))
        return Model(
            Architecture.FEEDFORWARD, activation=activation, layers=tuple(layers), name="random"
        )

    return make


@pytest.fixture
def residual(rng: np.random.Generator) -> t.Callable[..., Model]:
    """Factory of residual networks ``x + G φ(W x + b)`` framed by affine layers."""

    def make(width: int, hidden: int, blocks: int = 1, outputs: int | None = None) -> Model:
        layers = [Layer(W=rng.standard_normal((width, width)) / np.sqrt(width), b=np.zeros(width))]
        for _ in range(blocks):
            layers.append(
                Layer(
                    W=rng.standard_normal((hidden, width)) / np.sqrt(width),
                    b=0.1 * rng.standard_normal(hidden),
                    activation=MAXMIN,
                    G=0.5 * rng.standard_normal((width, hidden)) / np.sqrt(hidden),
                )
            )
        if outputs is not None:
            layers.append(
                Layer(W=rng.standard_normal((outputs, width)) / np.sqrt(width), b=np.zeros(outputs))
            )
        return Model(Architecture.RESIDUAL, activation=MAXMIN, layers=tuple(layers), name="res")

    return make


def _scaled(M: np.ndarray, norm: float) -> np.ndarray:
    return norm * M / np.linalg.norm(M, 2)


@pytest.fixture
def deq(rng: np.random.Generator) -> t.Callable[..., Model]:
    """Factory of MaxMin DEQs with ``‖W‖₂`` fixed to ``w_norm``."""

    def make(width: int = 4, inputs: int = 3, outputs: int = 2, w_norm: float = 0.5) -> Model:
        params = DeqParams(
            W=_scaled(rng.standard_normal((width, width)), w_norm),
            U=rng.standard_normal((width, inputs)) / np.sqrt(inputs),
            Wo=rng.standard_normal((outputs, width)) / np.sqrt(width),
            bz=0.1 * rng.standard_normal(width),
            by=np.zeros(outputs),
        )
        return Model(Architecture.DEQ, activation=MAXMIN, deq=params, name="deq")

    return make


@pytest.fixture
def node(rng: np.random.Generator) -> t.Callable[..., Model]:
    """Factory of MaxMin neural ODEs."""

    def make(width: int = 2, hidden: int = 4, t_final: float = 1.0) -> Model:
        params = NodeParams(
            G=0.5 * rng.standard_normal((width, hidden)) / np.sqrt(hidden),
            W0=rng.standard_normal((hidden, width)) / np.sqrt(width),
            W1=0.1 * rng.standard_normal(hidden),
            b0=0.1 * rng.standard_normal(hidden),
            b1=0.1 * rng.standard_normal(width),
            t_final=t_final,
        )
        return Model(Architecture.NODE, activation=MAXMIN, node=params, name="node")

    return make


def _lambda_max_problem(A: np.ndarray, name: str = "lambda_max") -> SdpProblem:
    """``min t`` subject to ``A - t I ⪯ 0``; the optimum is the largest eigenvalue of ``A``."""
    n = A.shape[0]
    block = AffineLmiBlock(size=n, F0=np.array(A, dtype=np.float64), terms=((0, -np.eye(n)),))
    return SdpProblem(
        num_vars=1,
        objective=np.ones(1),
        blocks=(block,),
        var_names=("t",),
        bound_semantics=BoundSemantics.RHO,
        rho_index=0,
        name=name,
    )


@pytest.fixture
def lambda_max() -> t.Callable[..., SdpProblem]:
    return _lambda_max_problem


@pytest.fixture
def random_symmetric(rng: np.random.Generator) -> t.Callable[[int], np.ndarray]:
    def make(n: int) -> np.ndarray:
        M = rng.standard_normal((n, n))
        return 0.5 * (M + M.T)

    return make
