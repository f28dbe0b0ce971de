# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""Certification pipeline: pick the SDP for a model and norm, solve it, report the bound."""

from __future__ import annotations

import logging
import math
import time
import typing as t
from dataclasses import dataclass, field, replace
from itertools import zip_longest
from pathlib import Path

import numpy as np

from lipcert.assembly import (
    MultiplierClass,
    SdpProblem,
    assemble_deq_lipschitz,
    assemble_deq_wellposed,
    assemble_l2_feedforward,
    assemble_l2_residual,
    assemble_linf,
    assemble_node_lipschitz,
)
from lipcert.baselines import BoundMethod, BoundReport, Norm, spectral_norm
from lipcert.constants import DEFAULT_LOGGER
from lipcert.exceptions import Unsupported
from lipcert.model import Architecture, Layer, Model
from lipcert.sdpa import export_sdpa
from lipcert.solver import SolverBackend, SolverConfig, SolveResult, solve


@dataclass(frozen=True, eq=False)
class Certificate:
    """Outcome of :func:`certify`.

    ``lipschitz_bound`` is NaN unless every solved problem is optimal. With the SDPA export
    backend nothing is solved and ``exported`` lists the written files.
    """

    model_name: str
    norm: Norm
    lipschitz_bound: float
    problems: tuple[SdpProblem, ...] = ()
    results: tuple[SolveResult, ...] = ()
    exported: tuple[Path, ...] = ()
    runtime_seconds: float = 0.0
    metadata: dict[str, t.Any] = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return not self.exported and all(r.is_optimal for r in self.results)

    def to_bound_report(self) -> BoundReport:
        method = BoundMethod.NSR_L2 if self.norm is Norm.L2 else BoundMethod.NSR_LINF
        return BoundReport(
            method=method,
            value=self.lipschitz_bound,
            norm=self.norm,
            runtime_seconds=self.runtime_seconds,
            metadata={
                **self.metadata,
                "status": [r.status.value for r in self.results],
                "problems": [p.name for p in self.problems],
            },
        )

    def to_dict(self) -> dict[str, t.Any]:
        return {
            **self.to_bound_report().to_dict(),
            "model": self.model_name,
            "lipschitz_bound": self.lipschitz_bound,
            "certified": self.certified,
            "problems": [
                {"name": p.name, **(r.to_dict() if r else {})}
                for p, r in zip_longest(self.problems, self.results)
            ],
            "exported": [str(path) for path in self.exported],
        }


def split_model(model: Model, every: int) -> list[Model]:
    """Cut a feedforward network after every ``every``-th layer.

    Each cut layer loses its activation, which moves into an identity layer opening the next
    segment. The product of the segment Lipschitz constants bounds the whole network.

    Raises:
        Unsupported: Non-feedforward model
        ValueError: ``every`` smaller than 1
    """
    if model.arch is not Architecture.FEEDFORWARD:
        raise Unsupported(f"Only feedforward networks can be split, got {model.arch.value}")
    if every < 1:
        raise ValueError(f"Split size must be positive, got {every}")
    layers = model.layers
    if every >= len(layers):
        return [model]
    segments = []
    for number, first in enumerate(range(0, len(layers), every)):
        chunk = list(layers[first : first + every])
        if first:
            width = chunk[0].in_width
            opening = Layer(W=np.eye(width), b=np.zeros(width), activation=model.activation)
            chunk.insert(0, opening)
        chunk[-1] = replace(chunk[-1], activation=None)
        segments.append(
            Model(
                arch=Architecture.FEEDFORWARD,
                activation=model.activation,
                layers=tuple(chunk),
                name=f"{model.name}[{number}]",
            )
        )
    return segments


def _problems(
    model: Model,
    norm: Norm,
    label: int | None,
    mclass: MultiplierClass,
    dense: bool,
    zero_s: bool,
    zero_p: bool,
    log: logging.Logger | None,
) -> list[SdpProblem]:
    if norm is Norm.LINF_L1:
        if model.arch is not Architecture.FEEDFORWARD:
            raise Unsupported(
                f"ℓ∞ certificates need a feedforward model, got {model.arch.value}"
            )
        if label is None:
            if model.output_width != 1:
                raise ValueError(
                    f"Model {model.name} has {model.output_width} outputs; pick a label"
                )
            label = 0
        return [assemble_linf(model, label, mclass, log=log)]
    if label is not None:
        model = model.select_output(label)
    if model.arch is Architecture.FEEDFORWARD:
        return [assemble_l2_feedforward(model, mclass, decomposed=not dense, log=log)]
    if model.arch in (Architecture.RESIDUAL, Architecture.SINGLE_RESIDUAL):
        return [assemble_l2_residual(model, zero_s=zero_s, zero_p=zero_p, log=log)]
    if model.arch is Architecture.NODE:
        return [assemble_node_lipschitz(model, log=log)]
    raise Unsupported(f"No single-problem certificate for {model.arch.value} models")


def _export(
    problems: list[SdpProblem], path: Path, config: SolverConfig, log: logging.Logger | None
) -> list[Path]:
    if len(problems) == 1:
        paths = [path]
    else:
        paths = [path.with_name(f"{path.stem}.{i}{path.suffix}") for i in range(len(problems))]
    for problem, target in zip(problems, paths):
        export_sdpa(problem, target, config.sdpa_convention, log=log)
    return paths


def certify_deq(
    model: Model,
    config: SolverConfig | None = None,
    check_only: bool = False,
    sdpa_path: str | Path | None = None,
    log: logging.Logger | None = None,
) -> Certificate:
    """Certify well-posedness of a DEQ, then its ℓ2 Lipschitz bound.

    The Lipschitz problem is solved only when well-posedness is certified; otherwise the
    bound is NaN and the certificate carries the failed well-posedness result.

    Args:
        model: Deep equilibrium model
        config: [optional] Solver configuration; default :class:`SolverConfig`
        check_only: [optional] Stop after the well-posedness problem; default False
        sdpa_path: [optional] Target file for the SDPA export backend
        log: [optional] Custom logger; default local logger
    """
    config = config or SolverConfig()
    logger = log or DEFAULT_LOGGER
    start = time.perf_counter()
    wellposed = assemble_deq_wellposed(model, log=log)
    if config.backend is SolverBackend.SDPA_EXPORT:
        problems = [wellposed]
        if not check_only:
            problems.append(assemble_deq_lipschitz(model, waive_wellposedness=True, log=log))
        paths = _export(problems, Path(t.cast(str, sdpa_path)), config, log)
        return Certificate(model.name, Norm.L2, math.nan, tuple(problems), (), tuple(paths))
    certificate = solve(wellposed, config, log=log)
    metadata = {"wellposed": certificate.is_optimal}
    if check_only or not certificate.is_optimal:
        if not certificate.is_optimal:
            logger.warning(
                "DEQ %s is not certified well-posed (%s).", model.name, certificate.status.value
            )
        return Certificate(
            model.name,
            Norm.L2,
            math.nan,
            (wellposed,),
            (certificate,),
            runtime_seconds=time.perf_counter() - start,
            metadata=metadata,
        )
    problem = assemble_deq_lipschitz(model, certificate, log=log)
    result = solve(problem, config, log=log)
    return Certificate(
        model.name,
        Norm.L2,
        result.lipschitz_bound,
        (wellposed, problem),
        (certificate, result),
        runtime_seconds=time.perf_counter() - start,
        metadata=metadata,
    )


def certify(
    model: Model,
    norm: Norm = Norm.L2,
    label: int | None = None,
    mclass: MultiplierClass = MultiplierClass.NEURON2,
    dense: bool = False,
    split: int | None = None,
    zero_s: bool = True,
    zero_p: bool = False,
    config: SolverConfig | None = None,
    sdpa_path: str | Path | None = None,
    log: logging.Logger | None = None,
) -> Certificate:
    """Certify a Lipschitz bound of ``model``.

    Args:
        model: Network
        norm: [optional] ``l2`` or ``linf`` (ℓ∞→ℓ1 of one output); default l2
        label: [optional] Output row for ``linf``, or to restrict an ℓ2 certificate
        mclass: [optional] Multiplier class of feedforward certificates; default neuron2
        dense: [optional] Dense feedforward LMI with free ``S`` and ``P``; default False
        split: [optional] Cut a feedforward network after every ``split`` layers and multiply
            the segment bounds; default no split
        zero_s: [optional] Fix ``S = 0`` in residual certificates; default True
        zero_p: [optional] Fix ``P = 0`` in residual certificates; default False
        config: [optional] Solver configuration; default :class:`SolverConfig`
        sdpa_path: [optional] Target file for the SDPA export backend
        log: [optional] Custom logger; default local logger

    Returns:
        The certificate; its bound is NaN when a solve did not reach optimality

    Raises:
        Unsupported: Norm or option not available for the architecture
        ValueError: Missing label or SDPA path
    """
    norm = Norm(norm)
    mclass = MultiplierClass(mclass)
    config = config or SolverConfig()
    logger = log or DEFAULT_LOGGER
    if config.backend is SolverBackend.SDPA_EXPORT and sdpa_path is None:
        raise ValueError("The SDPA export backend needs a target path")
    if model.arch is Architecture.DEQ:
        if norm is not Norm.L2:
            raise Unsupported("DEQ certificates are ℓ2 only")
        if label is not None:
            model = model.select_output(label)
        return certify_deq(model, config, sdpa_path=sdpa_path, log=log)
    start = time.perf_counter()
    metadata: dict[str, t.Any] = {"mclass": mclass.value, "dense": dense}

    segments = [model]
    if split is not None:
        if norm is not Norm.L2:
            raise Unsupported("Network splitting is available for ℓ2 certificates only")
        if label is not None:
            model = model.select_output(label)
            label = None
        segments = split_model(model, split)
        metadata["segments"] = len(segments)

    bound = 1.0
    problems: list[SdpProblem] = []
    for segment in segments:
        if norm is Norm.L2 and segment.is_linear:
            W = segment.layers[0].W if label is None else segment.select_output(label).layers[0].W
            bound *= spectral_norm(W)
            logger.debug("Linear segment %s bounded by its spectral norm.", segment.name)
            continue
        problems.extend(_problems(segment, norm, label, mclass, dense, zero_s, zero_p, log))

    if config.backend is SolverBackend.SDPA_EXPORT:
        paths = _export(problems, Path(t.cast(str, sdpa_path)), config, log)
        return Certificate(
            model.name, norm, math.nan, tuple(problems), (), tuple(paths), metadata=metadata
        )

    results = [solve(problem, config, log=log) for problem in problems]
    for result in results:
        bound *= result.lipschitz_bound
    if not all(r.is_optimal for r in results):
        bound = math.nan
    elapsed = time.perf_counter() - start
    logger.info("Certified %s bound of %s: %.8f.", norm.value, model.name, bound)
    return Certificate(
        model.name,
        norm,
        bound,
        tuple(problems),
        tuple(results),
        runtime_seconds=elapsed,
        metadata=metadata,
    )
