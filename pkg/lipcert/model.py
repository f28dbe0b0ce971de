# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""Network models, their JSON file format and exact evaluation."""

from __future__ import annotations

import enum
import json
import logging
import math
import typing as t
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from lipcert.activations import (
    ActivationKind,
    ActivationSpec,
    apply_activation,
    apply_jacobian_factor,
)
from lipcert.constants import DEFAULT_LOGGER, DEQ_DAMPING, DEQ_MAX_ITERS, DEQ_TOL, ODE_STEP
from lipcert.exceptions import ConvergenceError, DimensionError, ParseError, Unsupported

__all__ = [
    "ActivationKind",
    "ActivationSpec",
    "Architecture",
    "DeqParams",
    "Layer",
    "Model",
    "NodeParams",
    "SingleResidualParams",
    "forward",
    "jacobian",
    "jacobian_batch",
    "load_model",
    "model_from_dict",
    "model_to_dict",
]

FD_STEP = 1e-5
"""Central finite-difference step for implicit model Jacobians."""


class Architecture(str, enum.Enum):
    FEEDFORWARD = "feedforward"
    RESIDUAL = "residual"
    SINGLE_RESIDUAL = "single_residual"
    DEQ = "deq"
    NODE = "node"

    @property
    def is_implicit(self) -> bool:
        return self in (Architecture.DEQ, Architecture.NODE)


@dataclass(frozen=True, eq=False)
class Layer:
    """One layer of an explicit network.

    A feedforward layer computes ``φ(W x + b)`` (``W x + b`` without activation). A layer
    carrying ``G`` is a residual block ``x + G φ(W x + b)``.
    """

    W: np.ndarray
    b: np.ndarray
    activation: ActivationSpec | None = None
    G: np.ndarray | None = None

    @property
    def in_width(self) -> int:
        return int(self.W.shape[1])

    @property
    def out_width(self) -> int:
        return self.in_width if self.is_residual else int(self.W.shape[0])

    @property
    def is_residual(self) -> bool:
        return self.G is not None


@dataclass(frozen=True, eq=False)
class DeqParams:
    """``z = φ(W z + U x + bz)``, ``y = Wo z + by``."""

    W: np.ndarray
    U: np.ndarray
    Wo: np.ndarray
    bz: np.ndarray
    by: np.ndarray


@dataclass(frozen=True, eq=False)
class NodeParams:
    """``dz/dt = G φ(W0 z + W1 t + b0) + b1`` integrated from ``z(0) = x`` to ``t_final``."""

    G: np.ndarray
    W0: np.ndarray
    W1: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    t_final: float = 1.0


@dataclass(frozen=True, eq=False)
class SingleResidualParams:
    """``f(x) = H1 x + G1 φ(W1 x + b1)``."""

    H1: np.ndarray
    G1: np.ndarray
    W1: np.ndarray
    b1: np.ndarray


@dataclass(frozen=True, eq=False)
class Model:
    """A validated network.

    Args:
        arch: Architecture
        activation: Activation shared by all nonlinear layers
        layers: Layers (feedforward and residual architectures)
        deq: Parameters of a deep equilibrium model
        node: Parameters of a neural ODE
        single_res: Parameters of a single-layer generalized residual network
    """

    arch: Architecture
    activation: ActivationSpec | None = None
    layers: tuple[Layer, ...] = ()
    deq: DeqParams | None = None
    node: NodeParams | None = None
    single_res: SingleResidualParams | None = None
    name: str = field(default="model", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "arch", Architecture(self.arch))
        object.__setattr__(self, "layers", tuple(self.layers))
        _VALIDATORS[self.arch](self)

    @property
    def input_width(self) -> int:
        if self.arch is Architecture.DEQ:
            return int(t.cast(DeqParams, self.deq).U.shape[1])
        if self.arch is Architecture.NODE:
            return int(t.cast(NodeParams, self.node).W0.shape[1])
        if self.arch is Architecture.SINGLE_RESIDUAL:
            return int(t.cast(SingleResidualParams, self.single_res).W1.shape[1])
        return self.layers[0].in_width

    @property
    def output_width(self) -> int:
        if self.arch is Architecture.DEQ:
            return int(t.cast(DeqParams, self.deq).Wo.shape[0])
        if self.arch is Architecture.NODE:
            return self.input_width
        if self.arch is Architecture.SINGLE_RESIDUAL:
            return int(t.cast(SingleResidualParams, self.single_res).H1.shape[0])
        return self.layers[-1].out_width

    @property
    def is_linear(self) -> bool:
        """Whether the network has no activation at all."""
        return self.arch is Architecture.FEEDFORWARD and len(self.layers) == 1

    def select_output(self, label: int) -> Model:
        """Scalar-output model keeping only row ``label`` of the output map.

        Raises:
            ValueError: When the label is out of range.
        """
        if not 0 <= label < self.output_width:
            raise ValueError(f"Label {label} out of range for {self.output_width} outputs")
        rows = slice(label, label + 1)
        if self.arch is Architecture.DEQ:
            deq = t.cast(DeqParams, self.deq)
            return replace(self, deq=replace(deq, Wo=deq.Wo[rows], by=deq.by[rows]))
        if self.arch is Architecture.SINGLE_RESIDUAL:
            p = t.cast(SingleResidualParams, self.single_res)
            return replace(self, single_res=replace(p, H1=p.H1[rows], G1=p.G1[rows]))
        if self.arch is Architecture.FEEDFORWARD or not self.layers[-1].is_residual:
            last = self.layers[-1]
            return replace(
                self, layers=(*self.layers[:-1], replace(last, W=last.W[rows], b=last.b[rows]))
            )
        raise Unsupported(
            f"Cannot select an output of a {self.arch.value} model ending in a residual block"
        )


def _check_vector(v: np.ndarray, size: int, name: str) -> None:
    if v.shape != (size,):
        raise DimensionError(f"{name} must have shape ({size},), got {v.shape}")


def _check_shape(m: np.ndarray, shape: tuple[int, int], name: str) -> None:
    if m.shape != shape:
        raise DimensionError(f"{name} must have shape {shape}, got {m.shape}")


def _check_activation(model: Model, width: int) -> ActivationSpec:
    if model.activation is None:
        raise DimensionError(f"A {model.arch.value} model needs an activation")
    model.activation.check_width(width)
    return model.activation


def _validate_feedforward(model: Model) -> None:
    if not model.layers:
        raise DimensionError("A feedforward model needs at least one layer")
    for i, layer in enumerate(model.layers):
        _check_vector(layer.b, layer.W.shape[0], f"Layer {i} bias")
        if layer.G is not None:
            raise DimensionError(f"Layer {i} of a feedforward model carries a residual G")
        if i and layer.in_width != model.layers[i - 1].out_width:
            raise DimensionError(
                f"Layer {i} expects width {layer.in_width}, previous layer outputs "
                f"{model.layers[i - 1].out_width}"
            )
        final = i == len(model.layers) - 1
        if final and layer.activation is not None:
            raise DimensionError("The final feedforward layer must be affine")
        if not final:
            spec = _check_activation(model, layer.out_width)
            if layer.activation is None:
                raise DimensionError(f"Hidden layer {i} has no activation")
            same = layer.activation.kind is spec.kind
            if not same or layer.activation.group_size != spec.group_size:
                raise DimensionError(f"Hidden layer {i} uses a different activation")


def _validate_residual(model: Model) -> None:
    if not model.layers:
        raise DimensionError("A residual model needs at least one layer")
    for i, layer in enumerate(model.layers):
        _check_vector(layer.b, layer.W.shape[0], f"Layer {i} bias")
        if i and layer.in_width != model.layers[i - 1].out_width:
            raise DimensionError(
                f"Layer {i} expects width {layer.in_width}, previous layer outputs "
                f"{model.layers[i - 1].out_width}"
            )
        if layer.G is not None:
            _check_shape(layer.G, (layer.in_width, layer.W.shape[0]), f"Layer {i} G")
            spec = _check_activation(model, layer.W.shape[0])
            if layer.activation is None or layer.activation.kind is not spec.kind:
                raise DimensionError(f"Residual layer {i} uses a different activation")
        elif layer.activation is not None:
            raise DimensionError(f"Affine layer {i} of a residual model carries an activation")


def _validate_single_residual(model: Model) -> None:
    p = model.single_res
    if p is None:
        raise DimensionError("A single_residual model needs 'single_res' parameters")
    hidden, n = p.W1.shape
    _check_vector(p.b1, hidden, "b1")
    _check_shape(p.G1, (p.H1.shape[0], hidden), "G1")
    _check_shape(p.H1, (p.H1.shape[0], n), "H1")
    _check_activation(model, hidden)


def _validate_deq(model: Model) -> None:
    p = model.deq
    if p is None:
        raise DimensionError("A deq model needs 'deq' parameters")
    d = p.W.shape[0]
    _check_shape(p.W, (d, d), "W")
    _check_shape(p.U, (d, p.U.shape[1]), "U")
    _check_shape(p.Wo, (p.Wo.shape[0], d), "Wo")
    _check_vector(p.bz, d, "bz")
    _check_vector(p.by, p.Wo.shape[0], "by")
    _check_activation(model, d)


def _validate_node(model: Model) -> None:
    p = model.node
    if p is None:
        raise DimensionError("A node model needs 'node' parameters")
    hidden, n = p.W0.shape
    _check_shape(p.G, (n, hidden), "G")
    _check_vector(p.W1, hidden, "W1")
    _check_vector(p.b0, hidden, "b0")
    _check_vector(p.b1, n, "b1")
    if not (math.isfinite(p.t_final) and p.t_final > 0):
        raise ValueError(f"t_final must be a positive number, got {p.t_final!r}")
    _check_activation(model, hidden)


_VALIDATORS: dict[Architecture, t.Callable[[Model], None]] = {
    Architecture.FEEDFORWARD: _validate_feedforward,
    Architecture.RESIDUAL: _validate_residual,
    Architecture.SINGLE_RESIDUAL: _validate_single_residual,
    Architecture.DEQ: _validate_deq,
    Architecture.NODE: _validate_node,
}


# JSON format


def _array(data: t.Any, ndim: int, name: str) -> np.ndarray:
    try:
        arr = np.asarray(data, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ParseError(f"'{name}' is not a numeric array: {e}") from e
    if ndim == 1 and arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr.ravel()
    if arr.ndim != ndim:
        raise DimensionError(f"'{name}' must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"'{name}' has non-finite entries")
    return arr


def _field(data: dict[str, t.Any], key: str, context: str) -> t.Any:
    if not isinstance(data, dict):
        raise ParseError(f"'{context}' must be an object")
    try:
        return data[key]
    except KeyError:
        raise ParseError(f"Missing '{key}' in '{context}'") from None


def _activation_from_dict(data: t.Any) -> ActivationSpec:
    kind_name = _field(data, "kind", "activation")
    try:
        kind = ActivationKind(kind_name)
    except ValueError:
        raise ParseError(f"Unknown activation kind {kind_name!r}") from None
    default_size = {ActivationKind.MAXMIN: 2, ActivationKind.RELU: 1}.get(kind)
    group_size = data.get("group_size", default_size)
    if not isinstance(group_size, int) or isinstance(group_size, bool):
        raise ParseError(f"'group_size' must be an integer, got {group_size!r}")
    v = data.get("v")
    return ActivationSpec(
        kind=kind,
        group_size=group_size,
        householder_v=None if v is None else _array(v, 1, "activation.v"),
    )


def model_from_dict(data: dict[str, t.Any], name: str = "model") -> Model:
    """Build a validated model from its JSON document.

    Raises:
        ParseError: Malformed document
        DimensionError: Inconsistent shapes or group sizes
        ValueError: Non-unit Householder vector or non-finite entries
    """
    arch_name = _field(data, "arch", "model")
    try:
        arch = Architecture(arch_name)
    except ValueError:
        raise ParseError(f"Unknown architecture {arch_name!r}") from None
    activation = _activation_from_dict(data["activation"]) if data.get("activation") else None

    if arch in (Architecture.FEEDFORWARD, Architecture.RESIDUAL):
        raw_layers = _field(data, "layers", "model")
        if not isinstance(raw_layers, list):
            raise ParseError("'layers' must be a list")
        layers = []
        for i, raw in enumerate(raw_layers):
            W = _array(_field(raw, "W", f"layers[{i}]"), 2, f"layers[{i}].W")
            b = _array(raw.get("b", np.zeros(W.shape[0])), 1, f"layers[{i}].b")
            if arch is Architecture.FEEDFORWARD:
                final = i == len(raw_layers) - 1
                if "G" in raw:
                    raise DimensionError(f"Layer {i} of a feedforward model carries a residual G")
                layers.append(Layer(W=W, b=b, activation=None if final else activation))
            elif "G" in raw:
                G = _array(raw["G"], 2, f"layers[{i}].G")
                layers.append(Layer(W=W, b=b, activation=activation, G=G))
            else:
                layers.append(Layer(W=W, b=b))
        return Model(arch=arch, activation=activation, layers=tuple(layers), name=name)

    if arch is Architecture.SINGLE_RESIDUAL:
        raw = _field(data, "single_res", "model")
        params = SingleResidualParams(
            **{
                k: _array(_field(raw, k, "single_res"), 1 if k == "b1" else 2, k)
                for k in ("H1", "G1", "W1", "b1")
            }
        )
        return Model(arch=arch, activation=activation, single_res=params, name=name)

    if arch is Architecture.DEQ:
        raw = _field(data, "deq", "model")
        arrays = {k: _array(_field(raw, k, "deq"), 2, k) for k in ("W", "U", "Wo")}
        arrays.update({k: _array(_field(raw, k, "deq"), 1, k) for k in ("bz", "by")})
        return Model(arch=arch, activation=activation, deq=DeqParams(**arrays), name=name)

    raw = _field(data, "node", "model")
    arrays = {k: _array(_field(raw, k, "node"), 2, k) for k in ("G", "W0")}
    arrays.update({k: _array(_field(raw, k, "node"), 1, k) for k in ("W1", "b0", "b1")})
    t_final = raw.get("t_final", 1.0)
    if not isinstance(t_final, (int, float)) or isinstance(t_final, bool):
        raise ParseError(f"'t_final' must be a number, got {t_final!r}")
    return Model(
        arch=arch,
        activation=activation,
        node=NodeParams(**arrays, t_final=float(t_final)),
        name=name,
    )


def model_to_dict(model: Model) -> dict[str, t.Any]:
    """JSON document of a model, the inverse of :func:`model_from_dict`."""
    data: dict[str, t.Any] = {"arch": model.arch.value}
    if model.activation is not None:
        act: dict[str, t.Any] = {
            "kind": model.activation.kind.value,
            "group_size": model.activation.group_size,
        }
        if model.activation.householder_v is not None:
            act["v"] = model.activation.householder_v.tolist()
        data["activation"] = act
    if model.layers:
        data["layers"] = [
            {"W": layer.W.tolist(), "b": layer.b.tolist()}
            | ({} if layer.G is None else {"G": layer.G.tolist()})
            for layer in model.layers
        ]
    for key in ("deq", "node", "single_res"):
        params = getattr(model, key)
        if params is not None:
            data[key] = {
                k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(params).items()
            }
    return data


def load_model(path: str | Path, log: logging.Logger | None = None) -> Model:
    """Load and validate a model file.

    Args:
        path: JSON model file
        log: [optional] Custom logger; default local logger

    Returns:
        The validated model

    Raises:
        ParseError: The file is not a valid model document
        DimensionError: Inconsistent shapes or group sizes
        ValueError: Non-unit Householder vector or non-finite entries
    """
    path = Path(path)
    (log or DEFAULT_LOGGER).debug("Load model from %s.", path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
    model = model_from_dict(data, name=path.stem)
    (log or DEFAULT_LOGGER).info(
        "Loaded %s model %s: %d inputs, %d outputs.",
        model.arch.value,
        model.name,
        model.input_width,
        model.output_width,
    )
    return model


# Evaluation


def _as_batch(model: Model, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_width:
        raise DimensionError(f"Model expects {model.input_width} inputs, got {x.shape[-1]}")
    single = x.ndim == 1
    return np.atleast_2d(x), single


def _deq_fixed_point(
    model: Model, x: np.ndarray, log: logging.Logger | None = None
) -> np.ndarray:
    p = t.cast(DeqParams, model.deq)
    spec = t.cast(ActivationSpec, model.activation)
    drive = x @ p.U.T + p.bz
    z = np.zeros((x.shape[0], p.W.shape[0]))
    for iteration in range(DEQ_MAX_ITERS):
        residual = apply_activation(spec, z @ p.W.T + drive) - z
        worst = float(np.max(np.linalg.norm(residual, axis=-1), initial=0.0))
        if not math.isfinite(worst):
            raise ConvergenceError(f"DEQ fixed-point iteration diverged after {iteration} steps")
        if worst <= DEQ_TOL:
            (log or DEFAULT_LOGGER).debug("DEQ converged in %d iterations.", iteration)
            return z
        z = z + DEQ_DAMPING * residual
    raise ConvergenceError(
        f"DEQ fixed-point iteration did not converge in {DEQ_MAX_ITERS} iterations"
    )


def _node_flow(model: Model, x: np.ndarray) -> np.ndarray:
    p = t.cast(NodeParams, model.node)
    spec = t.cast(ActivationSpec, model.activation)

    def f(z: np.ndarray, time: float) -> np.ndarray:
        return apply_activation(spec, z @ p.W0.T + time * p.W1 + p.b0) @ p.G.T + p.b1

    z = x.copy()
    steps = max(1, math.ceil(p.t_final / ODE_STEP - 1e-9))
    for k in range(steps):
        time = k * ODE_STEP
        h = min(ODE_STEP, p.t_final - time)
        k1 = f(z, time)
        k2 = f(z + 0.5 * h * k1, time + 0.5 * h)
        k3 = f(z + 0.5 * h * k2, time + 0.5 * h)
        k4 = f(z + h * k3, time + h)
        z = z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return z


def forward(model: Model, x: np.ndarray, log: logging.Logger | None = None) -> np.ndarray:
    """Evaluate the network.

    Args:
        model: Network
        x: Input vector, or a batch of inputs stacked along the first axis
        log: [optional] Custom logger; default local logger

    Returns:
        The output vector (or batch of outputs)

    Raises:
        DimensionError: Wrong input width
        ConvergenceError: The DEQ fixed-point iteration does not converge
    """
    xs, single = _as_batch(model, x)
    if model.arch is Architecture.DEQ:
        p = t.cast(DeqParams, model.deq)
        out = _deq_fixed_point(model, xs, log) @ p.Wo.T + p.by
    elif model.arch is Architecture.NODE:
        out = _node_flow(model, xs)
    elif model.arch is Architecture.SINGLE_RESIDUAL:
        p1 = t.cast(SingleResidualParams, model.single_res)
        spec = t.cast(ActivationSpec, model.activation)
        out = xs @ p1.H1.T + apply_activation(spec, xs @ p1.W1.T + p1.b1) @ p1.G1.T
    else:
        out = xs
        for layer in model.layers:
            u = out @ layer.W.T + layer.b
            if layer.G is not None:
                spec = t.cast(ActivationSpec, layer.activation)
                out = out + apply_activation(spec, u) @ layer.G.T
            elif layer.activation is not None:
                out = apply_activation(layer.activation, u)
            else:
                out = u
    return out[0] if single else out


def jacobian_batch(model: Model, xs: np.ndarray) -> np.ndarray:
    """Exact Jacobians of an explicit network at a batch of points.

    Args:
        model: Feedforward, residual or single-layer residual network
        xs: Points of shape ``(B, n)``

    Returns:
        Jacobians of shape ``(B, m, n)``

    Raises:
        Unsupported: For implicit models
    """
    if model.arch.is_implicit:
        raise Unsupported(f"Exact Jacobians are not available for {model.arch.value} models")
    xs, _ = _as_batch(model, xs)
    batch, n = xs.shape
    if model.arch is Architecture.SINGLE_RESIDUAL:
        p = t.cast(SingleResidualParams, model.single_res)
        spec = t.cast(ActivationSpec, model.activation)
        inner = np.broadcast_to(p.W1, (batch, *p.W1.shape)).copy()
        return p.H1 + p.G1 @ apply_jacobian_factor(spec, xs @ p.W1.T + p.b1, inner)

    J = np.broadcast_to(np.eye(n), (batch, n, n)).copy()
    x = xs
    for layer in model.layers:
        u = x @ layer.W.T + layer.b
        if layer.G is not None:
            spec = t.cast(ActivationSpec, layer.activation)
            J = J + layer.G @ apply_jacobian_factor(spec, u, layer.W @ J)
            x = x + apply_activation(spec, u) @ layer.G.T
        elif layer.activation is not None:
            J = apply_jacobian_factor(layer.activation, u, layer.W @ J)
            x = apply_activation(layer.activation, u)
        else:
            J = layer.W @ J
            x = u
    return J


def finite_difference_jacobian(
    model: Model, x: np.ndarray, step: float = FD_STEP, log: logging.Logger | None = None
) -> np.ndarray:
    """Central finite-difference Jacobian at a single point."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    shifts = step * np.eye(n)
    outputs = forward(model, np.concatenate([x + shifts, x - shifts]), log=log)
    return ((outputs[:n] - outputs[n:]) / (2.0 * step)).T


def jacobian(
    model: Model,
    x: np.ndarray,
    finite_differences: bool = False,
    log: logging.Logger | None = None,
) -> np.ndarray:
    """Jacobian of the network at ``x``.

    Args:
        model: Network
        x: Input point
        finite_differences: [optional] Allow central finite differences for implicit models;
            default False
        log: [optional] Custom logger; default local logger

    Returns:
        The ``(m, n)`` Jacobian matrix

    Raises:
        Unsupported: Implicit model without ``finite_differences``
    """
    x = np.asarray(x, dtype=np.float64)
    if model.arch.is_implicit:
        if not finite_differences:
            raise Unsupported(
                f"{model.arch.value} models only provide finite-difference Jacobians"
            )
        return finite_difference_jacobian(model, x, log=log)
    return jacobian_batch(model, x[None, :])[0]
