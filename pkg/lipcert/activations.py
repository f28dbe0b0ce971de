# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""Gradient norm preserving activations and their Jacobian factors.

GroupSort sorts every contiguous group of ``n_g`` entries in descending order, so that
MaxMin (``n_g = 2``) returns ``[max, min]``. FullSort is GroupSort with a single group.
The Householder activation keeps a group when ``v⊤x > 0`` and reflects it through ``v``
otherwise.

All functions accept a single vector or a batch stacked along the leading axes.
"""

from __future__ import annotations

import enum
import typing as t
from dataclasses import dataclass, field

import numpy as np

from lipcert.constants import HOUSEHOLDER_NORM_TOL
from lipcert.exceptions import DimensionError


class ActivationKind(str, enum.Enum):
    """Supported activation families."""

    RELU = "relu"
    GROUPSORT = "groupsort"
    MAXMIN = "maxmin"
    FULLSORT = "fullsort"
    HOUSEHOLDER = "householder"

    @property
    def is_sorting(self) -> bool:
        return self in (ActivationKind.GROUPSORT, ActivationKind.MAXMIN, ActivationKind.FULLSORT)


@dataclass(frozen=True, eq=False)
class ActivationSpec:
    """Activation applied group-wise to a layer.

    Args:
        kind: Activation family
        group_size: Group size ``n_g``; 2 for MaxMin, the layer width for FullSort
        householder_v: Unit reflection vector of length ``n_g`` (Householder only)
    """

    kind: ActivationKind
    group_size: int = 1
    householder_v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        kind = ActivationKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.group_size < 1:
            raise ValueError(f"Group size must be positive, got {self.group_size}")
        if kind is ActivationKind.MAXMIN and self.group_size != 2:
            raise ValueError(f"MaxMin requires a group size of 2, got {self.group_size}")
        if kind is ActivationKind.HOUSEHOLDER:
            if self.householder_v is None:
                raise ValueError("Householder activation requires a reflection vector v")
            v = np.asarray(self.householder_v, dtype=np.float64)
            object.__setattr__(self, "householder_v", v)
            _check_unit_vector(v, self.group_size)
        elif self.householder_v is not None:
            raise ValueError(f"Reflection vector given for a {kind.value} activation")

    def check_width(self, width: int) -> None:
        """Check that the activation can be applied to ``width`` preactivations.

        Raises:
            DimensionError: When the group size does not divide the width, or when a
                FullSort group does not span the whole layer.
        """
        if width % self.group_size:
            raise DimensionError(
                f"Group size {self.group_size} does not divide the layer width {width}"
            )
        if self.kind is ActivationKind.FULLSORT and self.group_size != width:
            raise DimensionError(
                f"FullSort group size {self.group_size} differs from the layer width {width}"
            )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return apply_activation(self, x)


def _check_unit_vector(v: np.ndarray, n_g: int) -> None:
    if v.shape != (n_g,):
        raise DimensionError(f"Reflection vector must have length {n_g}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("Reflection vector has non-finite entries")
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > HOUSEHOLDER_NORM_TOL:
        raise ValueError(f"Reflection vector must have unit norm, got {norm!r}")


def _groups(x: np.ndarray, n_g: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % n_g:
        raise DimensionError(f"Group size {n_g} does not divide the width {x.shape[-1]}")
    return x.reshape(*x.shape[:-1], x.shape[-1] // n_g, n_g)


def groupsort(x: np.ndarray, n_g: int) -> np.ndarray:
    """Sort every contiguous group of ``n_g`` entries in descending order.

    Args:
        x: Preactivations, width a multiple of ``n_g``
        n_g: Group size

    Returns:
        The sorted vector, same shape as ``x``
    """
    xg = _groups(x, n_g)
    return -np.sort(-xg, axis=-1).reshape(np.shape(x))


def groupsort_permutation(x: np.ndarray, n_g: int) -> np.ndarray:
    """Global source index of every output entry of :func:`groupsort`.

    Ties keep the original index order (stable sort).
    """
    xg = _groups(x, n_g)
    local = np.argsort(-xg, axis=-1, kind="stable")
    offsets = np.arange(xg.shape[-2])[:, None] * n_g
    return (local + offsets).reshape(np.shape(x))


def householder(x: np.ndarray, n_g: int, v: np.ndarray) -> np.ndarray:
    """Householder activation.

    Args:
        x: Preactivations, width a multiple of ``n_g``
        n_g: Group size
        v: Unit vector of length ``n_g``

    Returns:
        ``x_g`` for groups with ``v⊤x_g > 0`` and ``(I - 2vv⊤)x_g`` otherwise
    """
    v = np.asarray(v, dtype=np.float64)
    _check_unit_vector(v, n_g)
    xg = _groups(x, n_g)
    proj = xg @ v
    reflected = xg - 2.0 * proj[..., None] * v
    out = np.where((proj > 0)[..., None], xg, reflected)
    return out.reshape(np.shape(x))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def apply_activation(spec: ActivationSpec, x: np.ndarray) -> np.ndarray:
    """Evaluate an activation on a vector or a batch of vectors."""
    if spec.kind is ActivationKind.RELU:
        return relu(x)
    if spec.kind is ActivationKind.HOUSEHOLDER:
        return householder(x, spec.group_size, t.cast(np.ndarray, spec.householder_v))
    return groupsort(x, spec.group_size)


def apply_jacobian_factor(spec: ActivationSpec, u: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Left-multiply ``m`` by the activation Jacobian evaluated at ``u``.

    Args:
        spec: Activation
        u: Preactivations of shape ``(B, n)``
        m: Matrices of shape ``(B, n, k)``

    Returns:
        ``D(u) @ m`` for every batch entry, shape ``(B, n, k)``
    """
    if spec.kind is ActivationKind.RELU:
        return m * (u > 0)[..., None]
    if spec.kind is ActivationKind.HOUSEHOLDER:
        v = t.cast(np.ndarray, spec.householder_v)
        n_g = spec.group_size
        b, n, k = m.shape
        mg = m.reshape(b, n // n_g, n_g, k)
        reflect = (_groups(u, n_g) @ v) <= 0
        proj = np.einsum("j,bgjk->bgk", v, mg)
        update = 2.0 * v[None, None, :, None] * proj[:, :, None, :]
        return (mg - reflect[:, :, None, None] * update).reshape(b, n, k)
    perm = groupsort_permutation(u, spec.group_size)
    return np.take_along_axis(m, perm[..., None], axis=1)


def jacobian_factor(spec: ActivationSpec, u: np.ndarray) -> np.ndarray:
    """Activation Jacobian at a single point ``u``.

    Block permutation for GroupSort, ``I`` or ``I - 2vv⊤`` per group for Householder and a
    0/1 diagonal for ReLU (the derivative at 0 is taken as 0).
    """
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[-1]
    return apply_jacobian_factor(spec, u[None, :], np.eye(n)[None, :, :])[0]


@dataclass(frozen=True, eq=False)
class ResidualReluRewrite:
    """MaxMin written as ``H x + G ReLU(W x)``."""

    H: np.ndarray
    G: np.ndarray
    W: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.H.T + relu(x @ self.W.T) @ self.G.T


_REWRITE_H = np.array([[0.0, 1.0], [0.0, 1.0]])
_REWRITE_G = np.diag([1.0, -1.0])
_REWRITE_W = np.array([[1.0, -1.0], [-1.0, 1.0]])


def maxmin_to_residual_relu(width: int) -> ResidualReluRewrite:
    """Block-diagonal residual ReLU network equal to MaxMin on ``width`` entries.

    Raises:
        DimensionError: When the width is odd.
    """
    if width < 2 or width % 2:
        raise DimensionError(f"MaxMin rewrite requires an even width, got {width}")
    eye = np.eye(width // 2)
    return ResidualReluRewrite(
        H=np.kron(eye, _REWRITE_H), G=np.kron(eye, _REWRITE_G), W=np.kron(eye, _REWRITE_W)
    )
