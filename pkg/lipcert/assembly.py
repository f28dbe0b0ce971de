# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""Semidefinite programs certifying Lipschitz bounds.

Every problem minimizes ``c⊤z`` over a shared decision vector ``z`` subject to a list of
affine blocks ``F0 + Σ_k z_k F_k ⪯ 0``. Sign constraints on multipliers are gathered in a
single diagonal block.
"""

from __future__ import annotations

import enum
import logging
import math
import typing as t
from dataclasses import dataclass, field

import numpy as np

from lipcert.activations import ActivationKind, ActivationSpec, maxmin_to_residual_relu
from lipcert.constants import DEFAULT_LOGGER, DEQ_PI_MARGIN, DEQ_WELLPOSED_MARGIN
from lipcert.exceptions import DimensionError, PreconditionError, Unsupported
from lipcert.model import Architecture, DeqParams, Model, NodeParams, SingleResidualParams
from lipcert.qc import MultiplierParams, TspMatrices, build_tsp, qc_block, qc_slope_restricted

if t.TYPE_CHECKING:
    from lipcert.solver import SolveResult

SYMMETRY_TOL = 1e-12
"""Largest asymmetry accepted in block matrices."""


class BoundSemantics(str, enum.Enum):
    """How the optimal ``ρ`` translates into a Lipschitz bound."""

    RHO = "rho"
    SQRT_RHO_L2 = "sqrt_rho_l2"
    RHO_LINF_L1 = "rho_linf_l1"
    SQRT_RHO_L2_RESIDUAL = "sqrt_rho_l2_residual"
    SQRT_RHO_L2_DEQ = "sqrt_rho_l2_deq"
    EXP_HALF_RHO_L2_NODE = "exp_half_rho_l2_node"
    FEASIBILITY = "feasibility"

    @property
    def norm(self) -> str:
        return "linf" if self is BoundSemantics.RHO_LINF_L1 else "l2"

    def transform(self, rho: float, horizon: float = 1.0) -> float:
        """Lipschitz bound certified by ``ρ``; NaN for feasibility problems."""
        if self is BoundSemantics.FEASIBILITY or not math.isfinite(rho):
            return math.nan
        if self in (BoundSemantics.RHO, BoundSemantics.RHO_LINF_L1):
            return rho
        if self is BoundSemantics.EXP_HALF_RHO_L2_NODE:
            return math.exp(0.5 * rho * horizon)
        return math.sqrt(max(rho, 0.0))


class MultiplierClass(str, enum.Enum):
    """Multiplier parameterizations, from most accurate to cheapest.

    ``neuron2`` uses ``(λ, γ)`` per group, ``neuron1`` only ``λ`` per group, ``layer2`` one
    shared ``(λ, γ)`` per layer and ``layer1`` one ``λ`` per layer.
    """

    NEURON2 = "neuron2"
    NEURON1 = "neuron1"
    LAYER2 = "layer2"
    LAYER1 = "layer1"

    @property
    def per_group(self) -> bool:
        return self in (MultiplierClass.NEURON2, MultiplierClass.NEURON1)

    @property
    def with_gamma(self) -> bool:
        return self in (MultiplierClass.NEURON2, MultiplierClass.LAYER2)


@dataclass(frozen=True, eq=False)
class AffineLmiBlock:
    """Block constraint ``F0 + Σ_k z_k F_k ⪯ 0``.

    ``diagonal`` blocks only carry diagonal matrices and are handled elementwise.
    """

    size: int
    F0: np.ndarray
    terms: tuple[tuple[int, np.ndarray], ...]
    diagonal: bool = False
    label: str = ""

    def __post_init__(self) -> None:
        if self.size < 1:
            raise DimensionError(f"Block size must be positive, got {self.size}")
        for index, matrix in ((-1, self.F0), *self.terms):
            if matrix.shape != (self.size, self.size):
                raise DimensionError(
                    f"Block {self.label!r} expects {self.size}x{self.size} matrices, "
                    f"variable {index} has shape {matrix.shape}"
                )
            if np.max(np.abs(matrix - matrix.T), initial=0.0) > SYMMETRY_TOL:
                raise ValueError(
                    f"Block {self.label!r} has an asymmetric matrix for variable {index}"
                )

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        """``F0 + Σ_k z_k F_k``."""
        out = self.F0.copy()
        for index, matrix in self.terms:
            out += z[index] * matrix
        return out


@dataclass(frozen=True, eq=False)
class SdpProblem:
    """Minimize ``c⊤z`` subject to every block."""

    num_vars: int
    objective: np.ndarray
    blocks: tuple[AffineLmiBlock, ...]
    var_names: tuple[str, ...]
    bound_semantics: BoundSemantics
    rho_index: int | None = None
    horizon: float = 1.0
    name: str = "sdp"

    def __post_init__(self) -> None:
        object.__setattr__(self, "objective", np.asarray(self.objective, dtype=np.float64))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.objective.shape != (self.num_vars,):
            raise DimensionError(
                f"Objective must have {self.num_vars} entries, got {self.objective.shape}"
            )
        if len(self.var_names) != self.num_vars:
            raise DimensionError(
                f"Expected {self.num_vars} variable names, got {len(self.var_names)}"
            )
        for block in self.blocks:
            for index, _ in block.terms:
                if not 0 <= index < self.num_vars:
                    raise DimensionError(f"Block {block.label!r} references variable {index}")

    @property
    def total_size(self) -> int:
        return sum(block.size for block in self.blocks)

    def evaluate(self, z: np.ndarray) -> list[np.ndarray]:
        return [block.evaluate(z) for block in self.blocks]

    def rho(self, z: np.ndarray) -> float:
        return math.nan if self.rho_index is None else float(z[self.rho_index])

    def lipschitz_bound(self, rho: float) -> float:
        return self.bound_semantics.transform(rho, self.horizon)


class AffineMatrix:
    """Matrix affine in the decision vector: ``constant + Σ_k z_k terms[k]``."""

    __array_ufunc__ = None

    def __init__(self, constant: np.ndarray, terms: dict[int, np.ndarray] | None = None):
        self.constant = np.asarray(constant, dtype=np.float64)
        self.terms = dict(terms or {})

    @classmethod
    def variable(cls, index: int, coefficient: np.ndarray) -> AffineMatrix:
        coefficient = np.asarray(coefficient, dtype=np.float64)
        return cls(np.zeros_like(coefficient), {index: coefficient})

    @classmethod
    def combination(
        cls, shape: tuple[int, int], terms: t.Iterable[tuple[int, np.ndarray]]
    ) -> AffineMatrix:
        out = cls(np.zeros(shape))
        for index, coefficient in terms:
            out = out + cls.variable(index, coefficient)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.constant.shape

    @staticmethod
    def lift(value: AffineMatrix | np.ndarray) -> AffineMatrix:
        return value if isinstance(value, AffineMatrix) else AffineMatrix(value)

    def __add__(self, other: AffineMatrix | np.ndarray) -> AffineMatrix:
        other = self.lift(other)
        terms = dict(self.terms)
        for index, coefficient in other.terms.items():
            terms[index] = terms[index] + coefficient if index in terms else coefficient
        return AffineMatrix(self.constant + other.constant, terms)

    __radd__ = __add__

    def __neg__(self) -> AffineMatrix:
        return AffineMatrix(-self.constant, {k: -v for k, v in self.terms.items()})

    def __sub__(self, other: AffineMatrix | np.ndarray) -> AffineMatrix:
        return self + (-self.lift(other))

    def __rsub__(self, other: AffineMatrix | np.ndarray) -> AffineMatrix:
        return self.lift(other) - self

    def __mul__(self, scalar: float) -> AffineMatrix:
        return AffineMatrix(scalar * self.constant, {k: scalar * v for k, v in self.terms.items()})

    __rmul__ = __mul__

    def congruence(self, A: np.ndarray) -> AffineMatrix:
        """``A⊤ M A``."""
        terms = {k: A.T @ v @ A for k, v in self.terms.items()}
        return AffineMatrix(A.T @ self.constant @ A, terms)

    @property
    def T(self) -> AffineMatrix:  # noqa: N802
        return AffineMatrix(self.constant.T, {k: v.T for k, v in self.terms.items()})

    @classmethod
    def block(cls, rows: list[list[AffineMatrix | np.ndarray | None]]) -> AffineMatrix:
        """Assemble a block matrix; ``None`` entries are zero blocks."""
        lifted = [[None if e is None else cls.lift(e) for e in row] for row in rows]
        heights = [next(e.shape[0] for e in row if e is not None) for row in lifted]
        widths = [
            next(row[j].shape[1] for row in lifted if row[j] is not None)
            for j in range(len(lifted[0]))
        ]
        indices = sorted({k for row in lifted for e in row if e is not None for k in e.terms})

        def component(pick: t.Callable[[AffineMatrix], np.ndarray | None]) -> np.ndarray:
            grid = []
            for i, row in enumerate(lifted):
                cells = []
                for j, entry in enumerate(row):
                    value = None if entry is None else pick(entry)
                    cells.append(np.zeros((heights[i], widths[j])) if value is None else value)
                grid.append(cells)
            return np.block(grid)

        return cls(
            component(lambda e: e.constant),
            {k: component(lambda e, k=k: e.terms.get(k)) for k in indices},
        )

    def to_block(self, label: str = "", diagonal: bool = False) -> AffineLmiBlock:
        def sym(m: np.ndarray) -> np.ndarray:
            return 0.5 * (m + m.T)

        return AffineLmiBlock(
            size=self.constant.shape[0],
            F0=sym(self.constant),
            terms=tuple((k, sym(v)) for k, v in sorted(self.terms.items()) if np.any(v)),
            diagonal=diagonal,
            label=label,
        )


class ProblemBuilder:
    """Collects variables, sign constraints and blocks of one problem."""

    def __init__(self, name: str):
        self.name = name
        self.var_names: list[str] = []
        self.blocks: list[AffineLmiBlock] = []
        self._nonneg: list[int] = []

    def variable(self, name: str, nonneg: bool = False) -> int:
        self.var_names.append(name)
        index = len(self.var_names) - 1
        if nonneg:
            self._nonneg.append(index)
        return index

    def add(self, matrix: AffineMatrix, label: str) -> None:
        """Add the constraint ``matrix ⪯ 0``."""
        self.blocks.append(matrix.to_block(label))

    def build(
        self,
        semantics: BoundSemantics,
        rho_index: int | None,
        horizon: float = 1.0,
        log: logging.Logger | None = None,
    ) -> SdpProblem:
        blocks = list(self.blocks)
        if self._nonneg:
            size = len(self._nonneg)
            terms = []
            for row, index in enumerate(self._nonneg):
                coefficient = np.zeros((size, size))
                coefficient[row, row] = -1.0
                terms.append((index, coefficient))
            blocks.append(
                AffineLmiBlock(
                    size, np.zeros((size, size)), tuple(terms), diagonal=True, label="sign"
                )
            )
        objective = np.zeros(len(self.var_names))
        if rho_index is not None:
            objective[rho_index] = 1.0
        problem = SdpProblem(
            num_vars=len(self.var_names),
            objective=objective,
            blocks=tuple(blocks),
            var_names=tuple(self.var_names),
            bound_semantics=semantics,
            rho_index=rho_index,
            horizon=horizon,
            name=self.name,
        )
        (log or DEFAULT_LOGGER).info(
            "Assembled %s: %d variables, %d blocks of total size %d.",
            problem.name,
            problem.num_vars,
            len(problem.blocks),
            problem.total_size,
        )
        return problem


# Multipliers


@dataclass
class LayerMultipliers:
    """Affine ``T`` and quadratic-constraint matrix ``X`` of one activation layer."""

    T: AffineMatrix
    X: AffineMatrix
    indices: list[int] = field(default_factory=list)


def _unit_tsp(
    activation: ActivationSpec, groups: int, name: str, weights: np.ndarray
) -> TspMatrices:
    vectors = {key: np.zeros(groups) for key in ("lam", "gamma", "nu", "tau")}
    vectors[name] = weights
    return build_tsp(
        MultiplierParams(
            **vectors, group_size=activation.group_size, householder_v=activation.householder_v
        )
    )


def layer_multipliers(
    builder: ProblemBuilder,
    tag: str,
    activation: ActivationSpec,
    width: int,
    mclass: MultiplierClass = MultiplierClass.NEURON2,
    with_s: bool = False,
    with_p: bool = False,
) -> LayerMultipliers:
    """Register the multipliers of one GroupSort or Householder layer.

    Args:
        builder: Problem under construction
        tag: Layer tag used in variable names
        activation: Layer activation
        width: Layer width
        mclass: [optional] Multiplier class; default neuron2
        with_s: [optional] Free ``S`` multipliers (``τ``); default False
        with_p: [optional] Free ``P`` multipliers (``ν``); default False
    """
    groups = width // activation.group_size
    families = [("lam", "lambda", True)]
    if mclass.with_gamma:
        families.append(("gamma", "gamma", False))
    if with_p:
        families.append(("nu", "nu", False))
    if with_s:
        families.append(("tau", "tau", False))
    terms: list[tuple[int, TspMatrices]] = []
    for key, label, nonneg in families:
        if mclass.per_group:
            for g in range(groups):
                weights = np.zeros(groups)
                weights[g] = 1.0
                index = builder.variable(f"{label}[{tag}][{g}]", nonneg=nonneg)
                terms.append((index, _unit_tsp(activation, groups, key, weights)))
        else:
            index = builder.variable(f"{label}[{tag}]", nonneg=nonneg)
            terms.append((index, _unit_tsp(activation, groups, key, np.ones(groups))))
    size = (2 * width, 2 * width)
    return LayerMultipliers(
        T=AffineMatrix.combination((width, width), ((k, tsp.T) for k, tsp in terms)),
        X=AffineMatrix.combination(size, ((k, qc_block(tsp).X) for k, tsp in terms)),
        indices=[k for k, _ in terms],
    )


def slope_restricted_multipliers(
    builder: ProblemBuilder, tag: str, width: int
) -> LayerMultipliers:
    """Diagonal ``T ⪰ 0`` with the ``[0, 1]`` slope-restricted constraint."""
    terms = []
    for j in range(width):
        unit = np.zeros((width, width))
        unit[j, j] = 1.0
        terms.append((builder.variable(f"t[{tag}][{j}]", nonneg=True), unit))
    size = (2 * width, 2 * width)
    return LayerMultipliers(
        T=AffineMatrix.combination((width, width), terms),
        X=AffineMatrix.combination(size, ((k, qc_slope_restricted(u).X) for k, u in terms)),
        indices=[k for k, _ in terms],
    )


# Residual chain


@dataclass(frozen=True, eq=False)
class ChainLayer:
    """``x⁺ = H x + G w`` with ``w = φ(W x + b)``.

    Affine layers have no ``G``; a missing ``H`` is zero.
    """

    H: np.ndarray | None
    G: np.ndarray | None = None
    W: np.ndarray | None = None
    multipliers: LayerMultipliers | None = None


def chain_lmi(rho_index: int, n0: int, layers: t.Sequence[ChainLayer]) -> AffineMatrix:
    """Dense LMI certifying ``‖Δx_L‖² ≤ ρ ‖Δx_0‖²`` for a chain of layers.

    Over ``ξ = [Δx_0; Δw_1; …]`` with ``C_i ξ = Δx_i`` this is

        Σ_i [W_i C_{i-1}; E_i]⊤ X_i [W_i C_{i-1}; E_i] + C_L⊤ C_L - ρ E_0⊤ E_0 ⪯ 0.
    """
    dim = n0 + sum(
        t.cast(np.ndarray, layer.W).shape[0] for layer in layers if layer.G is not None
    )
    basis = np.eye(dim)
    C = basis[:n0]
    total = AffineMatrix(np.zeros((dim, dim)))
    offset = n0
    for layer in layers:
        if layer.G is None:
            C = t.cast(np.ndarray, layer.H) @ C
            continue
        W = t.cast(np.ndarray, layer.W)
        E = basis[offset : offset + W.shape[0]]
        offset += W.shape[0]
        X = t.cast(LayerMultipliers, layer.multipliers).X
        total = total + X.congruence(np.vstack([W @ C, E]))
        C = layer.G @ E if layer.H is None else layer.H @ C + layer.G @ E
    E0 = basis[:n0]
    return total + C.T @ C - AffineMatrix.variable(rho_index, E0.T @ E0)


# Checks


def _nsr_activation(model: Model) -> ActivationSpec:
    activation = model.activation
    if activation is None:
        raise Unsupported(f"Model {model.name} has no activation")
    if activation.kind is ActivationKind.RELU:
        raise Unsupported("ReLU is slope-restricted; certify it with assemble_rr")
    return activation


def _require(model: Model, *archs: Architecture) -> None:
    if model.arch not in archs:
        names = ", ".join(a.value for a in archs)
        raise Unsupported(f"Expected a {names} model, got {model.arch.value}")


# Feedforward


def assemble_l2_feedforward(
    model: Model,
    mclass: MultiplierClass = MultiplierClass.NEURON2,
    decomposed: bool = True,
    zero_sp: bool = False,
    log: logging.Logger | None = None,
) -> SdpProblem:
    """ℓ2 Lipschitz SDP of a feedforward GroupSort or Householder network.

    The decomposed form uses ``S = P = 0`` and one block per layer::

        W_1⊤ T_1 W_1 - ρ I ⪯ 0,   W_i⊤ T_i W_i - T_{i-1} ⪯ 0,   W_l⊤ W_l - T_{l-1} ⪯ 0.

    The dense form is a single block with free ``S`` and ``P``. With ``S = P = 0`` it is
    block diagonal and its blocks are the decomposed ones.

    Args:
        model: Feedforward network
        mclass: [optional] Multiplier class; default neuron2
        decomposed: [optional] Layer-wise blocks instead of the dense LMI; default True
        zero_sp: [optional] Fix ``S = P = 0`` in the dense LMI; default False
        log: [optional] Custom logger; default local logger

    Returns:
        Problem minimizing ``ρ``; the bound is ``√ρ``
    """
    _require(model, Architecture.FEEDFORWARD)
    layers = model.layers
    activation = _nsr_activation(model) if len(layers) > 1 else model.activation
    mclass = MultiplierClass(mclass)
    form = "decomposed" if decomposed else "dense"
    builder = ProblemBuilder(f"{model.name}: l2 feedforward ({form}, {mclass.value})")
    rho = builder.variable("rho")
    hidden = [
        layer_multipliers(
            builder,
            str(i + 1),
            t.cast(ActivationSpec, activation),
            layer.out_width,
            mclass,
            with_s=not (decomposed or zero_sp),
            with_p=not (decomposed or zero_sp),
        )
        for i, layer in enumerate(layers[:-1])
    ]
    if decomposed:
        previous: AffineMatrix = AffineMatrix.variable(rho, np.eye(model.input_width))
        for i, (layer, mult) in enumerate(zip(layers[:-1], hidden)):
            builder.add(mult.T.congruence(layer.W) - previous, f"layer {i + 1}")
            previous = mult.T
        last = layers[-1].W
        builder.add(last.T @ last - previous, f"layer {len(layers)}")
    else:
        chain = [
            ChainLayer(H=None, G=np.eye(layer.out_width), W=layer.W, multipliers=mult)
            for layer, mult in zip(layers[:-1], hidden)
        ]
        chain.append(ChainLayer(H=layers[-1].W))
        builder.add(chain_lmi(rho, model.input_width, chain), "dense")
    return builder.build(BoundSemantics.SQRT_RHO_L2, rho, log=log)


def assemble_linf(
    model: Model,
    label: int,
    mclass: MultiplierClass = MultiplierClass.NEURON2,
    log: logging.Logger | None = None,
) -> SdpProblem:
    """ℓ∞→ℓ1 Lipschitz SDP of output ``label`` of a feedforward network.

    Decoupled conditions with ``T_0 = diag(μ)``, ``μ ≥ 0``::

        T_{i-1} - W_i⊤ T_i W_i ⪰ 0,   [[T_{l-1}, w⊤], [w, 2ρ - Σμ]] ⪰ 0.

    Returns:
        Problem minimizing ``ρ``; the bound is ``ρ`` itself

    Raises:
        ValueError: Label out of range
    """
    _require(model, Architecture.FEEDFORWARD)
    scalar = model.select_output(label)
    layers = scalar.layers
    activation = _nsr_activation(model) if len(layers) > 1 else None
    mclass = MultiplierClass(mclass)
    builder = ProblemBuilder(f"{model.name}: linf label {label} ({mclass.value})")
    rho = builder.variable("rho")
    n0 = model.input_width
    mu = [builder.variable(f"mu[{j}]", nonneg=True) for j in range(n0)]
    units = []
    for j in range(n0):
        unit = np.zeros((n0, n0))
        unit[j, j] = 1.0
        units.append((mu[j], unit))
    previous = AffineMatrix.combination((n0, n0), units)
    for i, layer in enumerate(layers[:-1]):
        mult = layer_multipliers(
            builder, str(i + 1), t.cast(ActivationSpec, activation), layer.out_width, mclass
        )
        builder.add(mult.T.congruence(layer.W) - previous, f"layer {i + 1}")
        previous = mult.T
    w = layers[-1].W
    corner = 2.0 * AffineMatrix.variable(rho, np.ones((1, 1))) - AffineMatrix.combination(
        (1, 1), ((k, np.ones((1, 1))) for k in mu)
    )
    builder.add(-AffineMatrix.block([[previous, w.T], [w, corner]]), "output")
    return builder.build(BoundSemantics.RHO_LINF_L1, rho, log=log)


# Residual


def assemble_l2_residual(
    model: Model,
    zero_s: bool = True,
    zero_p: bool = False,
    log: logging.Logger | None = None,
) -> SdpProblem:
    """ℓ2 Lipschitz SDP of a residual network as one dense LMI.

    Residual blocks ``x + G φ(W x + b)`` and affine layers are chained exactly; a
    single-layer model ``H x + G φ(W x + b)`` is one chain layer.

    Args:
        model: Residual or single-layer residual network
        zero_s: [optional] Fix ``S = 0``; default True
        zero_p: [optional] Fix ``P = 0``; default False
        log: [optional] Custom logger; default local logger

    Raises:
        ValueError: Both ``S`` and ``P`` fixed to zero for a multi-layer residual model
    """
    _require(model, Architecture.RESIDUAL, Architecture.SINGLE_RESIDUAL)
    if model.arch is Architecture.RESIDUAL and zero_s and zero_p:
        raise ValueError("Residual networks need S or P free; zero_s and zero_p are exclusive")
    activation = _nsr_activation(model)
    fixed = ", ".join(name for name, zero in (("S=0", zero_s), ("P=0", zero_p)) if zero)
    builder = ProblemBuilder(f"{model.name}: l2 residual ({fixed or 'S, P free'})")
    rho = builder.variable("rho")
    chain: list[ChainLayer] = []
    if model.arch is Architecture.SINGLE_RESIDUAL:
        p = t.cast(SingleResidualParams, model.single_res)
        mult = layer_multipliers(
            builder, "1", activation, p.W1.shape[0], with_s=not zero_s, with_p=not zero_p
        )
        chain.append(ChainLayer(H=p.H1, G=p.G1, W=p.W1, multipliers=mult))
    else:
        for i, layer in enumerate(model.layers):
            if layer.G is None:
                chain.append(ChainLayer(H=layer.W))
                continue
            mult = layer_multipliers(
                builder,
                str(i + 1),
                activation,
                layer.W.shape[0],
                with_s=not zero_s,
                with_p=not zero_p,
            )
            identity = np.eye(layer.in_width)
            chain.append(ChainLayer(H=identity, G=layer.G, W=layer.W, multipliers=mult))
    builder.add(chain_lmi(rho, model.input_width, chain), "residual")
    return builder.build(BoundSemantics.SQRT_RHO_L2_RESIDUAL, rho, log=log)


def assemble_rr(model: Model, log: logging.Logger | None = None) -> SdpProblem:
    """Residual-ReLU baseline: MaxMin rewritten as ``H x + G ReLU(W x)`` with slope-restricted QCs.

    Raises:
        Unsupported: Non-MaxMin activations or a network without activation
    """
    activation = model.activation
    if (
        model.is_linear
        or activation is None
        or not activation.kind.is_sorting
        or activation.group_size != 2
    ):
        raise Unsupported("The residual-ReLU baseline requires MaxMin activations")
    _require(model, Architecture.FEEDFORWARD, Architecture.RESIDUAL, Architecture.SINGLE_RESIDUAL)
    builder = ProblemBuilder(f"{model.name}: residual ReLU rewrite")
    rho = builder.variable("rho")
    chain: list[ChainLayer] = []

    def rewrite(tag: str, H: np.ndarray | None, G: np.ndarray, W: np.ndarray) -> ChainLayer:
        # x⁺ = H x + G MaxMin(W x) = (H + G H_mm W) x + G G_mm ReLU(W_mm W x)
        mm = maxmin_to_residual_relu(W.shape[0])
        through = G @ mm.H @ W
        return ChainLayer(
            H=through if H is None else H + through,
            G=G @ mm.G,
            W=mm.W @ W,
            multipliers=slope_restricted_multipliers(builder, tag, W.shape[0]),
        )

    if model.arch is Architecture.SINGLE_RESIDUAL:
        p = t.cast(SingleResidualParams, model.single_res)
        chain.append(rewrite("1", p.H1, p.G1, p.W1))
    else:
        for i, layer in enumerate(model.layers):
            if layer.G is not None:
                chain.append(rewrite(str(i + 1), np.eye(layer.in_width), layer.G, layer.W))
            elif layer.activation is not None:
                chain.append(rewrite(str(i + 1), None, np.eye(layer.out_width), layer.W))
            else:
                chain.append(ChainLayer(H=layer.W))
    builder.add(chain_lmi(rho, model.input_width, chain), "rr")
    return builder.build(BoundSemantics.SQRT_RHO_L2, rho, log=log)


# Implicit models


def _symmetric_variable(builder: ProblemBuilder, name: str, size: int) -> AffineMatrix:
    terms = []
    for i in range(size):
        for j in range(i, size):
            unit = np.zeros((size, size))
            unit[i, j] = unit[j, i] = 1.0
            terms.append((builder.variable(f"{name}[{i},{j}]"), unit))
    return AffineMatrix.combination((size, size), terms)


def assemble_deq_wellposed(model: Model, log: logging.Logger | None = None) -> SdpProblem:
    """Feasibility SDP certifying that the DEQ fixed point exists and is unique.

    ``[[-2Π, Π], [Π, 0]] + [W 0; 0 I]⊤ X [W 0; 0 I] ⪯ -δ I`` with ``Π ⪰ ε I``.
    """
    _require(model, Architecture.DEQ)
    activation = _nsr_activation(model)
    p = t.cast(DeqParams, model.deq)
    d = p.W.shape[0]
    builder = ProblemBuilder(f"{model.name}: deq well-posedness")
    pi = _symmetric_variable(builder, "pi", d)
    mult = layer_multipliers(builder, "z", activation, d, with_s=True, with_p=True)
    lift = np.block([[p.W, np.zeros((d, d))], [np.zeros((d, d)), np.eye(d)]])
    contraction = AffineMatrix.block([[-2.0 * pi, pi], [pi, None]])
    builder.add(
        contraction + mult.X.congruence(lift) + DEQ_WELLPOSED_MARGIN * np.eye(2 * d), "contraction"
    )
    builder.add(DEQ_PI_MARGIN * np.eye(d) - pi, "pi")
    return builder.build(BoundSemantics.FEASIBILITY, None, log=log)


def assemble_deq_lipschitz(
    model: Model,
    certificate: SolveResult | None = None,
    waive_wellposedness: bool = False,
    log: logging.Logger | None = None,
) -> SdpProblem:
    """ℓ2 Lipschitz SDP from DEQ input ``x`` to output ``y``.

    ``[[Wo⊤Wo, 0], [0, -ρI]] + [W U; I 0]⊤ X [W U; I 0] ⪯ 0``.

    Args:
        model: Deep equilibrium model
        certificate: [optional] Solved well-posedness problem
        waive_wellposedness: [optional] Skip the well-posedness requirement; default False
        log: [optional] Custom logger; default local logger

    Raises:
        PreconditionError: Well-posedness is neither certified nor waived
    """
    _require(model, Architecture.DEQ)
    if not waive_wellposedness and (certificate is None or not certificate.is_optimal):
        raise PreconditionError(
            f"DEQ {model.name} is not certified well-posed; solve assemble_deq_wellposed first"
        )
    activation = _nsr_activation(model)
    p = t.cast(DeqParams, model.deq)
    d, n = p.U.shape
    builder = ProblemBuilder(f"{model.name}: deq lipschitz")
    rho = builder.variable("rho")
    mult = layer_multipliers(builder, "z", activation, d, with_s=True, with_p=True)
    lift = np.block([[p.W, p.U], [np.eye(d), np.zeros((d, n))]])
    output = AffineMatrix.block(
        [[p.Wo.T @ p.Wo, None], [None, -AffineMatrix.variable(rho, np.eye(n))]]
    )
    builder.add(output + mult.X.congruence(lift), "lipschitz")
    return builder.build(BoundSemantics.SQRT_RHO_L2_DEQ, rho, log=log)


def assemble_node_lipschitz(model: Model, log: logging.Logger | None = None) -> SdpProblem:
    """ℓ2 Lipschitz SDP of a neural ODE flow map.

    ``[[-ρI, G], [G⊤, 0]] + [W0 0; 0 I]⊤ X [W0 0; 0 I] ⪯ 0``; ``ρ`` is free and the flow
    map over ``[0, t_final]`` is ``exp(ρ t_final / 2)``-Lipschitz.
    """
    _require(model, Architecture.NODE)
    activation = _nsr_activation(model)
    p = t.cast(NodeParams, model.node)
    hidden, n = p.W0.shape
    builder = ProblemBuilder(f"{model.name}: neural ode lipschitz")
    rho = builder.variable("rho")
    mult = layer_multipliers(builder, "f", activation, hidden, with_s=True, with_p=True)
    lift = np.block([[p.W0, np.zeros((hidden, hidden))], [np.zeros((hidden, n)), np.eye(hidden)]])
    flow = AffineMatrix.block([[-AffineMatrix.variable(rho, np.eye(n)), p.G], [p.G.T, None]])
    builder.add(flow + mult.X.congruence(lift), "flow")
    return builder.build(BoundSemantics.EXP_HALF_RHO_L2_NODE, rho, horizon=p.t_final, log=log)
