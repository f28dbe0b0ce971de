# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""Lipschitz certificates for GroupSort and Householder networks."""

from lipcert._version import VERSION as __version__  # noqa: N811
from lipcert.activations import ActivationKind, ActivationSpec
from lipcert.assembly import (
    MultiplierClass,
    SdpProblem,
    assemble_deq_lipschitz,
    assemble_deq_wellposed,
    assemble_l2_feedforward,
    assemble_l2_residual,
    assemble_linf,
    assemble_node_lipschitz,
    assemble_rr,
)
from lipcert.baselines import (
    BoundMethod,
    BoundReport,
    Norm,
    fgl_bound,
    mp_bound,
    norm_eq_bound,
    rr_bound,
    sample_lower_bound,
    spectral_norm,
)
from lipcert.certify import Certificate, certify, certify_deq, split_model
from lipcert.model import Architecture, Model, forward, jacobian, load_model
from lipcert.report import RunReport
from lipcert.sdpa import export_sdpa, export_sdpa_solution, import_sdpa_solution, read_sdpa
from lipcert.solver import SdpaConvention, SolveResult, SolverConfig, SolveStatus, psd_check, solve

__all__ = [
    "ActivationKind",
    "ActivationSpec",
    "Architecture",
    "BoundMethod",
    "BoundReport",
    "Certificate",
    "Model",
    "MultiplierClass",
    "Norm",
    "RunReport",
    "SdpProblem",
    "SdpaConvention",
    "SolveResult",
    "SolveStatus",
    "SolverConfig",
    "__version__",
    "assemble_deq_lipschitz",
    "assemble_deq_wellposed",
    "assemble_l2_feedforward",
    "assemble_l2_residual",
    "assemble_linf",
    "assemble_node_lipschitz",
    "assemble_rr",
    "certify",
    "certify_deq",
    "export_sdpa",
    "export_sdpa_solution",
    "fgl_bound",
    "forward",
    "import_sdpa_solution",
    "jacobian",
    "load_model",
    "mp_bound",
    "norm_eq_bound",
    "psd_check",
    "read_sdpa",
    "rr_bound",
    "sample_lower_bound",
    "solve",
    "spectral_norm",
    "split_model",
]
