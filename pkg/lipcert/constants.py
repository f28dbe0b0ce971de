# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

import logging
import os

DEFAULT_LOGGER = logging.getLogger("lipcert")
"""Default logger for the library."""

THREADS = max(1, int(os.getenv("LIPCERT_THREADS", os.cpu_count() or 1)))
"""Maximal number of worker threads for sampling, enumeration and comparisons."""

SOLVER_TOL = float(os.getenv("LIPCERT_TOL", 1e-8))
"""Default duality gap and feasibility tolerance of the interior-point solver."""

SOLVER_MAX_ITERS = int(os.getenv("LIPCERT_MAX_ITERS", 200))
"""Default iteration cap of the interior-point solver."""

STEP_FRACTION = 0.99
"""Fraction of the distance to the cone boundary taken by an interior-point step."""

DEQ_DAMPING = 0.5
"""Damping factor of the equilibrium Picard iteration."""

DEQ_TOL = 1e-10
"""Stopping tolerance on successive equilibrium iterates."""

DEQ_MAX_ITERS = 100_000
"""Maximal number of equilibrium iterations."""

ODE_STEP = 0.01
"""Fixed RK4 step used to integrate neural ODE flows."""

HOUSEHOLDER_NORM_TOL = 1e-12
"""Tolerance on the unit norm of Householder reflection vectors."""

QC_TOL = 1e-9
"""Tolerance on normalized quadratic constraint values."""

DEQ_WELLPOSED_MARGIN = 1e-8
"""Margin turning the strict well-posedness inequality into a non-strict one."""

DEQ_PI_MARGIN = 1e-6
"""Lower bound on the eigenvalues of the well-posedness weight matrix."""

FGL_MAX_PATTERNS = 10_000_000
"""Maximal number of activation patterns enumerated by the FGL bound."""

SAMPLE_COUNT = 200_000
"""Default number of points used by the sampling lower bound."""

CHUNK_SIZE = 4096
"""Number of samples processed by one worker task."""
