"""Gradient engines: BPTT, exact and sparse RTRL, mixed mode, finite differences."""

from .bptt import bptt, bptt_gradient
from .common import ENGINES, GradientReport, forward_loss, forward_outputs, relative_error
from .dispatch import compute_gradient, streaming_engine
from .fd import finite_difference_oracle
from .jacobians import (InfluenceStore, JacobianParts, assemble_jacobians, rtrl_exact_step,
                        rtrl_sparse_step, three_factor_gradient, trace_update)
from .mixed import MixedMode, mixed_mode_gradient
from .probe import complexity_probe, fit_exponent, probe_network
from .rtrl import ExactRTRL, SparseRTRL, rtrl_exact_gradient, rtrl_sparse_gradient

__all__ = [
    "ENGINES", "GradientReport", "InfluenceStore", "JacobianParts", "ExactRTRL", "SparseRTRL",
    "MixedMode", "assemble_jacobians", "bptt", "bptt_gradient", "complexity_probe",
    "compute_gradient", "finite_difference_oracle", "fit_exponent", "forward_loss",
    "forward_outputs", "mixed_mode_gradient", "probe_network", "relative_error",
    "rtrl_exact_gradient", "rtrl_exact_step", "rtrl_sparse_gradient", "rtrl_sparse_step",
    "streaming_engine", "three_factor_gradient", "trace_update",
]
