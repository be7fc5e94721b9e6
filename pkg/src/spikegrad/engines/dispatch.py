"""Engine selection by name."""

from __future__ import annotations

from ..errors import UsageError
from .bptt import bptt
from .common import ENGINES, GradientReport
from .mixed import MixedMode, mixed_mode_gradient
from .rtrl import ExactRTRL, SparseRTRL, rtrl_exact_gradient, rtrl_sparse_gradient

_RUNNERS = {
    "bptt": bptt,
    "rtrl_exact": rtrl_exact_gradient,
    "rtrl_sparse": rtrl_sparse_gradient,
    "mixed": mixed_mode_gradient,
}

STREAMING = {"rtrl_exact": ExactRTRL, "rtrl_sparse": SparseRTRL, "mixed": MixedMode}


def compute_gradient(engine: str, spec, params, inputs, program, targets) -> GradientReport:
    """Gradient of the batch-summed loss with the named engine."""
    if engine not in _RUNNERS:
        raise UsageError(f"unknown engine {engine!r}; choose from {ENGINES}")
    return _RUNNERS[engine](spec, params, inputs, program, targets)


def streaming_engine(engine: str, spec, params, program, batch=1):
    """Instantiate a step-wise engine (all except BPTT)."""
    if engine not in STREAMING:
        raise UsageError(f"engine {engine!r} has no streaming form")
    return STREAMING[engine](spec, params, program, batch)
