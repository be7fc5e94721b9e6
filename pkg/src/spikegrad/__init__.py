"""Gradient computation for spiking neural networks.

Exact backpropagation through time, exact and sparse real-time recurrent
learning, mixed-mode accumulation and a finite-difference oracle, together
with LIF and multi-compartment neuron models, loss heads, task generators,
training loops and a command-line interface.
"""

from .engines import (GradientReport, compute_gradient, finite_difference_oracle,
                      relative_error, streaming_engine)
from .errors import (ConfigError, DomainError, LockingError, ParameterError, ShapeError,
                     SpecError, SpikeGradError, UsageError)
from .losses import KernelSpec, LossProgram, van_rossum_distance
from .neurons import (LayerSpec, MultiCompartmentSpec, NetworkSpec, ReadoutConfig,
                      SurrogateSpec, init_params, make_lif_params, rollout)
from .tasks import TrialSet, generate_task, memory_stress_task, randman_generate
from .training import (ExperimentConfig, InitSpec, OptimizerSpec, run_ablation, train,
                       train_offline, train_streaming)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DomainError", "ExperimentConfig", "GradientReport", "InitSpec",
    "KernelSpec", "LayerSpec", "LockingError", "LossProgram", "MultiCompartmentSpec",
    "NetworkSpec", "OptimizerSpec", "ParameterError", "ReadoutConfig", "ShapeError",
    "SpecError", "SpikeGradError", "SurrogateSpec", "TrialSet", "UsageError",
    "compute_gradient", "finite_difference_oracle", "generate_task", "init_params",
    "make_lif_params", "memory_stress_task", "randman_generate", "relative_error", "rollout",
    "run_ablation", "streaming_engine", "train", "train_offline", "train_streaming",
    "van_rossum_distance",
]
