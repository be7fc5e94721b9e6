"""Cost counters for scaling measurements."""

from __future__ import annotations

import time

import numpy as np

from ..losses import LossProgram
from ..neurons import LayerSpec, NetworkSpec, ReadoutConfig, init_params, make_lif_params
from .dispatch import compute_gradient


def probe_network(k: int, n: int = None, n_classes: int = 2, mode="RC") -> NetworkSpec:
    """Single-layer network with an instantaneous readout, usable by every engine."""
    n = k if n is None else n
    lif = make_lif_params(10.0, 1.0)
    return NetworkSpec(n, [LayerSpec(k, n, lif)], mode=mode,
                       readout=ReadoutConfig(n_classes, beta=0.0))


def complexity_probe(engine: str, spec: NetworkSpec, T: int, seed: int = 0, rate: float = 0.1,
                     program: LossProgram = None):
    """Run one trial and return ``(peak_memory_elements, scalar_mult_count, wall_ms)``."""
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed)
    x = (rng.random((1, T, spec.n_in)) < rate).astype(float)
    program = program or LossProgram("step_readout_ce")
    n_y = spec.readout.n_classes if spec.readout else spec.top.k
    targets = np.zeros(1, dtype=int) if program.classification else np.zeros((1, T, n_y))
    start = time.perf_counter()
    rep = compute_gradient(engine, spec, params, x, program, targets)
    wall = 1000.0 * (time.perf_counter() - start)
    return rep.peak_memory_elements, rep.scalar_mult_count, wall


def fit_exponent(xs, ys) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])
