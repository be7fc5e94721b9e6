"""Pieces shared by the gradient engines."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import DomainError
from ..losses import LossProgram, output_stage
from ..neurons import NetworkSpec, as_batch, rollout

ENGINES = ("bptt", "rtrl_exact", "rtrl_sparse", "mixed")


@dataclass
class GradientReport:
    """Gradients of the summed per-trial loss plus cost counters.

    ``peak_memory_elements`` counts floats held in the engine's working state
    (trajectories, adjoints, influence matrices, traces, accumulators); it
    excludes the parameters and the gradient being accumulated.
    ``scalar_mult_count`` counts multiplications in Jacobian products.
    """

    grads: dict
    engine: str
    peak_memory_elements: int
    scalar_mult_count: int
    loss: np.ndarray
    trace_mode: Optional[str] = None
    loss_log: list = field(default_factory=list)

    @property
    def total_loss(self) -> float:
        return float(np.sum(self.loss))


def relative_error(a, b) -> float:
    """``max|a - b| / max(max|a|, max|b|, 1e-30)``; dicts are compared over the
    union of their entries."""
    if isinstance(a, dict):
        keys = sorted(set(a) | set(b))
        fa = np.concatenate([np.ravel(a[k]) if k in a else np.zeros(np.size(b[k])) for k in keys])
        fb = np.concatenate([np.ravel(b[k]) if k in b else np.zeros(np.size(a[k])) for k in keys])
        return relative_error(fa, fb)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-30)
    return float(np.max(np.abs(a - b)) / scale)


class Meter:
    """Tracks the multiplication count and the peak number of live floats."""

    def __init__(self):
        self.mults = 0
        self.peak = 0

    def mult(self, n):
        self.mults += int(n)

    def observe(self, *arrays, extra=0):
        live = extra + sum(np.size(a) for a in arrays if a is not None)
        self.peak = max(self.peak, int(live))


def zero_grads(params: dict) -> dict:
    return {name: np.zeros_like(value, dtype=float) for name, value in params.items()}


def add_into(total: dict, part: dict, scale=1.0):
    for name, value in part.items():
        total[name] += scale * value


def apply_masks(spec: NetworkSpec, grads: dict) -> dict:
    for name, mask in spec.masks().items():
        if name in grads:
            grads[name] = np.where(mask, grads[name], 0.0)
    return grads


class InfluenceAccumulator:
    """Turns per-step output influences ``dy^t/dtheta`` into loss gradients.

    ``Gy`` is a dict of arrays with leading ``(B, n_y)`` axes; ``contract``
    maps ``(g, Gy)`` with ``g`` of shape ``(B, n_y)`` to parameter-shaped
    gradients.  Online heads are contracted as soon as their term is
    released (buffering influences for the label delay); sum heads add the
    influences over the window and max heads keep, per trial and class, the
    influence at the running argmax.
    """

    def __init__(self, stream, contract: Callable, params: dict, record_log=False):
        self.stream = stream
        self.contract = contract
        self.program: LossProgram = stream.program
        self.grads = zero_grads(params)
        self.loss = np.zeros(stream.batch)
        self.buffer = deque()
        self.acc = None
        self.t = 0
        self.log = [] if record_log else None

    def held(self) -> int:
        n = sum(np.size(v) for _, gy in self.buffer for v in gy.values())
        if self.acc is not None:
            n += sum(np.size(v) for v in self.acc.values())
        return n

    def _release(self, events, t_eval):
        part = None
        for src, loss, g in events:
            while self.buffer and self.buffer[0][0] < src:
                self.buffer.popleft()
            gy = self.buffer.popleft()[1]
            contrib = self.contract(g, gy)
            add_into(self.grads, contrib)
            self.loss += loss
            if self.log is not None:
                self.log.append((t_eval, src, loss.copy()))
            if part is None:
                part = contrib
            else:
                add_into(part, contrib)
        return part

    def push(self, y, Gy: dict):
        """Feed the output and its influence at the current step; returns the
        gradient released at this step (online heads) or None."""
        t = self.t
        self.t += 1
        if self.program.locality == "online":
            delay = self.program.label_delay
            self.buffer.append((t, Gy if delay == 0 else {k: np.array(v) for k, v in Gy.items()}))
            return self._release(self.stream.step(y), t)
        kind, sel = self.stream.step(y)
        if kind == "add":
            if sel:
                if self.acc is None:
                    self.acc = {k: np.array(v) for k, v in Gy.items()}
                else:
                    for k, v in Gy.items():
                        self.acc[k] += v
            return None
        if self.acc is None:
            self.acc = {k: np.zeros(np.shape(v)) for k, v in Gy.items()}
        for k, v in Gy.items():
            m = sel.reshape(sel.shape + (1,) * (np.ndim(v) - 2))
            self.acc[k] = np.where(m, v, self.acc[k])
        return None

    def finish(self):
        """Complete the trial; returns ``(grads, loss)``."""
        if self.program.locality == "online":
            self._release(self.stream.finish(), self.t)
            return self.grads, self.loss
        loss, g = self.stream.finish()
        if self.acc is not None:
            add_into(self.grads, self.contract(g, self.acc))
        self.loss += loss
        return self.grads, self.loss


def forward_outputs(spec: NetworkSpec, params: dict, inputs, program: LossProgram):
    """Run the network and its output stage; returns ``(trajectory, y)`` with
    ``y`` of shape ``(B, T, n_y)``."""
    traj = rollout(spec, params, inputs)
    stage = output_stage(spec, program)
    s_top = traj.s[-1]
    B, T = s_top.shape[:2]
    z = stage.init(B)
    y = np.zeros((B, T, stage.n_y))
    W_ro = params.get("readout.W")
    for t in range(T):
        z = stage.step(z, s_top[:, t], W_ro)
        y[:, t] = stage.output(z)
    return traj, y


def forward_loss(spec, params, inputs, program, targets) -> float:
    """Summed loss over the batch for a plain forward pass."""
    _, y = forward_outputs(spec, params, inputs, program)
    return float(np.sum(program.evaluate(y, targets).loss))


def batch_inputs(spec, inputs):
    x = as_batch(inputs, spec.n_in)
    if x.shape[1] == 0:
        raise DomainError("gradient engines need at least one timestep")
    return x
