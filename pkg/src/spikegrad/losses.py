"""Loss programs, output filters and readout heads.

A network's output ``y`` is produced by a linear, non-spiking *output stage*
driven by the top-layer spikes.  It is either a trainable leaky readout
(``y = z`` with ``z' = beta_ro z + scale * W_ro s``) or a parameter-free
kernel filter applied to every spike train (used by the van Rossum loss).

A :class:`LossProgram` maps the output stream to a scalar loss per trial and
classifies itself as ``online`` (a sum of per-step terms) or ``locking``
(needs the complete trial before any gradient is available).
"""

from __future__ import annotations

import dataclasses
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DomainError, ParameterError, SpecError

KERNEL_KINDS = ("exponential", "double_exponential", "delta")
HEADS = ("van_rossum", "local_mse", "sum_readout_ce", "max_readout_ce", "step_readout_ce")
ONLINE_HEADS = ("van_rossum", "local_mse", "step_readout_ce")
CE_HEADS = ("sum_readout_ce", "max_readout_ce", "step_readout_ce")


# ---------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class KernelSpec:
    """Causal filter applied to spike trains.

    ``normalize=True`` scales each stage's input by ``dt / tau`` so a constant
    unit-rate input settles near 1 regardless of ``tau``; the default gain of 1
    adds each spike at full height.  ``delta`` passes the input through.
    """

    kind: str = "exponential"
    tau: float = 10.0
    dt: float = 1.0
    tau_rise: Optional[float] = None
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ParameterError(f"unknown kernel kind {self.kind!r}")
        if not self.dt > 0:
            raise ParameterError("kernel dt must be positive")
        if self.kind != "delta" and not self.tau > 0:
            raise ParameterError("kernel tau must be positive")
        if self.kind == "double_exponential" and not (self.tau_rise and self.tau_rise > 0):
            raise ParameterError("double_exponential kernel needs a positive tau_rise")

    @property
    def alpha(self) -> float:
        return 0.0 if self.kind == "delta" else math.exp(-self.dt / self.tau)

    @property
    def alpha_rise(self) -> float:
        return math.exp(-self.dt / self.tau_rise)

    def _gain(self, tau):
        return self.dt / tau if self.normalize else 1.0

    def stage_matrices(self):
        """Return ``(A, route)`` of the filter recurrence ``z' = A z + route * s``;
        the filtered value is the last state component."""
        if self.kind == "delta":
            return np.zeros((1, 1)), np.ones(1)
        if self.kind == "exponential":
            return np.array([[self.alpha]]), np.array([self._gain(self.tau)])
        g_r, g_d = self._gain(self.tau_rise), self._gain(self.tau)
        a_r, a_d = self.alpha_rise, self.alpha
        return np.array([[a_r, 0.0], [g_d * a_r, a_d]]), np.array([g_r, g_d * g_r])


def kernel_filter_step(z, s, spec: KernelSpec):
    """One filter update.  ``z`` has a trailing axis of length 1 (exponential,
    delta) or 2 (double exponential: rise stage, then decay stage)."""
    A, route = spec.stage_matrices()
    z = np.asarray(z, dtype=float)
    s = np.asarray(s, dtype=float)
    return z @ A.T + s[..., None] * route


def filter_train(spikes, spec: KernelSpec) -> np.ndarray:
    """Filter a ``(T, ...)`` stream along axis 0, returning the filtered value."""
    spikes = np.asarray(spikes, dtype=float)
    A, route = spec.stage_matrices()
    z = np.zeros(spikes.shape[1:] + (A.shape[0],))
    out = np.zeros(spikes.shape)
    for t in range(spikes.shape[0]):
        z = z @ A.T + spikes[t][..., None] * route
        out[t] = z[..., -1]
    return out


def van_rossum_step(y, y_star, dt=1.0):
    """Local loss ``0.5 * dt * sum((y - y*)**2)`` and its gradient in ``y``."""
    diff = np.asarray(y, dtype=float) - np.asarray(y_star, dtype=float)
    return 0.5 * dt * float(np.sum(diff * diff)), dt * diff


def van_rossum_distance(train_a, train_b, spec: KernelSpec) -> float:
    """Van Rossum loss between two ``(T, n)`` spike trains (Riemann sum)."""
    ya = filter_train(train_a, spec)
    yb = filter_train(train_b, spec)
    return 0.5 * spec.dt * float(np.sum((ya - yb) ** 2))


# ---------------------------------------------------------------------------
# output stage


@dataclass(frozen=True, eq=False)
class OutputStage:
    """Linear output recurrence ``z' = A z + scale * route * drive``.

    ``z`` is stored as ``(B, n_y, m_o)``; ``drive`` is ``W_ro s`` when
    ``trainable`` and the top-layer spikes otherwise; ``y = z[..., sel]``.
    """

    A: np.ndarray
    route: np.ndarray
    scale: float
    n_y: int
    trainable: bool
    sel: int = -1

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def instantaneous(self) -> bool:
        return not np.any(self.A)

    @property
    def sel_index(self) -> int:
        return self.sel % self.m

    def init(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.n_y, self.m))

    def drive(self, s, W_ro=None):
        return s @ W_ro.T if self.trainable else s

    def step(self, z, s, W_ro=None):
        return z @ self.A.T + (self.scale * self.drive(s, W_ro))[..., None] * self.route

    def output(self, z):
        return z[..., self.sel_index]

    def size(self) -> int:
        return self.n_y * self.m


def output_stage(spec, program: "LossProgram") -> OutputStage:
    """Output stage implied by a network and the loss applied to it."""
    if program.head == "van_rossum":
        if spec.readout is not None:
            raise SpecError("van_rossum compares filtered top-layer spikes; "
                            "remove the readout from the network")
        A, route = program.kernel.stage_matrices()
        return OutputStage(A, route, 1.0, spec.top.k, False)
    if spec.readout is None:
        raise SpecError(f"loss head {program.head!r} needs a network readout")
    beta = spec.readout_beta()
    return OutputStage(np.array([[beta]]), np.ones(1), spec.readout_scale(),
                       spec.readout.n_classes, True)


# ---------------------------------------------------------------------------
# loss programs


def _log_softmax(logits):
    shift = logits - logits.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Softmax cross-entropy per row and its gradient in the logits."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"label out of range for {n_classes} classes")
    logp = _log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad


@dataclass
class HeadResult:
    loss: np.ndarray                 # (B,) per-trial loss
    grad: np.ndarray                 # (B, T, n_y) dL/dy
    step_loss: Optional[np.ndarray]  # (B, T) per-step terms for online heads


@dataclass(frozen=True)
class LossProgram:
    """Declarative loss description.

    Parameters
    ----------
    head : str
        One of ``van_rossum``, ``local_mse``, ``sum_readout_ce``,
        ``max_readout_ce``, ``step_readout_ce``.
    kernel : KernelSpec, optional
        Output filter for ``van_rossum``.
    label_delay : int
        Steps between an output and the arrival of its target.  Totals and
        gradients are unchanged; online evaluation of the term for step ``t``
        happens at step ``t + label_delay`` (remaining terms at trial end).
    window : (start, stop), optional
        Steps that contribute to the loss; defaults to the whole trial.
    target_kind : str
        ``van_rossum`` only: ``spikes`` (filtered with ``kernel``) or
        ``stream`` (already filtered values).
    target_kernel : KernelSpec, optional
        Kernel a ``stream`` target was produced with; must equal ``kernel``.
    """

    head: str
    kernel: Optional[KernelSpec] = None
    label_delay: int = 0
    window: Optional[tuple] = None
    target_kind: str = "spikes"
    target_kernel: Optional[KernelSpec] = None

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"unknown loss head {self.head!r}", "loss.head")
        if self.label_delay < 0:
            raise ConfigError("label_delay must be >= 0", "loss.label_delay")
        if self.head == "van_rossum":
            if self.kernel is None:
                object.__setattr__(self, "kernel", KernelSpec())
            if self.target_kind not in ("spikes", "stream"):
                raise ConfigError("target_kind must be 'spikes' or 'stream'", "loss.target_kind")
            if self.target_kernel is not None and self.target_kernel != self.kernel:
                raise ConfigError("target stream was filtered with a different kernel "
                                  "than the output path", "loss.target_kernel")
        if self.window is not None:
            start, stop = self.window
            if start < 0 or (stop is not None and stop <= start):
                raise ConfigError("window must satisfy 0 <= start < stop", "loss.window")
            object.__setattr__(self, "window", (int(start), None if stop is None else int(stop)))

    @property
    def locality(self) -> str:
        return "online" if self.head in ONLINE_HEADS else "locking"

    @property
    def classification(self) -> bool:
        return self.head in CE_HEADS

    @property
    def dt(self) -> float:
        return self.kernel.dt if self.kernel is not None else 1.0

    def window_mask(self, T: int) -> np.ndarray:
        mask = np.zeros(T, dtype=bool)
        start, stop = self.window or (0, None)
        mask[start:T if stop is None else min(stop, T)] = True
        return mask

    def check_length(self, T: int):
        if self.label_delay > T:
            raise ConfigError(f"label_delay {self.label_delay} exceeds trial length {T}",
                              "loss.label_delay")

    # -- targets ------------------------------------------------------------

    def prepare_targets(self, targets, batch: int, T: int, n_y: int):
        """Normalise targets: integer labels ``(B,)`` for classification
        heads, a real ``(B, T, n_y)`` stream otherwise."""
        if self.classification:
            labels = np.atleast_1d(np.asarray(targets)).astype(int)
            if labels.shape != (batch,):
                raise SpecError(f"expected {batch} labels, got shape {labels.shape}")
            if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_y:
                raise DomainError(f"label out of range for {n_y} classes")
            return labels
        arr = np.asarray(targets, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape != (batch, T, n_y):
            raise SpecError(f"target stream must be {(batch, T, n_y)}, got {arr.shape}")
        if self.head == "van_rossum" and self.target_kind == "spikes":
            arr = np.moveaxis(filter_train(np.moveaxis(arr, 1, 0), self.kernel), 0, 1)
        return arr

    # -- batch evaluation ---------------------------------------------------

    def evaluate(self, y, targets) -> HeadResult:
        """Loss and ``dL/dy`` for a complete output stream ``y`` of shape
        ``(B, T, n_y)``."""
        y = np.asarray(y, dtype=float)
        B, T, n_y = y.shape
        self.check_length(T)
        tgt = self.prepare_targets(targets, B, T, n_y)
        mask = self.window_mask(T)
        grad = np.zeros_like(y)
        if self.head in ("van_rossum", "local_mse"):
            scale = self.dt if self.head == "van_rossum" else 1.0
            diff = (y - tgt) * mask[None, :, None]
            step = 0.5 * scale * np.sum(diff * diff, axis=2)
            return HeadResult(step.sum(axis=1), scale * diff, step)
        if not mask.any():
            raise DomainError("loss window selects no timesteps")
        if self.head == "step_readout_ce":
            step = np.zeros((B, T))
            for t in np.flatnonzero(mask):
                step[:, t], grad[:, t] = cross_entropy(y[:, t], tgt)
            return HeadResult(step.sum(axis=1), grad, step)
        idx = np.flatnonzero(mask)
        if self.head == "sum_readout_ce":
            loss, g = cross_entropy(y[:, idx].sum(axis=1), tgt)
            grad[:, idx] = g[:, None, :]
            return HeadResult(loss, grad, None)
        win = y[:, idx]
        arg = win.argmax(axis=1)                       # earliest maximum
        logits = np.take_along_axis(win, arg[:, None, :], axis=1)[:, 0]
        loss, g = cross_entropy(logits, tgt)
        b, c = np.meshgrid(np.arange(B), np.arange(n_y), indexing="ij")
        grad[b, idx[arg], c] = g
        return HeadResult(loss, grad, None)

    def loss(self, y, targets) -> np.ndarray:
        return self.evaluate(y, targets).loss

    def predict(self, y) -> np.ndarray:
        """Predicted class per trial for classification heads."""
        y = np.asarray(y, dtype=float)
        win = y[:, self.window_mask(y.shape[1])]
        if self.head == "max_readout_ce":
            return win.max(axis=1).argmax(axis=1)
        return win.sum(axis=1).argmax(axis=1)

    # -- streaming ----------------------------------------------------------

    def stream(self, targets, batch: int, T: int, n_y: int) -> "HeadStream":
        self.check_length(T)
        return HeadStream(self, self.prepare_targets(targets, batch, T, n_y), batch, T, n_y)


class HeadStream:
    """Per-step evaluation of a loss program.

    For online heads :meth:`step` returns the events ``(src_t, loss, g)`` that
    become available at the current step, where ``g = dL/dy^{src_t}``; with a
    label delay ``d`` the term for step ``t`` is released at ``t + d``.

    Locking heads release nothing per step.  They return an instruction for
    the caller's influence accumulator instead: ``("add", flag)`` for sum
    readouts and ``("copy", mask)`` for max readouts, and deliver the loss and
    the logit gradient from :meth:`finish`.
    """

    def __init__(self, program: LossProgram, targets, batch, T, n_y):
        self.program = program
        self.targets = targets
        self.batch, self.T, self.n_y = batch, T, n_y
        self.mask = program.window_mask(T)
        self.t = 0
        self.pending = deque()
        if program.head == "sum_readout_ce":
            self.acc = np.zeros((batch, n_y))
        elif program.head == "max_readout_ce":
            self.acc = np.full((batch, n_y), -np.inf)
        self.finished = False

    def _term(self, t, y):
        p = self.program
        if not self.mask[t]:
            return np.zeros(self.batch), np.zeros((self.batch, self.n_y))
        if p.head == "step_readout_ce":
            return cross_entropy(y, self.targets)
        scale = p.dt if p.head == "van_rossum" else 1.0
        diff = y - self.targets[:, t]
        return 0.5 * scale * np.sum(diff * diff, axis=1), scale * diff

    def step(self, y):
        t = self.t
        if t >= self.T:
            raise DomainError("stream received more steps than the trial length")
        self.t += 1
        p = self.program
        if p.locality == "online":
            self.pending.append((t, y.copy()))
            out = []
            while self.pending and self.pending[0][0] <= t - p.label_delay:
                src, ys = self.pending.popleft()
                out.append((src, *self._term(src, ys)))
            return out
        if not self.mask[t]:
            return ("add", False) if p.head == "sum_readout_ce" else ("copy", np.zeros_like(y, dtype=bool))
        if p.head == "sum_readout_ce":
            self.acc += y
            return ("add", True)
        better = y > self.acc
        self.acc = np.where(better, y, self.acc)
        return ("copy", better)

    def finish(self):
        """Flush remaining online events (list) or return ``(loss, g_logits)``
        for locking heads."""
        self.finished = True
        p = self.program
        if p.locality == "online":
            out = [(src, *self._term(src, ys)) for src, ys in self.pending]
            self.pending.clear()
            return out
        if not self.mask[: self.t].any():
            raise DomainError("loss window selects no timesteps")
        return cross_entropy(self.acc, self.targets)


def delayed_label_wrap(program: LossProgram, delay: int, T: Optional[int] = None) -> LossProgram:
    """Return ``program`` with its label delay set to ``delay`` steps."""
    if delay < 0:
        raise ConfigError("label delay must be >= 0", "loss.label_delay")
    if T is not None and delay > T:
        raise ConfigError(f"label delay {delay} exceeds trial length {T}", "loss.label_delay")
    return dataclasses.replace(program, label_delay=int(delay))


def sum_readout_loss(readout, label):
    """Cross-entropy of the time-summed readout; returns ``(loss, dL/dreadout)``
    for a single ``(T, n_classes)`` trajectory."""
    res = LossProgram("sum_readout_ce").evaluate(np.asarray(readout, dtype=float)[None], [label])
    return float(res.loss[0]), res.grad[0]


def max_readout_loss(readout, label):
    """Cross-entropy of the per-class maximum over time; the gradient reaches
    only each class's (earliest) argmax step."""
    readout = np.asarray(readout, dtype=float)
    if readout.ndim != 2 or readout.shape[0] == 0:
        raise DomainError("max readout needs a non-empty (T, n_classes) trajectory")
    res = LossProgram("max_readout_ce").evaluate(readout[None], [label])
    return float(res.loss[0]), res.grad[0]
