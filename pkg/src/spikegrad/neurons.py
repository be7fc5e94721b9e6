"""Discrete-time LIF and multi-compartment spiking dynamics.

Every gradient engine advances the network through :func:`network_step`, so
the forward pass is defined exactly once.  State layout conventions:

* a layer of ``k`` neurons with ``m`` compartments carries a state vector of
  length ``m * k`` ordered neuron-major (index ``i * m + c``);
* the membrane value stored in a state is the value *before* reset, i.e. the
  one the spike was evaluated on;
* the subtractive reset ``u -= threshold * s`` is applied to the spiking
  compartment at the start of the next step and never enters a Jacobian.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError, ShapeError, SpecError

SCALE_MODES = ("one_minus_beta", "unit")
SURROGATE_KINDS = ("fast_sigmoid", "rectangular", "arctan_like")
MODES = ("FF", "RC", "RD")


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class LIFParams:
    tau_mem: float
    dt: float
    beta: float
    threshold: float = 1.0
    u_rest: float = 0.0
    resistance: float = 1.0
    input_scale_mode: str = "one_minus_beta"

    @property
    def input_scale(self) -> float:
        """Factor multiplying the synaptic drive ``W s_in + V s``."""
        if self.input_scale_mode == "one_minus_beta":
            return self.resistance * (1.0 - self.beta)
        return self.resistance


def make_lif_params(tau_mem, dt, threshold=1.0, mode="one_minus_beta",
                    u_rest=0.0, resistance=1.0) -> LIFParams:
    """Build :class:`LIFParams` with ``beta = exp(-dt / tau_mem)``.

    Raises
    ------
    ParameterError
        If ``tau_mem``, ``dt`` or ``threshold`` is not strictly positive, or
        if the decay factor underflows to zero.
    """
    for name, value in (("tau_mem", tau_mem), ("dt", dt), ("threshold", threshold)):
        if not (np.isfinite(value) and value > 0):
            raise ParameterError(f"{name} must be positive and finite, got {value!r}")
    if mode not in SCALE_MODES:
        raise ParameterError(f"input_scale_mode must be one of {SCALE_MODES}, got {mode!r}")
    beta = math.exp(-float(dt) / float(tau_mem))
    if not 0.0 < beta < 1.0:
        raise ParameterError(f"decay factor exp(-dt/tau_mem) = {beta!r} is not in (0, 1)")
    return LIFParams(float(tau_mem), float(dt), beta, float(threshold),
                     float(u_rest), float(resistance), mode)


@dataclass(frozen=True)
class SurrogateSpec:
    """Surrogate derivative family.

    ``slope`` sets the sharpness around threshold and ``scale`` the peak
    value (values below 1 damp gradient growth through recurrent loops).
    """

    kind: str = "fast_sigmoid"
    slope: float = 10.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ParameterError(f"unknown surrogate kind {self.kind!r}")
        if not self.slope > 0:
            raise ParameterError("surrogate slope must be positive")
        if not self.scale > 0:
            raise ParameterError("surrogate scale must be positive")


def surrogate_deriv(u, spec: SurrogateSpec, threshold=1.0):
    """Surrogate derivative of the spike nonlinearity, evaluated at ``u``.

    All kinds peak at ``u == threshold`` with value ``spec.scale``.
    """
    x = np.asarray(u, dtype=float) - threshold
    if spec.kind == "fast_sigmoid":
        out = 1.0 / (1.0 + spec.slope * np.abs(x)) ** 2
    elif spec.kind == "arctan_like":
        out = 1.0 / (1.0 + (spec.slope * x) ** 2)
    else:
        out = (np.abs(x) <= 0.5 / spec.slope).astype(float)
    return spec.scale * out


def smooth_activation(u, spec: SurrogateSpec, threshold=1.0):
    """Antiderivative of :func:`surrogate_deriv`, used as a differentiable
    stand-in for the spike when the forward pass must be smooth."""
    x = np.asarray(u, dtype=float) - threshold
    if spec.kind == "fast_sigmoid":
        out = x / (1.0 + spec.slope * np.abs(x))
    elif spec.kind == "arctan_like":
        out = np.arctan(spec.slope * x) / spec.slope
    else:
        half = 0.5 / spec.slope
        out = np.clip(x, -half, half)
    return spec.scale * out


@dataclass(frozen=True, eq=False)
class MultiCompartmentSpec:
    """Per-neuron linear compartment coupling.

    ``coupling[c, d]`` is the weight of compartment ``d`` at ``t - 1`` in
    compartment ``c`` at ``t``; the same block is used for every neuron.
    """

    m: int
    coupling: np.ndarray
    spike_compartment: int = 0
    input_compartments: Optional[tuple] = None
    input_scale: float = 1.0

    def __post_init__(self):
        coupling = np.array(self.coupling, dtype=float)
        object.__setattr__(self, "coupling", coupling)
        if coupling.shape != (self.m, self.m):
            raise SpecError(f"coupling must be {self.m}x{self.m}, got {coupling.shape}")
        if not 0 <= self.spike_compartment < self.m:
            raise SpecError("spike_compartment out of range")
        radius = max(abs(np.linalg.eigvals(coupling))) if self.m else 0.0
        if radius >= 1.0:
            raise SpecError(f"coupling spectral radius {radius:.4g} >= 1 (unstable)")
        if self.input_compartments is not None:
            comps = tuple(int(c) for c in self.input_compartments)
            if any(not 0 <= c < self.m for c in comps):
                raise SpecError("input_compartments out of range")
            object.__setattr__(self, "input_compartments", comps)

    def selector(self, k: int) -> np.ndarray:
        """Binary ``k x (m k)`` matrix picking each neuron's spiking compartment."""
        P = np.zeros((k, self.m * k))
        P[np.arange(k), np.arange(k) * self.m + self.spike_compartment] = 1.0
        return P


def check_selector(P, m: int, k: int) -> int:
    """Validate a selector matrix and return the spiking compartment index it
    encodes.  Only selectors picking the same compartment in every neuron are
    representable."""
    P = np.asarray(P)
    if P.shape != (k, m * k):
        raise SpecError(f"selector must be {k}x{m * k}, got {P.shape}")
    if not np.isin(P, (0, 1)).all() or not (P.sum(axis=1) == 1).all():
        raise SpecError("selector rows must be binary with exactly one 1")
    cols = P.argmax(axis=1)
    if not (cols // m == np.arange(k)).all():
        raise SpecError("selector must pick a compartment of the neuron itself")
    comp = cols % m
    if not (comp == comp[0]).all():
        raise SpecError("selector must pick the same compartment in every neuron")
    return int(comp[0])


# ---------------------------------------------------------------------------
# network structure


@dataclass(frozen=True, eq=False)
class LayerSpec:
    k: int
    n_in: int
    lif: LIFParams
    compartments: Optional[MultiCompartmentSpec] = None
    self_connections: bool = True

    @property
    def m(self) -> int:
        return 1 if self.compartments is None else self.compartments.m

    @property
    def size(self) -> int:
        return self.m * self.k

    @property
    def coupling(self) -> np.ndarray:
        if self.compartments is None:
            return np.array([[self.lif.beta]])
        return self.compartments.coupling

    @property
    def input_scale(self) -> float:
        if self.compartments is None:
            return self.lif.input_scale
        return self.compartments.input_scale

    @property
    def spike_index(self) -> int:
        return 0 if self.compartments is None else self.compartments.spike_compartment

    @property
    def threshold(self) -> float:
        return self.lif.threshold

    def row_mask(self) -> Optional[np.ndarray]:
        """Rows of ``W``/``V`` that may carry synaptic input, or None for all."""
        if self.compartments is None or self.compartments.input_compartments is None:
            return None
        rows = np.zeros((self.k, self.m), dtype=bool)
        rows[:, list(self.compartments.input_compartments)] = True
        return rows.reshape(-1)


@dataclass(frozen=True)
class ReadoutConfig:
    """Non-spiking leaky-integrator readout on the top spiking layer.

    ``beta=None`` inherits the decay of the top hidden layer; ``beta=0`` makes
    the readout instantaneous.
    """

    n_classes: int
    beta: Optional[float] = None
    aggregation: str = "sum"
    input_scale_mode: Optional[str] = None

    def __post_init__(self):
        if self.n_classes < 1:
            raise ParameterError("n_classes must be >= 1")
        if self.beta is not None and not 0.0 <= self.beta < 1.0:
            raise ParameterError("readout beta must lie in [0, 1)")
        if self.aggregation not in ("sum", "max"):
            raise ParameterError("aggregation must be 'sum' or 'max'")


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    n_in: int
    layers: tuple
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    mode: str = "RC"
    readout: Optional[ReadoutConfig] = None
    smooth_forward: bool = False
    reset: str = "subtract"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise SpecError("a network needs at least one layer")
        if self.mode not in MODES:
            raise SpecError(f"mode must be one of {MODES}")
        if self.reset not in ("subtract", "none"):
            raise SpecError("reset must be 'subtract' or 'none'")
        prev = self.n_in
        for idx, layer in enumerate(self.layers):
            if layer.n_in != prev:
                raise ShapeError(f"layer {idx} expects {layer.n_in} inputs but receives {prev}")
            prev = layer.k

    @property
    def recurrent(self) -> bool:
        return self.mode != "FF"

    @property
    def detach_recurrent(self) -> bool:
        return self.mode == "RD"

    @property
    def resets(self) -> bool:
        return self.reset == "subtract" and not self.smooth_forward

    @property
    def top(self) -> LayerSpec:
        return self.layers[-1]

    def readout_beta(self) -> float:
        if self.readout is None:
            raise SpecError("network has no readout")
        if self.readout.beta is not None:
            return self.readout.beta
        return self.top.lif.beta

    def readout_scale(self) -> float:
        beta = self.readout_beta()
        mode = self.readout.input_scale_mode or self.top.lif.input_scale_mode
        return 1.0 - beta if mode == "one_minus_beta" else 1.0

    def param_shapes(self) -> dict:
        shapes = {}
        for idx, layer in enumerate(self.layers):
            shapes[f"layers.{idx}.W"] = (layer.size, layer.n_in)
            if self.recurrent:
                shapes[f"layers.{idx}.V"] = (layer.size, layer.k)
        if self.readout is not None:
            shapes["readout.W"] = (self.readout.n_classes, self.top.k)
        return shapes

    def masks(self) -> dict:
        """Boolean activity masks for parameters that have inactive entries."""
        out = {}
        for idx, layer in enumerate(self.layers):
            rows = layer.row_mask()
            if rows is not None:
                out[f"layers.{idx}.W"] = np.repeat(rows[:, None], layer.n_in, axis=1)
            if self.recurrent and (rows is not None or not layer.self_connections):
                mask = np.ones((layer.size, layer.k), dtype=bool)
                if rows is not None:
                    mask &= rows[:, None]
                if not layer.self_connections:
                    neuron = np.arange(layer.size) // layer.m
                    mask[np.arange(layer.size), neuron] = False
                out[f"layers.{idx}.V"] = mask
        return out

    def replace(self, **changes) -> "NetworkSpec":
        return dataclasses.replace(self, **changes)

    def describe(self) -> dict:
        """JSON-serialisable structural summary (used for hashing and headers)."""
        layers = []
        for layer in self.layers:
            entry = {"k": layer.k, "n_in": layer.n_in, "lif": dataclasses.asdict(layer.lif),
                     "self_connections": layer.self_connections}
            if layer.compartments is not None:
                c = layer.compartments
                entry["compartments"] = {
                    "m": c.m, "coupling": c.coupling.tolist(),
                    "spike_compartment": c.spike_compartment,
                    "input_compartments": list(c.input_compartments) if c.input_compartments else None,
                    "input_scale": c.input_scale}
            layers.append(entry)
        return {"n_in": self.n_in, "layers": layers, "mode": self.mode,
                "surrogate": dataclasses.asdict(self.surrogate),
                "readout": dataclasses.asdict(self.readout) if self.readout else None,
                "smooth_forward": self.smooth_forward, "reset": self.reset}


def init_params(spec: NetworkSpec, seed=0, w_gain=1.0, v_gain=1.0, readout_gain=1.0,
                v_diag=0.0) -> dict:
    """Gaussian weights with standard deviation ``gain / sqrt(fan_in)``.

    ``v_diag`` is added to each neuron's recurrent self-connection (on its
    spiking compartment row); a value near ``threshold / input_scale`` makes
    a neuron that fired keep firing, giving the network persistent activity
    from the start.
    """
    rng = np.random.default_rng(seed)
    masks = spec.masks()
    params = {}
    for name, shape in spec.param_shapes().items():
        gain = readout_gain if name.startswith("readout") else (v_gain if name.endswith(".V") else w_gain)
        w = rng.normal(0.0, gain / math.sqrt(shape[1]), size=shape)
        if v_diag and name.endswith(".V"):
            layer = spec.layers[int(name.split(".")[1])]
            idx = np.arange(layer.k)
            w[idx * layer.m + layer.spike_index, idx] += v_diag
        if name in masks:
            w = np.where(masks[name], w, 0.0)
        params[name] = w
    return params


# ---------------------------------------------------------------------------
# state and single-layer steps


@dataclass
class LayerState:
    """Layer state at one timestep.

    ``u`` holds the membrane values on which ``s`` was evaluated; ``u_reset``
    is the value after the subtractive reset.
    """

    u: np.ndarray
    s: np.ndarray
    t: int = 0
    m: int = 1
    u_reset: Optional[np.ndarray] = None

    def compartment(self, c: int) -> np.ndarray:
        return self.u.reshape(self.u.shape[:-1] + (-1, self.m))[..., c]

    @property
    def i_syn(self) -> Optional[np.ndarray]:
        return self.compartment(1) if self.m > 1 else None

    @classmethod
    def zeros(cls, k: int, m: int = 1, batch: Optional[int] = None) -> "LayerState":
        lead = () if batch is None else (batch,)
        return cls(np.zeros(lead + (m * k,)), np.zeros(lead + (k,)), 0, m)


def _advance(u, s_prev, x, W, V, coupling, scale, threshold, spike_index,
             surrogate, smooth, reset, u_rest=0.0):
    """One update of a (possibly multi-compartment) layer.

    Returns ``(u_next, s_next, u_after_reset)``, where ``u_after_reset`` is
    ``u_next`` with the reset implied by ``s_next`` applied.
    """
    k = s_prev.shape[-1]
    m = coupling.shape[0]
    lead = u.shape[:-1]
    uk = u.reshape(lead + (k, m))
    if reset or u_rest:
        uk = uk.copy()
        if reset:
            uk[..., spike_index] -= threshold * s_prev
        uk[..., spike_index] -= u_rest
    nxt = np.einsum("cd,...kd->...kc", coupling, uk)
    if u_rest:
        nxt[..., spike_index] += u_rest
    drive = x @ W.T
    if V is not None:
        drive = drive + s_prev @ V.T
    u_next = nxt.reshape(lead + (m * k,)) + scale * drive
    v_spk = u_next.reshape(lead + (k, m))[..., spike_index]
    if smooth:
        s_next = smooth_activation(v_spk, surrogate, threshold)
    else:
        s_next = (v_spk >= threshold).astype(float)
    u_after = u_next
    if reset:
        u_after = u_next.reshape(lead + (k, m)).copy()
        u_after[..., spike_index] -= threshold * s_next
        u_after = u_after.reshape(lead + (m * k,))
    return u_next, s_next, u_after


def _check_binary(name, v):
    if not np.isin(v, (0.0, 1.0)).all():
        raise ValueError(f"{name} must be binary")


def lif_step(state: LayerState, params: LIFParams, W, V, s_in, s_rec=None,
             surrogate: Optional[SurrogateSpec] = None, smooth=False, reset=True) -> LayerState:
    """Advance a single-compartment LIF layer by one step.

    ``u' = beta * (u - threshold * s) + scale * (W s_in + V s_rec)`` and
    ``s' = [u' >= threshold]``.  ``V=None`` drops the recurrent term.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    k = W.shape[0]
    s_in = np.asarray(s_in, dtype=float)
    s_rec = state.s if s_rec is None else np.asarray(s_rec, dtype=float)
    if s_in.shape[-1] != W.shape[1]:
        raise ShapeError(f"s_in has length {s_in.shape[-1]}, W expects {W.shape[1]}")
    if state.u.shape[-1] != k or state.s.shape[-1] != k:
        raise ShapeError("state size does not match W")
    if V is not None:
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if V.shape != (k, k) or s_rec.shape[-1] != k:
            raise ShapeError("V must be k x k and s_rec of length k")
    if not smooth:
        _check_binary("s_in", s_in)
        _check_binary("s_rec", s_rec)
    surrogate = surrogate or SurrogateSpec()
    reset = reset and not smooth
    u = state.u - params.threshold * state.s if reset else state.u
    drive = s_in @ W.T
    if V is not None:
        drive = drive + s_rec @ V.T
    u_next = params.u_rest + params.beta * (u - params.u_rest) + params.input_scale * drive
    if smooth:
        s_next = smooth_activation(u_next, surrogate, params.threshold)
    else:
        s_next = (u_next >= params.threshold).astype(float)
    u_after = u_next - params.threshold * s_next if reset else u_next
    return LayerState(u_next, s_next, state.t + 1, 1, u_after)


def multi_compartment_step(state: LayerState, spec: MultiCompartmentSpec, W, V, s_in,
                           threshold=1.0, surrogate: Optional[SurrogateSpec] = None,
                           selector=None, smooth=False, reset=True) -> LayerState:
    """Advance a multi-compartment layer: ``U' = A U + W s_in + V s`` (times
    ``spec.input_scale``), spikes read from the selected compartment."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    mk = W.shape[0]
    if mk % spec.m:
        raise ShapeError("W rows must be a multiple of the compartment count")
    k = mk // spec.m
    spike_index = spec.spike_compartment
    if selector is not None:
        spike_index = check_selector(selector, spec.m, k)
    s_in = np.asarray(s_in, dtype=float)
    if s_in.shape[-1] != W.shape[1]:
        raise ShapeError(f"s_in has length {s_in.shape[-1]}, W expects {W.shape[1]}")
    if state.u.shape[-1] != mk or state.s.shape[-1] != k:
        raise ShapeError("state size does not match W")
    if V is not None:
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if V.shape != (mk, k):
            raise ShapeError(f"V must be {mk}x{k}")
    u, s, u_after = _advance(state.u, state.s, s_in, W, V, spec.coupling, spec.input_scale,
                             threshold, spike_index, surrogate or SurrogateSpec(),
                             smooth, reset and not smooth)
    return LayerState(u, s, state.t + 1, spec.m, u_after)


# ---------------------------------------------------------------------------
# whole-network stepping


def init_state(spec: NetworkSpec, batch: int) -> list:
    """Zero state: one ``(u, s)`` pair per layer, each with a batch axis."""
    return [(np.zeros((batch, layer.size)), np.zeros((batch, layer.k))) for layer in spec.layers]


def network_step(spec: NetworkSpec, params: dict, state: Sequence, x) -> list:
    """Advance all layers by one step.  Layer ``l`` receives the spikes that
    layer ``l - 1`` emits in the same step."""
    out = []
    inp = x
    for idx, layer in enumerate(spec.layers):
        u, s = state[idx]
        V = params.get(f"layers.{idx}.V") if spec.recurrent else None
        u_new, s_new, _ = _advance(u, s, inp, params[f"layers.{idx}.W"], V, layer.coupling,
                                   layer.input_scale, layer.threshold, layer.spike_index,
                                   spec.surrogate, spec.smooth_forward, spec.resets,
                                   layer.lif.u_rest if layer.compartments is None else 0.0)
        out.append((u_new, s_new))
        inp = s_new
    return out


def spike_derivative(spec: NetworkSpec, idx: int, u) -> np.ndarray:
    """``sigma'`` evaluated on the spiking compartment of layer ``idx``."""
    layer = spec.layers[idx]
    v = u.reshape(u.shape[:-1] + (layer.k, layer.m))[..., layer.spike_index]
    return surrogate_deriv(v, spec.surrogate, layer.threshold)


@dataclass
class Trajectory:
    """Recorded rollout.  ``u[l]`` is ``(B, T, m k)`` and ``s[l]`` is ``(B, T, k)``."""

    inputs: np.ndarray
    u: list
    s: list
    stored: bool = True
    final: Optional[list] = None

    @property
    def T(self) -> int:
        return self.inputs.shape[1]

    @property
    def batch(self) -> int:
        return self.inputs.shape[0]

    def layer_states(self, idx: int, b: int = 0) -> list:
        """Per-timestep :class:`LayerState` objects of one batch element."""
        m = self.u[idx].shape[-1] // self.s[idx].shape[-1]
        return [LayerState(self.u[idx][b, t], self.s[idx][b, t], t, m) for t in range(self.T)]


def as_batch(raster, n_in: int) -> np.ndarray:
    arr = np.asarray(raster, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError("input raster must be T x n or B x T x n")
    if arr.shape[2] != n_in:
        raise ShapeError(f"raster width {arr.shape[2]} != n_in {n_in}")
    return arr


def rollout(spec: NetworkSpec, params: dict, input_raster, store=True) -> Trajectory:
    """Run the network over a ``T x n`` (or ``B x T x n``) raster."""
    x = as_batch(input_raster, spec.n_in)
    B, T, _ = x.shape
    state = init_state(spec, B)
    us = [np.zeros((B, T, layer.size)) for layer in spec.layers] if store else []
    ss = [np.zeros((B, T, layer.k)) for layer in spec.layers] if store else []
    for t in range(T):
        state = network_step(spec, params, state, x[:, t])
        if store:
            for idx, (u, s) in enumerate(state):
                us[idx][:, t] = u
                ss[idx][:, t] = s
    return Trajectory(x, us, ss, stored=store, final=state)
