"""Forward-mode (RTRL) gradient engines.

Both engines advance the network one step at a time through
:func:`~spikegrad.neurons.network_step` and carry the influence of every
parameter on the current state, so no trajectory is stored.

* :class:`ExactRTRL` keeps the full influence ``G^t = H^t G^{t-1} + F^t`` of
  all parameters on every state variable, layer by layer.
* :class:`SparseRTRL` drops the explicit (recurrent-synapse) part of ``H``.
  The influence then stays confined to each neuron's own incoming weights:
  per-neuron block traces in general, or shared per-input vector traces when
  neurons have one compartment and the output stage is instantaneous.
"""

from __future__ import annotations

import numpy as np

from ..errors import UsageError
from ..losses import LossProgram, output_stage
from ..neurons import NetworkSpec, init_state, network_step, spike_derivative
from .common import (GradientReport, InfluenceAccumulator, Meter, apply_masks,
                     batch_inputs, zero_grads)


class _StreamingEngine:
    """Common trial/step plumbing.  Subclasses implement ``_reset`` and
    ``_advance`` (which returns ``(y, Gy)``) plus ``contract``."""

    name = ""

    def __init__(self, spec: NetworkSpec, params: dict, program: LossProgram, batch: int = 1):
        self.spec = spec
        self.params = params
        self.program = program
        self.batch = batch
        self.stage = output_stage(spec, program)
        self.meter = Meter()
        self.acc = None
        self.trace_mode = None

    def begin_trial(self, targets, T: int, record_log=False):
        self.state = init_state(self.spec, self.batch)
        self.z = self.stage.init(self.batch)
        stream = self.program.stream(targets, self.batch, T, self.stage.n_y)
        self.acc = InfluenceAccumulator(stream, self.contract, self.params, record_log)
        self._reset()

    def step(self, x_t):
        """Advance one step; returns the gradient released at this step (online
        heads) or None."""
        prev = self.state
        self.state = network_step(self.spec, self.params, prev, x_t)
        y, Gy = self._advance(prev, x_t)
        part = self.acc.push(y, Gy)
        self.meter.observe(extra=self._held() + self.acc.held()
                           + sum(u.size + s.size for u, s in self.state) + self.z.size)
        return part

    def end_trial(self):
        grads, loss = self.acc.finish()
        return apply_masks(self.spec, grads), loss

    def run(self, inputs, targets, record_log=False) -> GradientReport:
        x = batch_inputs(self.spec, inputs)
        if x.shape[0] != self.batch:
            self.batch = x.shape[0]
        self.begin_trial(targets, x.shape[1], record_log)
        for t in range(x.shape[1]):
            self.step(x[:, t])
        grads, loss = self.end_trial()
        return GradientReport(grads, self.name, self.meter.peak, self.meter.mults, loss,
                              self.trace_mode, self.acc.log or [])


# ---------------------------------------------------------------------------


class ExactRTRL(_StreamingEngine):
    """Full influence matrices; gradients equal BPTT's up to rounding."""

    name = "rtrl_exact"

    def __init__(self, spec, params, program, batch=1):
        super().__init__(spec, params, program, batch)
        self.names = list(spec.param_shapes())
        self.shapes = spec.param_shapes()
        self.offsets = {}
        off = 0
        self.layer_end = []
        for l in range(len(spec.layers)):
            for key in ("W", "V"):
                name = f"layers.{l}.{key}"
                if name in self.shapes:
                    self.offsets[name] = off
                    off += int(np.prod(self.shapes[name]))
            self.layer_end.append(off)
        if "readout.W" in self.shapes:
            self.offsets["readout.W"] = off
            off += int(np.prod(self.shapes["readout.W"]))
        self.p_total = off
        # scatter indices of the immediate influence F
        self.scatter = {}
        for name in self.offsets:
            rows, cols = self.shapes[name]
            r, j = np.divmod(np.arange(rows * cols), cols)
            self.scatter[name] = (r, self.offsets[name] + r * cols + j, j)

    def _reset(self):
        B = self.batch
        self.G = [np.zeros((B, layer.size, self.layer_end[l]))
                  for l, layer in enumerate(self.spec.layers)]
        self.Gz = np.zeros((B, self.stage.n_y, self.stage.m, self.p_total))

    def _held(self):
        return sum(g.size for g in self.G) + self.Gz.size

    def _advance(self, prev, x_t):
        spec, params, meter = self.spec, self.params, self.meter
        B = self.batch
        recurrent = spec.recurrent and not spec.detach_recurrent
        new_G = []
        for l, layer in enumerate(spec.layers):
            k, m, N = layer.k, layer.m, layer.size
            p = self.layer_end[l]
            u_prev, s_prev = prev[l]
            Gk = self.G[l].reshape(B, k, m, p)
            G = np.einsum("cd,bkdq->bkcq", layer.coupling, Gk).reshape(B, N, p)
            meter.mult(B * k * m * m * p)
            if recurrent:
                D_prev = spike_derivative(spec, l, u_prev)
                V = params[f"layers.{l}.V"]
                G += layer.input_scale * np.einsum(
                    "rk,bkq->brq", V, D_prev[..., None] * Gk[:, :, layer.spike_index])
                meter.mult(B * k * p + B * N * k * p)
            if l > 0:
                below = spec.layers[l - 1]
                D_in = spike_derivative(spec, l - 1, self.state[l - 1][0])
                Gb = new_G[l - 1].reshape(B, below.k, below.m, -1)[:, :, below.spike_index]
                W = params[f"layers.{l}.W"]
                G[:, :, :Gb.shape[2]] += layer.input_scale * np.einsum(
                    "rk,bkq->brq", W, D_in[..., None] * Gb)
                meter.mult(B * below.k * Gb.shape[2] + B * N * below.k * Gb.shape[2])
            pre = x_t if l == 0 else self.state[l - 1][1]
            r, c, j = self.scatter[f"layers.{l}.W"]
            G[:, r, c] += layer.input_scale * pre[:, j]
            if f"layers.{l}.V" in self.scatter:
                r, c, j = self.scatter[f"layers.{l}.V"]
                G[:, r, c] += layer.input_scale * s_prev[:, j]
            new_G.append(G)
        self.G = new_G

        # output stage
        stage = self.stage
        top = spec.top
        s_top = self.state[-1][1]
        D_top = spike_derivative(spec, len(spec.layers) - 1, self.state[-1][0])
        G_top = new_G[-1].reshape(B, top.k, top.m, -1)[:, :, top.spike_index]
        p_top = G_top.shape[2]
        drive = np.zeros((B, stage.n_y, self.p_total))
        if stage.trainable:
            W_ro = params["readout.W"]
            drive[:, :, :p_top] = np.einsum("nk,bkq->bnq", W_ro, D_top[..., None] * G_top)
            meter.mult(B * top.k * p_top + B * stage.n_y * top.k * p_top)
            r, c, j = self.scatter["readout.W"]
            drive[:, r, c] += s_top[:, j]
        else:
            drive[:, :, :p_top] = D_top[..., None] * G_top
            meter.mult(B * top.k * p_top)
        Gz = np.einsum("cd,bndq->bncq", stage.A, self.Gz)
        Gz += stage.scale * stage.route[None, None, :, None] * drive[:, :, None, :]
        meter.mult(B * stage.n_y * stage.m * (stage.m + 1) * self.p_total)
        self.Gz = Gz
        self.z = stage.step(self.z, s_top, params.get("readout.W"))
        return stage.output(self.z), {"flat": Gz[:, :, stage.sel_index]}

    def contract(self, g, Gy):
        flat = np.einsum("bn,bnq->q", g, Gy["flat"])
        self.meter.mult(flat.size * g.size)
        out = zero_grads(self.params)
        for name, off in self.offsets.items():
            size = int(np.prod(self.shapes[name]))
            out[name] = flat[off:off + size].reshape(self.shapes[name])
        return out

    def influence(self, layer: int = 0) -> np.ndarray:
        """Current influence of all upstream parameters on layer ``layer``."""
        return self.G[layer]


# ---------------------------------------------------------------------------


class SparseRTRL(_StreamingEngine):
    """RTRL without the explicit recurrence.

    Supports single-layer networks.  Trace granularity is chosen automatically
    and reported as ``trace_mode``:

    ``vector``
        one-compartment neurons and an instantaneous output stage; the
        influence of ``W[i, j]`` is ``scale * q_in[j]`` with
        ``q_in' = beta q_in + x``, and likewise for ``V`` with the previous
        spikes.
    ``block``
        otherwise; traces ``E[i, c, d, j] = dU[i, c] / dW[(i, d), j]`` over each
        neuron's own incoming weights, evolved by the compartment coupling.

    The output stage itself is differentiated exactly: a trainable readout
    keeps a dense influence on every output unit, a kernel filter keeps one
    per neuron.
    """

    name = "rtrl_sparse"

    def __init__(self, spec, params, program, batch=1):
        if len(spec.layers) != 1:
            raise UsageError(f"{self.name} supports single-layer networks only")
        super().__init__(spec, params, program, batch)
        layer = spec.layers[0]
        self.vector = layer.m == 1 and self.stage.instantaneous
        self.trace_mode = "vector" if self.vector else "block"

    # -- traces -----------------------------------------------------------

    def _reset(self):
        B = self.batch
        layer = self.spec.layers[0]
        k, m, n = layer.k, layer.m, layer.n_in
        rec = self.spec.recurrent
        if self.vector:
            self.q_in = np.zeros((B, n))
            self.q_rec = np.zeros((B, k)) if rec else None
        else:
            self.E_W = np.zeros((B, k, m, m, n))
            self.E_V = np.zeros((B, k, m, m, k)) if rec else None
        stage = self.stage
        self.out = {}
        if not stage.instantaneous:
            if stage.trainable:
                self.out["W"] = np.zeros((B, stage.n_y, stage.m, k, m, n))
                if rec:
                    self.out["V"] = np.zeros((B, stage.n_y, stage.m, k, m, k))
            else:
                self.out["W"] = np.zeros((B, k, stage.m, m, n))
                if rec:
                    self.out["V"] = np.zeros((B, k, stage.m, m, k))
        self.q_ro = np.zeros((B, stage.m, k)) if stage.trainable else None

    def _held(self):
        arrays = [getattr(self, a, None) for a in ("q_in", "q_rec", "E_W", "E_V", "q_ro")]
        return sum(np.size(a) for a in arrays if a is not None) + sum(
            v.size for v in self.out.values())

    def traces(self):
        """Block traces ``(E_W, E_V)`` of shape ``(B, k, m, m, n|k)``; in vector
        mode these are broadcast views of the vector traces."""
        layer = self.spec.layers[0]
        B, k = self.batch, layer.k
        if not self.vector:
            return self.E_W, self.E_V
        c = layer.input_scale
        E_W = np.broadcast_to((c * self.q_in)[:, None, None, None, :], (B, k, 1, 1, layer.n_in))
        E_V = None
        if self.q_rec is not None:
            E_V = np.broadcast_to((c * self.q_rec)[:, None, None, None, :], (B, k, 1, 1, k))
        return E_W, E_V

    def _update_traces(self, prev, x_t):
        layer = self.spec.layers[0]
        B, k, m = self.batch, layer.k, layer.m
        s_prev = prev[0][1]
        meter = self.meter
        if self.vector:
            beta = layer.coupling[0, 0]
            self.q_in = beta * self.q_in + x_t
            meter.mult(self.q_in.size)
            if self.q_rec is not None:
                self.q_rec = beta * self.q_rec + s_prev
                meter.mult(self.q_rec.size)
            return
        A = layer.coupling
        c = layer.input_scale
        diag = np.arange(m)
        self.E_W = np.einsum("ce,bkedj->bkcdj", A, self.E_W)
        meter.mult(self.E_W.size * m)
        self.E_W[:, :, diag, diag, :] += c * x_t[:, None, None, :]
        if self.E_V is not None:
            self.E_V = np.einsum("ce,bkedj->bkcdj", A, self.E_V)
            meter.mult(self.E_V.size * m)
            self.E_V[:, :, diag, diag, :] += c * s_prev[:, None, None, :]

    def _advance(self, prev, x_t):
        spec, params, stage, meter = self.spec, self.params, self.stage, self.meter
        layer = spec.layers[0]
        B, k, m = self.batch, layer.k, layer.m
        self._update_traces(prev, x_t)
        u, s = self.state[0]
        D = spike_derivative(spec, 0, u)
        E_W, E_V = self.traces()
        sel = layer.spike_index
        so = stage.sel_index
        Gy = {}
        blocks = {"W": E_W, "V": E_V}
        for key, E in blocks.items():
            if E is None:
                continue
            name = f"layers.0.{key}"
            Esel = D[:, :, None, None] * E[:, :, sel]               # (B, k, m, cols)
            meter.mult(Esel.size)
            if stage.trainable:
                drive = np.einsum("ni,bidj->bnidj", params["readout.W"], Esel)
                meter.mult(drive.size)
            else:
                drive = Esel
            if stage.instantaneous:
                G = stage.scale * stage.route[so] * drive
            else:
                old = self.out[key]
                G = np.einsum("cd,bnd...->bnc...", stage.A, old)
                G += stage.scale * np.multiply.outer(stage.route, drive).transpose(
                    1, 2, 0, *range(3, drive.ndim + 1))
                meter.mult(old.size * (stage.m + 1))
                self.out[key] = G
                G = G[:, :, so]
            if stage.trainable:
                Gy[name] = G.reshape(B, stage.n_y, k * m, -1)           # dense layout
            else:
                Gy[name] = G                                            # row blocks
        if stage.trainable:
            self.q_ro = np.einsum("cd,bdk->bck", stage.A, self.q_ro) +stage.scale * stage.route[None, :, None] * s[:, None, :]
            meter.mult(self.q_ro.size * (stage.m + 1))
            Gy["readout.W"] = np.broadcast_to(self.q_ro[:, None, so], (B, stage.n_y, k))
        self.z = stage.step(self.z, s, params.get("readout.W"))
        return stage.output(self.z), Gy

    def contract(self, g, Gy):
        spec = self.spec
        layer = spec.layers[0]
        out = zero_grads(self.params)
        for name, G in Gy.items():
            if name == "readout.W":
                out[name] = np.einsum("bn,bni->ni", g, G)
            elif self.stage.trainable:
                out[name] = np.einsum("bn,bnrj->rj", g, G)
            else:
                out[name] = np.einsum("bi,bidj->idj", g, G).reshape(layer.size, -1)
            self.meter.mult(np.size(G))
        return out

    def store(self, b: int = 0):
        """:class:`~spikegrad.engines.jacobians.InfluenceStore` view of trial ``b``."""
        from .jacobians import InfluenceStore
        E_W, E_V = self.traces()
        layer = self.spec.layers[0]
        return InfluenceStore("sparse", layer.k, layer.m, layer.n_in,
                              E_W=np.array(E_W[b]), E_V=None if E_V is None else np.array(E_V[b]))


def rtrl_exact_gradient(spec, params, inputs, program, targets, record_log=False) -> GradientReport:
    x = batch_inputs(spec, inputs)
    return ExactRTRL(spec, params, program, x.shape[0]).run(x, targets, record_log)


def rtrl_sparse_gradient(spec, params, inputs, program, targets, record_log=False) -> GradientReport:
    x = batch_inputs(spec, inputs)
    return SparseRTRL(spec, params, program, x.shape[0]).run(x, targets, record_log)
