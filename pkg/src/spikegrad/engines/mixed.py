"""Mixed-mode gradients: reverse mode inside a step, forward traces across steps.

At each step the loss gradient on the output is pulled back through the
output stage and the spike nonlinearity to the membrane (a vector-Jacobian
product that never leaves the current step) and then multiplied by the
forward eligibility traces.  For one-compartment neurons this is the
three-factor rule ``dL/dW = (dL/ds * sigma'(u)) x (scale * q_in)``.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from ..errors import LockingError, UsageError
from ..losses import LossProgram, output_stage
from ..neurons import NetworkSpec, init_state, network_step, spike_derivative
from .common import GradientReport, Meter, apply_masks, batch_inputs, zero_grads


class MixedMode:
    """Mixed-mode engine for single-layer networks with online loss heads.

    The output stage must be instantaneous or a parameter-free kernel filter;
    in the latter case the traces are additionally passed through the filter
    (``filtered`` trace mode).  Anything else would need influence carried
    across steps and is rejected with :class:`LockingError`.
    """

    name = "mixed"

    def __init__(self, spec: NetworkSpec, params: dict, program: LossProgram, batch: int = 1):
        if len(spec.layers) != 1:
            raise UsageError("mixed mode supports single-layer networks only")
        if program.locality != "online":
            raise LockingError(f"loss head {program.head!r} is locking; mixed mode needs an "
                               "online head")
        stage = output_stage(spec, program)
        if stage.trainable and not stage.instantaneous:
            raise LockingError("the trainable readout keeps state across steps; set its "
                               "beta to 0 or use rtrl_sparse")
        self.spec, self.params, self.program = spec, params, program
        self.stage = stage
        self.batch = batch
        layer = spec.layers[0]
        self.filtered = not stage.instantaneous
        self.vector = layer.m == 1
        self.trace_mode = "filtered" if self.filtered else ("vector" if self.vector else "block")
        self.meter = Meter()

    def begin_trial(self, targets, T: int, record_log=False):
        spec, B = self.spec, self.batch
        layer = spec.layers[0]
        k, m, n = layer.k, layer.m, layer.n_in
        rec = spec.recurrent
        self.state = init_state(spec, B)
        self.z = self.stage.init(B)
        self.stream = self.program.stream(targets, B, T, self.stage.n_y)
        self.grads = zero_grads(self.params)
        self.loss = np.zeros(B)
        self.log = [] if record_log else None
        self.t = 0
        self.pending = deque()
        if self.vector:
            self.q_in = np.zeros((B, n))
            self.q_rec = np.zeros((B, k)) if rec else None
        else:
            self.E_W = np.zeros((B, k, m, m, n))
            self.E_V = np.zeros((B, k, m, m, k)) if rec else None
        if self.filtered:
            mo = self.stage.m
            self.F_W = np.zeros((B, k, mo, m, n))
            self.F_V = np.zeros((B, k, mo, m, k)) if rec else None

    def _held(self):
        names = ("q_in", "q_rec", "E_W", "E_V", "F_W", "F_V")
        n = sum(np.size(getattr(self, a, None)) for a in names if getattr(self, a, None) is not None)
        n += sum(np.size(v) for _, snap in self.pending for v in snap.values() if v is not None)
        return n + sum(u.size + s.size for u, s in self.state) + self.z.size

    def _traces(self):
        layer = self.spec.layers[0]
        if not self.vector:
            return self.E_W, self.E_V
        c = layer.input_scale
        E_W = (c * self.q_in)[:, None, None, None, :]
        E_V = None if self.q_rec is None else (c * self.q_rec)[:, None, None, None, :]
        return E_W, E_V

    def step(self, x_t):
        spec, params, stage, meter = self.spec, self.params, self.stage, self.meter
        layer = spec.layers[0]
        m = layer.m
        prev = self.state
        s_prev = prev[0][1]
        self.state = network_step(spec, params, prev, x_t)
        u, s = self.state[0]
        D = spike_derivative(spec, 0, u)

        if self.vector:
            beta = layer.coupling[0, 0]
            self.q_in = beta * self.q_in + x_t
            meter.mult(self.q_in.size)
            if self.q_rec is not None:
                self.q_rec = beta * self.q_rec + s_prev
                meter.mult(self.q_rec.size)
        else:
            diag = np.arange(m)
            c = layer.input_scale
            self.E_W = np.einsum("ce,bkedj->bkcdj", layer.coupling, self.E_W)
            self.E_W[:, :, diag, diag, :] += c * x_t[:, None, None, :]
            meter.mult(self.E_W.size * m)
            if self.E_V is not None:
                self.E_V = np.einsum("ce,bkedj->bkcdj", layer.coupling, self.E_V)
                self.E_V[:, :, diag, diag, :] += c * s_prev[:, None, None, :]
                meter.mult(self.E_V.size * m)

        if self.filtered:
            E_W, E_V = self._traces()
            sel = layer.spike_index
            for key, E in (("F_W", E_W), ("F_V", E_V)):
                F = getattr(self, key)
                if F is None:
                    continue
                local = D[:, :, None, None] * E[:, :, sel]               # (B, k, m, cols)
                F = np.einsum("cd,bkd...->bkc...", stage.A, F)
                F += stage.scale * stage.route[None, None, :, None, None] * local[:, :, None]
                meter.mult(F.size * (stage.m + 1) + local.size)
                setattr(self, key, F)
            snap = {"F_W": self.F_W, "F_V": self.F_V}
        else:
            snap = {"D": D, "s": s}
            if self.vector:
                snap.update(q_in=self.q_in, q_rec=self.q_rec)
            else:
                snap.update(E_W=self.E_W, E_V=self.E_V)
        if self.program.label_delay:
            snap = {key: None if v is None else np.array(v) for key, v in snap.items()}
        self.pending.append((self.t, snap))

        self.z = stage.step(self.z, s, params.get("readout.W"))
        y = stage.output(self.z)
        part = self._release(self.stream.step(y), self.t)
        self.t += 1
        meter.observe(extra=self._held())
        return part

    def _contribution(self, g, snap):
        spec, stage, meter = self.spec, self.stage, self.meter
        layer = spec.layers[0]
        out = {}
        if self.filtered:
            so = stage.sel_index
            for key, name in (("F_W", "layers.0.W"), ("F_V", "layers.0.V")):
                F = snap[key]
                if F is not None:
                    out[name] = np.einsum("bi,bidj->idj", g, F[:, :, so]).reshape(layer.size, -1)
                    meter.mult(F[:, :, so].size)
            return out
        # reverse sweep inside the step: y -> drive -> spikes -> membrane
        gdrive = stage.scale * stage.route[stage.sel_index] * g
        if stage.trainable:
            W_ro = self.params["readout.W"]
            gS = gdrive @ W_ro
            out["readout.W"] = gdrive.T @ snap["s"]
            meter.mult(2 * gdrive.shape[0] * W_ro.size)
        else:
            gS = gdrive
        gU = gS * snap["D"]
        meter.mult(gU.size)
        c = layer.input_scale
        if self.vector:
            out["layers.0.W"] = c * (gU.T @ snap["q_in"])
            meter.mult(gU.shape[0] * layer.k * layer.n_in)
            if snap["q_rec"] is not None:
                out["layers.0.V"] = c * (gU.T @ snap["q_rec"])
                meter.mult(gU.shape[0] * layer.k * layer.k)
        else:
            sel = layer.spike_index
            for key, name in (("E_W", "layers.0.W"), ("E_V", "layers.0.V")):
                E = snap[key]
                if E is not None:
                    out[name] = np.einsum("bi,bidj->idj", gU, E[:, :, sel]).reshape(layer.size, -1)
                    meter.mult(E[:, :, sel].size)
        return out

    def _release(self, events, t_eval):
        part = None
        for src, loss, g in events:
            while self.pending and self.pending[0][0] < src:
                self.pending.popleft()
            snap = self.pending.popleft()[1]
            contrib = self._contribution(g, snap)
            for name, v in contrib.items():
                self.grads[name] += v
            self.loss += loss
            if self.log is not None:
                self.log.append((t_eval, src, loss.copy()))
            if part is None:
                part = {name: np.array(v) for name, v in contrib.items()}
            else:
                for name, v in contrib.items():
                    part[name] = part.get(name, 0.0) + v
        return part

    def end_trial(self):
        self._release(self.stream.finish(), self.t)
        return apply_masks(self.spec, self.grads), self.loss

    def run(self, inputs, targets, record_log=False) -> GradientReport:
        x = batch_inputs(self.spec, inputs)
        self.batch = x.shape[0]
        self.begin_trial(targets, x.shape[1], record_log)
        for t in range(x.shape[1]):
            self.step(x[:, t])
        grads, loss = self.end_trial()
        return GradientReport(grads, self.name, self.meter.peak, self.meter.mults, loss,
                              self.trace_mode, self.log or [])


def mixed_mode_gradient(spec, params, inputs, program, targets, record_log=False) -> GradientReport:
    x = batch_inputs(spec, inputs)
    return MixedMode(spec, params, program, x.shape[0]).run(x, targets, record_log)
