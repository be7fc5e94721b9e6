"""Reverse-mode gradients over a stored trajectory."""

from __future__ import annotations

import numpy as np

from ..errors import UsageError
from ..losses import LossProgram, output_stage
from ..neurons import NetworkSpec, Trajectory, rollout, spike_derivative
from .common import GradientReport, Meter, apply_masks, batch_inputs, zero_grads


def bptt_gradient(trajectory: Trajectory, program: LossProgram, spec: NetworkSpec,
                  params: dict, targets) -> GradientReport:
    """Backpropagation through time.

    The credit on each layer's state is carried backwards as
    ``c^t = c^{t+1} H^{t+1} + d^t``, where ``H`` holds the compartment coupling
    (implicit part), the recurrent weights (explicit part, dropped in RD
    mode) and, between layers, the feed-forward weights.  The reset is not
    differentiated.

    Raises
    ------
    UsageError
        If the trajectory was not stored.
    """
    if not trajectory.stored:
        raise UsageError("BPTT needs a stored trajectory (rollout(..., store=True))")
    meter = Meter()
    x = trajectory.inputs
    B, T, _ = x.shape
    L = len(spec.layers)
    stage = output_stage(spec, program)
    W_ro = params.get("readout.W")

    # forward through the output stage, keeping its states
    s_top = trajectory.s[-1]
    z = stage.init(B)
    y = np.zeros((B, T, stage.n_y))
    for t in range(T):
        z = stage.step(z, s_top[:, t], W_ro)
        y[:, t] = stage.output(z)
    head = program.evaluate(y, targets)
    g_y = head.grad

    D = [spike_derivative(spec, l, trajectory.u[l]) for l in range(L)]
    lam = [np.zeros((B, T, layer.size)) for layer in spec.layers]
    g_drive = np.zeros((B, T, stage.n_y))
    recurrent = spec.recurrent and not spec.detach_recurrent

    lam_z = np.zeros((B, stage.n_y, stage.m))
    sel_o = stage.sel_index
    lam_next = [np.zeros((B, layer.size)) for layer in spec.layers]
    for t in range(T - 1, -1, -1):
        lam_z = lam_z @ stage.A
        lam_z[..., sel_o] += g_y[:, t]
        gd = stage.scale * (lam_z @ stage.route)
        g_drive[:, t] = gd
        meter.mult(B * stage.n_y * stage.m * (stage.m + 1))
        if stage.trainable:
            gS = gd @ W_ro
            meter.mult(B * W_ro.size)
        else:
            gS = gd
        for l in range(L - 1, -1, -1):
            layer = spec.layers[l]
            if l < L - 1:
                upper = spec.layers[l + 1]
                gS = upper.input_scale * (lam[l + 1][:, t] @ params[f"layers.{l + 1}.W"])
                meter.mult(B * upper.size * layer.k)
            if recurrent:
                gS = gS + layer.input_scale * (lam_next[l] @ params[f"layers.{l}.V"])
                meter.mult(B * layer.size * layer.k)
            lk = lam_next[l].reshape(B, layer.k, layer.m) @ layer.coupling
            meter.mult(B * layer.k * layer.m * layer.m)
            lk[..., layer.spike_index] += gS * D[l][:, t]
            meter.mult(B * layer.k)
            lam_next[l] = lk.reshape(B, layer.size)
            lam[l][:, t] = lam_next[l]
        meter.observe(extra=sum(a.size for a in lam_next) + lam_z.size)

    grads = zero_grads(params)
    for l, layer in enumerate(spec.layers):
        pre = x if l == 0 else trajectory.s[l - 1]
        grads[f"layers.{l}.W"] = layer.input_scale * np.einsum("btr,btj->rj", lam[l], pre)
        meter.mult(B * T * layer.size * pre.shape[2])
        if spec.recurrent:
            grads[f"layers.{l}.V"] = layer.input_scale * np.einsum(
                "btr,btj->rj", lam[l][:, 1:], trajectory.s[l][:, :-1])
            meter.mult(B * (T - 1) * layer.size * layer.k)
    if stage.trainable:
        grads["readout.W"] = np.einsum("btn,bti->ni", g_drive, s_top)
        meter.mult(B * T * W_ro.size)

    stored = x.size + sum(u.size + s.size for u, s in zip(trajectory.u, trajectory.s))
    stored += B * T * stage.size() + g_y.size + g_drive.size + sum(a.size for a in lam)
    stored += sum(d.size for d in D)
    meter.observe(extra=stored)
    return GradientReport(apply_masks(spec, grads), "bptt", meter.peak, meter.mults,
                          head.loss, None)


def bptt(spec: NetworkSpec, params: dict, inputs, program: LossProgram, targets) -> GradientReport:
    """Roll out the network and run :func:`bptt_gradient`."""
    traj = rollout(spec, params, batch_inputs(spec, inputs), store=True)
    return bptt_gradient(traj, program, spec, params, targets)
