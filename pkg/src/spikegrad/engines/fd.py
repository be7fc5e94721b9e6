"""Central finite differences on the smooth-forward network."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError, SpecError
from .common import batch_inputs, forward_loss


def finite_difference_oracle(spec, params, inputs, program, targets, h=1e-5, names=None) -> dict:
    """``(L(theta + h) - L(theta - h)) / 2h`` for every entry of the selected
    parameters (all by default).

    The network must use the smooth forward pass (``spec.smooth_forward``),
    in which the spike is replaced by the antiderivative of the surrogate and
    there is no reset; only then is the loss differentiable.
    """
    if not h > 0:
        raise DomainError(f"finite-difference step must be positive, got {h!r}")
    if not spec.smooth_forward:
        raise SpecError("finite differences need a smooth-forward network "
                        "(spec.replace(smooth_forward=True))")
    x = batch_inputs(spec, inputs)
    work = {k: np.array(v, dtype=float) for k, v in params.items()}
    masks = spec.masks()
    grads = {}
    for name in names or list(work):
        arr = work[name]
        g = np.zeros_like(arr)
        active = masks.get(name, np.ones(arr.shape, dtype=bool))
        for idx in zip(*np.nonzero(active)):
            keep = arr[idx]
            arr[idx] = keep + h
            up = forward_loss(spec, work, x, program, targets)
            arr[idx] = keep - h
            down = forward_loss(spec, work, x, program, targets)
            arr[idx] = keep
            g[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads
