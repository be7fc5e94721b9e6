"""Dense reference Jacobians and single-step influence updates for one layer.

These operate on one trial and materialise every matrix, which makes them
slow but easy to check.  The engines in :mod:`.rtrl` implement the same
recursions on structured arrays and are tested against these.

Parameter columns are ordered ``W`` (row-major) followed by ``V``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ..errors import ShapeError, UsageError
from ..neurons import LayerState, NetworkSpec, SurrogateSpec, surrogate_deriv


@dataclass
class JacobianParts:
    h_implicit: np.ndarray      # (mk, mk), block diagonal
    h_explicit: np.ndarray      # (mk, mk)
    f_immediate: sp.csr_matrix  # (mk, p)

    @property
    def h_total(self) -> np.ndarray:
        return self.h_implicit + self.h_explicit


def assemble_jacobians(spec: NetworkSpec, params: dict, prev: LayerState, s_in,
                       layer: int = 0) -> JacobianParts:
    """Jacobians of ``U^t`` with respect to ``U^{t-1}`` and to the layer's own
    parameters, given the state at ``t - 1`` and the input spikes at ``t``.

    The explicit part ``scale * V diag(sigma'(P U^{t-1})) P`` is zero when the
    network has no recurrent weights or detaches them (RD mode).
    """
    ls = spec.layers[layer]
    k, m, N = ls.k, ls.m, ls.size
    u_prev = np.asarray(prev.u, dtype=float)
    s_prev = np.asarray(prev.s, dtype=float)
    s_in = np.asarray(s_in, dtype=float)
    if u_prev.shape != (N,) or s_prev.shape != (k,) or s_in.shape != (ls.n_in,):
        raise ShapeError("state or input does not match the layer")
    h_impl = np.kron(np.eye(k), ls.coupling)
    P = np.zeros((k, N))
    P[np.arange(k), np.arange(k) * m + ls.spike_index] = 1.0
    h_expl = np.zeros((N, N))
    if spec.recurrent and not spec.detach_recurrent:
        V = params[f"layers.{layer}.V"]
        sig = surrogate_deriv(P @ u_prev, spec.surrogate, ls.threshold)
        h_expl = ls.input_scale * V @ np.diag(sig) @ P
    n = ls.n_in
    p_w = N * n
    p = p_w + (N * k if spec.recurrent else 0)
    rows, cols, vals = [], [], []
    for r in range(N):
        rows.extend([r] * n)
        cols.extend(range(r * n, r * n + n))
        vals.extend(ls.input_scale * s_in)
        if spec.recurrent:
            rows.extend([r] * k)
            cols.extend(range(p_w + r * k, p_w + r * k + k))
            vals.extend(ls.input_scale * s_prev)
    F = sp.csr_matrix((vals, (rows, cols)), shape=(N, p))
    F.eliminate_zeros()
    return JacobianParts(h_impl, h_expl, F)


@dataclass
class InfluenceStore:
    """Influence of one layer's parameters on its state.

    ``exact`` stores the dense ``(mk, p)`` matrix ``G``.  ``sparse`` stores
    block traces ``E_W[i, c, d, j] = dU[i, c]/dW[(i, d), j]`` (and ``E_V``),
    i.e. only the entries inside each neuron's own block of columns.
    """

    variant: str
    k: int
    m: int
    n: int
    G: Optional[np.ndarray] = None
    E_W: Optional[np.ndarray] = None
    E_V: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, variant: str, k: int, m: int, n: int, recurrent: bool = True):
        N = k * m
        if variant == "exact":
            p = N * n + (N * k if recurrent else 0)
            return cls("exact", k, m, n, G=np.zeros((N, p)))
        if variant == "sparse":
            return cls("sparse", k, m, n, E_W=np.zeros((k, m, m, n)),
                       E_V=np.zeros((k, m, m, k)) if recurrent else None)
        raise UsageError(f"unknown influence variant {variant!r}")

    @property
    def recurrent(self) -> bool:
        return (self.G.shape[1] > self.k * self.m * self.n) if self.variant == "exact" \
            else self.E_V is not None

    @property
    def nonzero_count(self) -> int:
        """Stored entries (dense size for ``exact``, trace size for ``sparse``)."""
        if self.variant == "exact":
            return int(self.G.size)
        return int(self.E_W.size + (0 if self.E_V is None else self.E_V.size))

    def support(self) -> np.ndarray:
        """Boolean ``(mk, p)`` mask of the per-neuron block support."""
        k, m, n = self.k, self.m, self.n
        N = k * m
        neuron_row = np.arange(N) // m
        w_cols = np.repeat(np.arange(N) // m, n)
        parts = [neuron_row[:, None] == w_cols[None, :]]
        if self.recurrent:
            v_cols = np.repeat(np.arange(N) // m, k)
            parts.append(neuron_row[:, None] == v_cols[None, :])
        return np.concatenate(parts, axis=1)

    def to_dense(self) -> np.ndarray:
        if self.variant == "exact":
            return self.G.copy()
        k, m, n = self.k, self.m, self.n
        N = k * m
        blocks = [(self.E_W, n)] + ([(self.E_V, k)] if self.E_V is not None else [])
        out = []
        for E, cols in blocks:
            dense = np.zeros((k, m, k, m, cols))
            idx = np.arange(k)
            dense[idx, :, idx] = E
            out.append(dense.reshape(N, N * cols))
        return np.concatenate(out, axis=1)


def rtrl_exact_step(store: InfluenceStore, jac: JacobianParts) -> InfluenceStore:
    """``G^t = (H^I + H^E) G^{t-1} + F^t``."""
    if store.variant != "exact":
        raise UsageError("rtrl_exact_step needs an exact influence store")
    G = jac.h_total @ store.G + jac.f_immediate.toarray()
    return InfluenceStore("exact", store.k, store.m, store.n, G=G)


def rtrl_sparse_step(store: InfluenceStore, jac: JacobianParts) -> InfluenceStore:
    """``G^t = H^I G^{t-1} + F^t`` on the block support; ``H^E`` is ignored."""
    if store.variant != "sparse":
        raise UsageError("rtrl_sparse_step needs a sparse influence store")
    k, m, n = store.k, store.m, store.n
    idx = np.arange(k)
    blocks = jac.h_implicit.reshape(k, m, k, m)[idx, :, idx]            # (k, m, m)
    F = jac.f_immediate.toarray()
    N = k * m
    F_W = F[:, :N * n].reshape(k, m, k, m, n)[idx, :, idx]
    E_W = np.einsum("kce,kedj->kcdj", blocks, store.E_W) + F_W
    E_V = None
    if store.E_V is not None:
        F_V = F[:, N * n:].reshape(k, m, k, m, k)[idx, :, idx]
        E_V = np.einsum("kce,kedj->kcdj", blocks, store.E_V) + F_V
    return InfluenceStore("sparse", k, m, n, E_W=E_W, E_V=E_V)


def trace_update(q, beta, s):
    """Presynaptic trace ``q' = beta * q + s``."""
    q = np.asarray(q, dtype=float)
    s = np.asarray(s, dtype=float)
    if q.shape != s.shape:
        raise ShapeError("trace and spike vectors must have the same length")
    return beta * q + s


def three_factor_gradient(loss_grad_at_spikes, u, q, spec: SurrogateSpec = None,
                          threshold=1.0, scale=1.0):
    """Rank-one weight gradient ``scale * (dL/ds * sigma'(u)) outer q``.

    Rows index postsynaptic neurons, columns presynaptic inputs (the layout
    of ``W``).
    """
    spec = spec or SurrogateSpec()
    post = np.atleast_1d(np.asarray(loss_grad_at_spikes, dtype=float)) * \
        surrogate_deriv(np.atleast_1d(u), spec, threshold)
    return scale * np.outer(post, np.atleast_1d(np.asarray(q, dtype=float)))
