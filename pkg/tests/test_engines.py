import math

import numpy as np
import pytest

from spikegrad.engines import (ExactRTRL, InfluenceStore, MixedMode, SparseRTRL,
                               assemble_jacobians, bptt, complexity_probe, compute_gradient,
                               finite_difference_oracle, fit_exponent, forward_loss,
                               mixed_mode_gradient, probe_network, relative_error,
                               rtrl_exact_gradient, rtrl_exact_step, rtrl_sparse_gradient,
                               rtrl_sparse_step, streaming_engine, three_factor_gradient,
                               trace_update)
from spikegrad.errors import DomainError, LockingError, SpecError, UsageError
from spikegrad.losses import KernelSpec, LossProgram
from spikegrad.neurons import (LayerSpec, LayerState, NetworkSpec, ReadoutConfig, SurrogateSpec,
                               init_params, make_lif_params, rollout, surrogate_deriv)

from cases import ALL_HEADS, ONLINE_HEADS, make_case


def _lif(beta, mode="one_minus_beta"):
    return make_lif_params(-1.0 / math.log(beta), 1.0, mode=mode)


# -- Jacobians ---------------------------------------------------------------

def test_scalar_total_jacobian():
    # beta=0.9, V=0.5, sigma'=0.25, scale=0.1
    spec = NetworkSpec(1, [LayerSpec(1, 1, _lif(0.9))], mode="RC")
    params = {"layers.0.W": np.array([[1.0]]), "layers.0.V": np.array([[0.5]])}
    prev = LayerState(np.array([1.1]), np.array([0.0]))
    jac = assemble_jacobians(spec, params, prev, np.array([0.0]))
    assert surrogate_deriv(1.1, spec.surrogate) == pytest.approx(0.25)
    assert jac.h_total[0, 0] == pytest.approx(0.9125)


def test_explicit_part_absent_without_recurrence():
    spec = NetworkSpec(2, [LayerSpec(3, 2, _lif(0.9))], mode="FF")
    params = init_params(spec, 0)
    jac = assemble_jacobians(spec, params, LayerState(np.full(3, 0.9), np.zeros(3)), np.ones(2))
    assert not jac.h_explicit.any()
    rd = spec.replace(mode="RD")
    jac = assemble_jacobians(rd, init_params(rd, 0), LayerState(np.full(3, 0.9), np.zeros(3)),
                             np.ones(2))
    assert not jac.h_explicit.any()


def test_zero_diagonal_recurrence():
    spec = NetworkSpec(2, [LayerSpec(3, 2, _lif(0.9), self_connections=False)], mode="RC")
    params = init_params(spec, 0, v_gain=2.0)
    jac = assemble_jacobians(spec, params, LayerState(np.full(3, 0.95), np.zeros(3)), np.ones(2))
    assert jac.h_explicit.any()
    np.testing.assert_array_equal(np.diag(jac.h_explicit), 0.0)


def test_exact_step_base_cases():
    spec = NetworkSpec(2, [LayerSpec(2, 2, _lif(0.9))], mode="RC")
    params = init_params(spec, 1)
    G0 = InfluenceStore.zeros("exact", 2, 1, 2)
    jac0 = assemble_jacobians(spec, params, LayerState(np.zeros(2), np.zeros(2)), np.zeros(2))
    assert not rtrl_exact_step(G0, jac0).G.any()
    jac1 = assemble_jacobians(spec, params, LayerState(np.zeros(2), np.zeros(2)), np.ones(2))
    np.testing.assert_array_equal(rtrl_exact_step(G0, jac1).G, jac1.f_immediate.toarray())


@pytest.mark.parametrize("m", [1, 2])
def test_sparse_step_matches_exact_without_recurrence(m):
    spec, params, x, _, _ = make_case(k=3, n=2, T=15, m=m, zero_v=True, seed=4, batch=1)
    traj = rollout(spec, params, x)
    layer = spec.layers[0]
    G = InfluenceStore.zeros("exact", layer.k, m, layer.n_in)
    E = InfluenceStore.zeros("sparse", layer.k, m, layer.n_in)
    prev = LayerState.zeros(layer.k, m)
    for t in range(traj.T):
        jac = assemble_jacobians(spec, params, prev, x[0, t])
        G, E = rtrl_exact_step(G, jac), rtrl_sparse_step(E, jac)
        np.testing.assert_array_equal(G.G, E.to_dense())
        prev = LayerState(traj.u[0][0, t], traj.s[0][0, t], t, m)


def test_sparse_support_never_grows():
    spec, params, x, _, _ = make_case(k=4, n=3, T=30, m=2, seed=9, batch=1)
    traj = rollout(spec, params, x)
    layer = spec.layers[0]
    E = InfluenceStore.zeros("sparse", layer.k, 2, layer.n_in)
    support = E.support()
    prev = LayerState.zeros(layer.k, 2)
    for t in range(traj.T):
        E = rtrl_sparse_step(E, assemble_jacobians(spec, params, prev, x[0, t]))
        assert not E.to_dense()[~support].any()
        prev = LayerState(traj.u[0][0, t], traj.s[0][0, t], t, 2)


# -- traces and the three-factor rule ----------------------------------------

def test_trace_geometric():
    # q^t = beta^t after a spike at t=0, so the third step after it holds beta^2 = 0.81
    q = np.zeros(1)
    seq = []
    for t in range(1, 4):
        q = trace_update(q, 0.9, np.array([1.0 if t == 1 else 0.0]))
        seq.append(q[0])
    assert seq[2] == pytest.approx(0.81)


def test_trace_decay_bound():
    beta = 0.9
    q = np.ones(1)
    steps = math.ceil(math.log(1e-6) / math.log(beta))
    for _ in range(steps):
        q = trace_update(q, beta, np.zeros(1))
    assert q[0] < 1e-6 * 1.0000001


def test_trace_without_memory():
    s = np.array([1.0, 0.0, 1.0])
    np.testing.assert_array_equal(trace_update(np.array([5.0, 2.0, 1.0]), 0.0, s), s)


def test_three_factor_scalar():
    g = three_factor_gradient([2.0], [1.1], [0.81], SurrogateSpec(slope=10.0))
    assert g[0, 0] == pytest.approx(0.405)
    assert not three_factor_gradient([0.0, 0.0], [1.0, 1.1], [1.0]).any()


def test_three_factor_sum_equals_bptt_for_feedforward():
    # delta kernel: the van Rossum term at t depends only on s^t, so the
    # per-step three-factor updates are the exact gradient
    rng = np.random.default_rng(3)
    k, n, T = 4, 3, 25
    lif = _lif(0.85)
    spec = NetworkSpec(n, [LayerSpec(k, n, lif)], mode="FF")
    params = init_params(spec, 2, w_gain=4.0)
    x = (rng.random((1, T, n)) < 0.4).astype(float)
    target = (rng.random((1, T, k)) < 0.3).astype(float)
    prog = LossProgram("van_rossum", kernel=KernelSpec("delta"))
    ref = bptt(spec, params, x, prog, target).grads["layers.0.W"]
    traj = rollout(spec, params, x)
    q = np.zeros(n)
    total = np.zeros((k, n))
    for t in range(T):
        q = trace_update(q, lif.beta, x[0, t])
        dl_ds = traj.s[0][0, t] - target[0, t]
        total += three_factor_gradient(dl_ds, traj.u[0][0, t], q, spec.surrogate,
                                       lif.threshold, lif.input_scale)
    assert relative_error(total, ref) < 1e-8


# -- BPTT --------------------------------------------------------------------

def test_bptt_scalar_chain():
    # one neuron, T=2, loss only on the final spike: dL/dw = (s2 - y*) sigma'(u2) c (beta x1 + x2)
    lif = _lif(0.8, "unit")
    spec = NetworkSpec(1, [LayerSpec(1, 1, lif)], mode="FF")
    w = 0.7
    params = {"layers.0.W": np.array([[w]])}
    x = np.array([[[1.0], [1.0]]])
    target = np.zeros((1, 2, 1))
    prog = LossProgram("van_rossum", kernel=KernelSpec("delta"), window=(1, 2))
    g = bptt(spec, params, x, prog, target).grads["layers.0.W"][0, 0]
    u2 = lif.beta * w + w
    s2 = float(u2 >= 1.0)
    expected = (s2 - 0.0) * surrogate_deriv(u2, spec.surrogate) * (lif.beta + 1.0)
    assert g == pytest.approx(expected, rel=1e-14)


def test_zero_loss_gives_zero_gradient():
    spec, params, x, _, _ = make_case(head="van_rossum", mode="RC", seed=1)
    prog = LossProgram("van_rossum", kernel=KernelSpec("delta"))
    spikes = rollout(spec, params, x).s[0]
    for engine in ("bptt", "rtrl_exact", "rtrl_sparse", "mixed"):
        rep = compute_gradient(engine, spec, params, x, prog, spikes)
        assert rep.total_loss == 0.0
        assert all(not g.any() for g in rep.grads.values())


# -- exactness across engines -------------------------------------------------

@pytest.mark.parametrize("head", ALL_HEADS)
@pytest.mark.parametrize("mode", ["FF", "RC", "RD"])
@pytest.mark.parametrize("m", [1, 2])
def test_bptt_equals_exact_rtrl(head, mode, m):
    spec, params, x, prog, tg = make_case(k=4, n=3, T=12, mode=mode, head=head, m=m, seed=3)
    a = bptt(spec, params, x, prog, tg)
    b = rtrl_exact_gradient(spec, params, x, prog, tg)
    assert relative_error(a.grads, b.grads) < 1e-10
    assert a.total_loss == pytest.approx(b.total_loss, rel=1e-13)


@pytest.mark.parametrize("mode", ["RC", "RD"])
def test_multilayer_bptt_equals_exact_rtrl(mode):
    spec, params, x, prog, tg = make_case(k=3, n=3, T=10, mode=mode, layers=2, seed=8,
                                          readout_beta=0.6)
    a = bptt(spec, params, x, prog, tg)
    b = rtrl_exact_gradient(spec, params, x, prog, tg)
    assert relative_error(a.grads, b.grads) < 1e-10


@pytest.mark.parametrize("head", ALL_HEADS)
def test_label_delay_does_not_change_gradients(head):
    base = make_case(k=3, n=2, T=10, head=head, seed=6)
    spec, params, x, prog, tg = base
    delayed = make_case(k=3, n=2, T=10, head=head, seed=6, label_delay=3)[3]
    a = rtrl_exact_gradient(spec, params, x, prog, tg)
    b = rtrl_exact_gradient(spec, params, x, delayed, tg)
    assert relative_error(a.grads, b.grads) < 1e-12


@pytest.mark.parametrize("head", ALL_HEADS)
@pytest.mark.parametrize("m", [1, 2])
def test_sparse_equals_exact_without_recurrence(head, m):
    spec, params, x, prog, tg = make_case(k=4, n=3, T=12, head=head, m=m, zero_v=True, seed=5)
    a = rtrl_exact_gradient(spec, params, x, prog, tg)
    b = rtrl_sparse_gradient(spec, params, x, prog, tg)
    assert relative_error(a.grads, b.grads) < 1e-12


def test_sparse_rd_equals_bptt_rd():
    # RD drops the same term in both directions
    spec, params, x, prog, tg = make_case(k=4, n=3, T=12, mode="RD", seed=2)
    a = bptt(spec, params, x, prog, tg)
    b = rtrl_sparse_gradient(spec, params, x, prog, tg)
    assert relative_error(a.grads, b.grads) < 1e-12


def test_sparse_approximation_sign_agreement():
    # measured on this instance: every nonzero coordinate agrees in sign
    spec, params, x, prog, tg = make_case(k=4, n=3, T=20, mode="RC", seed=0, batch=4)
    e = rtrl_exact_gradient(spec, params, x, prog, tg)
    s = rtrl_sparse_gradient(spec, params, x, prog, tg)
    a = np.concatenate([e.grads[k].ravel() for k in sorted(e.grads)])
    b = np.concatenate([s.grads[k].ravel() for k in sorted(e.grads)])
    nz = (a != 0) | (b != 0)
    assert relative_error(a, b) > 1e-6
    assert np.mean(np.sign(a[nz]) == np.sign(b[nz])) >= 0.9


MIXED_CASES = [(h, b) for h in ONLINE_HEADS for b in (0.0, None)
               if not (h == "van_rossum" and b is None)]


@pytest.mark.parametrize("head,readout_beta", MIXED_CASES)
@pytest.mark.parametrize("m", [1, 2])
def test_mixed_equals_sparse(head, readout_beta, m):
    spec, params, x, prog, tg = make_case(k=4, n=3, T=12, head=head, m=m, seed=7,
                                          readout_beta=readout_beta)
    try:
        mixed = mixed_mode_gradient(spec, params, x, prog, tg)
    except LockingError:
        assert readout_beta is None
        return
    sparse = rtrl_sparse_gradient(spec, params, x, prog, tg)
    assert relative_error(mixed.grads, sparse.grads) < 1e-12


@pytest.mark.parametrize("head", ["sum_readout_ce", "max_readout_ce"])
def test_mixed_rejects_locking_heads(head):
    spec, params, x, prog, tg = make_case(head=head, readout_beta=0.0)
    with pytest.raises(LockingError):
        mixed_mode_gradient(spec, params, x, prog, tg)


def test_sparse_and_mixed_are_single_layer():
    spec, params, x, prog, tg = make_case(layers=2)
    with pytest.raises(UsageError):
        rtrl_sparse_gradient(spec, params, x, prog, tg)
    with pytest.raises(UsageError):
        mixed_mode_gradient(spec, params, x, prog, tg)


def test_trace_modes():
    spec, params, x, prog, tg = make_case(readout_beta=0.0)
    assert rtrl_sparse_gradient(spec, params, x, prog, tg).trace_mode == "vector"
    spec, params, x, prog, tg = make_case(readout_beta=0.5)
    assert rtrl_sparse_gradient(spec, params, x, prog, tg).trace_mode == "block"
    spec, params, x, prog, tg = make_case(head="van_rossum")
    assert mixed_mode_gradient(spec, params, x, prog, tg).trace_mode == "filtered"


@pytest.mark.parametrize("head", ALL_HEADS)
def test_forward_loss_identical_across_engines(head):
    spec, params, x, prog, tg = make_case(head=head, readout_beta=0.0, seed=12)
    ref = forward_loss(spec, params, x, prog, tg)
    engines = ["bptt", "rtrl_exact", "rtrl_sparse"]
    if prog.locality == "online":
        engines.append("mixed")
    for engine in engines:
        # streaming engines add per-step terms in a different order
        assert compute_gradient(engine, spec, params, x, prog, tg).total_loss == \
            pytest.approx(ref, rel=1e-13)


def test_streaming_interface_matches_run():
    spec, params, x, prog, tg = make_case(head="step_readout_ce", T=15, seed=4, readout_beta=0.0)
    for engine in ("rtrl_exact", "rtrl_sparse", "mixed"):
        ref = compute_gradient(engine, spec, params, x, prog, tg)
        eng = streaming_engine(engine, spec, params, prog, batch=x.shape[0])
        eng.begin_trial(tg, x.shape[1])
        for t in range(x.shape[1]):
            eng.step(x[:, t])
        grads, loss = eng.end_trial()
        assert relative_error(grads, ref.grads) == 0.0
        np.testing.assert_array_equal(loss, ref.loss)


def test_streaming_engine_names():
    spec, params, _, prog, _ = make_case(readout_beta=0.0)
    assert isinstance(streaming_engine("rtrl_exact", spec, params, prog), ExactRTRL)
    assert isinstance(streaming_engine("rtrl_sparse", spec, params, prog), SparseRTRL)
    assert isinstance(streaming_engine("mixed", spec, params, prog), MixedMode)
    with pytest.raises(UsageError):
        streaming_engine("bptt", spec, params, prog)
    with pytest.raises(UsageError):
        compute_gradient("nope", spec, params, None, prog, None)


# -- finite differences ------------------------------------------------------

def test_finite_difference_quadratic_readout():
    spec = NetworkSpec(2, [LayerSpec(2, 2, _lif(0.9, "unit"))], mode="FF",
                       readout=ReadoutConfig(1, beta=0.0), smooth_forward=True)
    params = init_params(spec, 0, w_gain=2.0)
    rng = np.random.default_rng(1)
    x = (rng.random((1, 8, 2)) < 0.5).astype(float)
    target = rng.random((1, 8, 1))
    prog = LossProgram("local_mse")
    fd = finite_difference_oracle(spec, params, x, prog, target, names=["readout.W"])
    s = rollout(spec, params, x).s[0][0]
    resid = s @ params["readout.W"].T - target[0]
    np.testing.assert_allclose(fd["readout.W"], resid.T @ s, rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("head", ALL_HEADS)
@pytest.mark.parametrize("mode", ["FF", "RC"])
def test_engines_match_finite_differences(head, mode):
    spec, params, x, prog, tg = make_case(k=3, n=2, T=8, mode=mode, head=head, seed=1,
                                          smooth=True, readout_beta=0.0)
    fd = finite_difference_oracle(spec, params, x, prog, tg)
    for engine in ("bptt", "rtrl_exact"):
        assert relative_error(compute_gradient(engine, spec, params, x, prog, tg).grads, fd) < 1e-4


def test_finite_difference_domain():
    spec, params, x, prog, tg = make_case(smooth=True)
    with pytest.raises(DomainError):
        finite_difference_oracle(spec, params, x, prog, tg, h=0.0)
    with pytest.raises(SpecError):
        finite_difference_oracle(spec.replace(smooth_forward=False), params, x, prog, tg)


# -- cost counters -----------------------------------------------------------

def test_bptt_memory_linear_in_T():
    spec = probe_network(8)
    m100 = complexity_probe("bptt", spec, 100)[0]
    m200 = complexity_probe("bptt", spec, 200)[0]
    assert 1.8 <= m200 / m100 <= 2.2


@pytest.mark.parametrize("engine", ["rtrl_exact", "rtrl_sparse", "mixed"])
def test_forward_engines_memory_constant_in_T(engine):
    spec = probe_network(6)
    mems = [complexity_probe(engine, spec, T)[0] for T in (10, 100, 1000)]
    assert max(mems) / min(mems) <= 1.01


def test_fit_exponent():
    assert fit_exponent([2, 4, 8], [3 * 2 ** 3, 3 * 4 ** 3, 3 * 8 ** 3]) == pytest.approx(3.0)


def test_relative_error_definition():
    assert relative_error([1.0, 2.0], [1.0, 2.5]) == pytest.approx(0.2)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error({"a": np.ones(2)}, {"a": np.ones(2), "b": np.ones(1)}) == 1.0
