import numpy as np
import pytest

from spikegrad.errors import ConfigError, DomainError
from spikegrad.tasks import (MemoryTaskSpec, RandmanSpec, cue_patterns, generate_task,
                             latency_encode, latency_pattern_task, make_splits,
                             memory_stress_task, randman_generate, randman_values,
                             splitmix64, target_tracking_task, trial_seed)


# -- seeding -----------------------------------------------------------------

def test_splitmix_reference_values():
    # first outputs of the reference split-mix generator seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


def test_trial_seeds_distinct():
    seeds = {trial_seed(3, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert trial_seed(3, 5) != trial_seed(4, 5)


# -- latency coding ----------------------------------------------------------

def test_latency_extremes_and_rounding():
    r = latency_encode([1.0, 0.5, 0.0], 100)
    assert r[:, 0].nonzero()[0].tolist() == [0]
    assert r[:, 1].nonzero()[0].tolist() == [50]
    assert r[:, 2].nonzero()[0].tolist() == [99]
    assert not latency_encode([0.0], 10, silent_zero=True).any()


def test_latency_domain():
    with pytest.raises(DomainError):
        latency_encode([1.2], 10)
    with pytest.raises(DomainError):
        latency_encode([0.5], 0)


# -- splits ------------------------------------------------------------------

def test_splits_disjoint_and_sized():
    tags = make_splits(103, (0.7, 0.2, 0.1), seed=1)
    counts = {t: int(np.sum(tags == t)) for t in ("train", "valid", "test")}
    assert sum(counts.values()) == 103
    for tag, frac in zip(("train", "valid", "test"), (0.7, 0.2, 0.1)):
        assert abs(counts[tag] - frac * 103) <= 1


def test_bad_split_fractions():
    with pytest.raises(ConfigError):
        make_splits(10, (0.5, 0.5, 0.5))


# -- Randman -----------------------------------------------------------------

def test_randman_defaults():
    data = randman_generate(RandmanSpec())
    assert data.rasters.shape == (1000, 50, 20)
    assert sorted(set(data.labels.tolist())) == [0, 1, 2, 3]
    # exactly one spike per input neuron per sample
    np.testing.assert_array_equal(data.rasters.sum(axis=1), 1.0)


def test_randman_single_frequency_is_sinusoid():
    spec = RandmanSpec(n_classes=2, embedding_dim=5, smoothness=1, samples_per_class=20)
    data = randman_generate(spec)
    coeffs = np.array(data.meta["coefficients"])
    latents = np.array(data.meta["latents"])
    for idx in range(len(data)):
        x = latents[idx, 0]
        a, b = coeffs[data.labels[idx], :, 0, 0, 0], coeffs[data.labels[idx], :, 0, 0, 1]
        direct = 0.5 + 0.5 * (a * np.sin(2 * np.pi * x) + b * np.cos(2 * np.pi * x)) / (
            np.abs(a) + np.abs(b))
        np.testing.assert_allclose(randman_values(coeffs, latents[idx], data.labels[idx]), direct)
        times = np.rint((1 - direct) * (spec.T - 1)).astype(int)
        np.testing.assert_array_equal(data.rasters[idx].argmax(axis=0), times)


def test_randman_identical_latents_identical_rasters():
    spec = RandmanSpec(samples_per_class=5)
    data = randman_generate(spec)
    coeffs = np.array(data.meta["coefficients"])
    lat = np.array(data.meta["latents"])[0]
    v = randman_values(coeffs, lat, data.labels[0])
    np.testing.assert_array_equal(latency_encode(np.clip(v, 0, 1), spec.T), data.rasters[0])


def test_randman_single_class():
    data = randman_generate(RandmanSpec(n_classes=1, samples_per_class=10))
    assert not data.labels.any()


def test_randman_determinism_and_validation():
    a = randman_generate(RandmanSpec(samples_per_class=10, seed=3))
    b = randman_generate(RandmanSpec(samples_per_class=10, seed=3))
    c = randman_generate(RandmanSpec(samples_per_class=10, seed=4))
    np.testing.assert_array_equal(a.rasters, b.rasters)
    assert not np.array_equal(a.rasters, c.rasters)
    with pytest.raises(ConfigError):
        randman_generate(RandmanSpec(manifold_dim=3, embedding_dim=2))
    with pytest.raises(ConfigError):
        randman_generate(RandmanSpec(time_window=0.5, dt=1.0))


# -- memory task -------------------------------------------------------------

def test_memory_task_layout():
    spec = MemoryTaskSpec(gap=7)
    data = memory_stress_task(gap=7, n_trials=40)
    assert data.T == spec.cue_steps + 7 + spec.query_steps
    assert data.n_in == spec.n_cue + spec.n_go
    gap = data.rasters[:, spec.cue_steps:spec.cue_steps + 7]
    assert not gap.any()
    assert not data.rasters[:, :spec.cue_steps, spec.n_cue:].any()
    assert data.window() == (data.T - spec.query_steps, data.T)


def test_memory_gap_zero_is_immediate():
    data = memory_stress_task(gap=0, n_trials=20)
    assert data.T == MemoryTaskSpec().cue_steps + MemoryTaskSpec().query_steps


def test_cue_patterns_distinct():
    pats = cue_patterns(MemoryTaskSpec(n_classes=6, seed=2))
    for i in range(6):
        for j in range(i):
            assert np.any(pats[i] != pats[j])


def test_memory_task_validation():
    with pytest.raises(ConfigError):
        memory_stress_task(gap=-1)


# -- other generators --------------------------------------------------------

@pytest.mark.parametrize("kind,params", [
    ("memory", {"gap": 5, "n_trials": 12}),
    ("randman", {"samples_per_class": 4}),
    ("target_tracking", {"n_trials": 6}),
    ("latency_pattern", {"n_trials": 10}),
])
def test_generators_are_pure_and_valid(kind, params):
    a = generate_task(kind, **params)
    b = generate_task(kind, **params)
    np.testing.assert_array_equal(a.rasters, b.rasters)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert set(np.unique(a.rasters)) <= {0.0, 1.0}
    assert a.rasters.shape[1] == a.T
    for tag in ("train", "valid", "test"):
        sub = a.subset(tag)
        assert len(sub) == int(np.sum(a.splits == tag))


def test_target_tracking_shares_target():
    data = target_tracking_task(n_trials=5)
    assert data.targets.shape == (5, 50, 4)
    np.testing.assert_array_equal(data.targets[0], data.targets[4])


def test_latency_pattern_one_spike_per_channel():
    data = latency_pattern_task(n_trials=8)
    np.testing.assert_array_equal(data.rasters.sum(axis=1), 1.0)


def test_unknown_task():
    with pytest.raises(ConfigError):
        generate_task("nope")
