"""Seeded synthetic spike tasks.

Every generator is a pure function of its arguments.  Per-trial randomness is
drawn from ``trial_seed(seed, index)`` (a split-mix hash), so any single trial
can be regenerated without producing the ones before it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DomainError

GENERATOR_VERSION = 1
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One split-mix step on a 64-bit integer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def trial_seed(seed: int, index: int) -> int:
    return splitmix64(splitmix64(int(seed) & _MASK64) ^ (int(index) & _MASK64))


@dataclass
class TrialSet:
    """Rasters ``(N, T, n)`` of 0/1 floats, labels ``(N,)`` and split tags.

    ``targets`` optionally holds per-trial target streams ``(N, T, n_y)`` for
    regression-style losses.
    """

    rasters: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    meta: dict = field(default_factory=dict)
    targets: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.labels)

    @property
    def T(self) -> int:
        return self.rasters.shape[1]

    @property
    def n_in(self) -> int:
        return self.rasters.shape[2]

    def subset(self, tag: str) -> "TrialSet":
        idx = np.flatnonzero(self.splits == tag)
        targets = None if self.targets is None else self.targets[idx]
        return TrialSet(self.rasters[idx], self.labels[idx], self.splits[idx], self.meta, targets)

    def window(self) -> Optional[tuple]:
        w = self.meta.get("response_window")
        return None if w is None else tuple(w)


def make_splits(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> np.ndarray:
    """Random disjoint ``train``/``valid``/``test`` tags with sizes within one
    sample of ``fractions * n``."""
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ConfigError("split fractions must be three non-negative numbers summing to 1",
                          "task.splits")
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_valid = min(n_valid, n - n_train)
    tags = np.array(["train"] * n_train + ["valid"] * n_valid + ["test"] * (n - n_train - n_valid))
    perm = np.random.default_rng(trial_seed(seed, 0x5EED)).permutation(n)
    out = np.empty(n, dtype=tags.dtype)
    out[perm] = tags
    return out


# ---------------------------------------------------------------------------
# latency coding


def latency_encode(values, t_max: int, silent_zero: bool = False) -> np.ndarray:
    """One spike per neuron at step ``rint((1 - v) * (t_max - 1))``.

    Rounding is half-to-even.  With ``silent_zero`` a value of exactly 0
    produces no spike.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise DomainError("latency_encode expects a vector of values")
    if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise DomainError("latency values must lie in [0, 1]")
    if t_max < 1:
        raise DomainError("t_max must be >= 1")
    raster = np.zeros((t_max, v.size))
    times = np.rint((1.0 - v) * (t_max - 1)).astype(int)
    fire = v != 0.0 if silent_zero else np.ones(v.size, dtype=bool)
    raster[times[fire], np.flatnonzero(fire)] = 1.0
    return raster


# ---------------------------------------------------------------------------
# smooth random manifolds


@dataclass(frozen=True)
class RandmanSpec:
    n_classes: int = 4
    manifold_dim: int = 1
    embedding_dim: int = 20
    smoothness: int = 4
    samples_per_class: int = 250
    time_window: float = 50.0
    dt: float = 1.0
    seed: int = 0
    splits: tuple = (0.8, 0.1, 0.1)

    @property
    def T(self) -> int:
        return int(round(self.time_window / self.dt))


def randman_coefficients(spec: RandmanSpec) -> np.ndarray:
    """Fourier coefficients ``(n_classes, embedding_dim, manifold_dim, smoothness, 2)``."""
    rng = np.random.default_rng(trial_seed(spec.seed, -1))
    return rng.standard_normal((spec.n_classes, spec.embedding_dim, spec.manifold_dim,
                                spec.smoothness, 2))


def randman_values(coeffs: np.ndarray, latent: np.ndarray, label: int) -> np.ndarray:
    """Map a latent point in ``[0, 1]^D`` to per-neuron values in ``[0, 1]``.

    ``g_i(x) = sum_d sum_f (a sin(2 pi f x_d) + b cos(2 pi f x_d)) / f`` is
    rescaled by the largest value it could take, ``sum (|a| + |b|) / f``.
    """
    c = coeffs[label]                                       # (n, D, F, 2)
    F = c.shape[2]
    freq = np.arange(1, F + 1)
    phase = 2 * np.pi * freq[None, :] * np.asarray(latent)[:, None]      # (D, F)
    basis = np.stack([np.sin(phase), np.cos(phase)], axis=-1) / freq[None, :, None]
    g = np.einsum("idfk,dfk->i", c, basis)
    norm = np.einsum("idfk,f->i", np.abs(c), 1.0 / freq)
    return 0.5 + 0.5 * g / norm


def randman_generate(spec: RandmanSpec) -> TrialSet:
    """Smooth-random-manifold spike-timing classification.

    Each class owns a random smooth map from the latent cube to one spike time
    per input neuron; samples draw latent points uniformly.
    """
    if spec.manifold_dim < 1 or spec.embedding_dim < spec.manifold_dim:
        raise ConfigError("need 1 <= manifold_dim <= embedding_dim", "task.manifold_dim")
    if spec.time_window < spec.dt:
        raise ConfigError("time_window is shorter than one timestep", "task.time_window")
    if spec.smoothness < 1 or spec.n_classes < 1 or spec.samples_per_class < 1:
        raise ConfigError("smoothness, n_classes and samples_per_class must be >= 1", "task")
    coeffs = randman_coefficients(spec)
    N = spec.n_classes * spec.samples_per_class
    T = spec.T
    rasters = np.zeros((N, T, spec.embedding_dim))
    labels = np.arange(N) % spec.n_classes
    latents = np.zeros((N, spec.manifold_dim))
    for idx in range(N):
        rng = np.random.default_rng(trial_seed(spec.seed, idx))
        latents[idx] = rng.random(spec.manifold_dim)
        values = randman_values(coeffs, latents[idx], labels[idx])
        rasters[idx] = latency_encode(np.clip(values, 0.0, 1.0), T)
    meta = {"generator": "randman", "version": GENERATOR_VERSION,
            "spec": _jsonable(dataclasses.asdict(spec)), "T": T,
            "coefficients": coeffs.tolist(), "latents": latents.tolist()}
    return TrialSet(rasters, labels, make_splits(N, spec.splits, spec.seed), meta)


# ---------------------------------------------------------------------------
# temporal memory


@dataclass(frozen=True)
class MemoryTaskSpec:
    gap: int = 50
    n_classes: int = 4
    n_trials: int = 500
    n_cue: int = 16
    n_go: int = 4
    cue_steps: int = 10
    query_steps: int = 10
    pattern_rate: float = 0.25
    drop_rate: float = 0.1
    noise_rate: float = 0.0
    go_rate: float = 0.5
    seed: int = 0
    splits: tuple = (0.8, 0.1, 0.1)

    @property
    def T(self) -> int:
        return self.cue_steps + self.gap + self.query_steps

    @property
    def n_in(self) -> int:
        return self.n_cue + self.n_go


def cue_patterns(spec: MemoryTaskSpec) -> np.ndarray:
    """Per-class binary cue patterns ``(n_classes, cue_steps, n_cue)``; every
    pair differs in at least one entry."""
    rng = np.random.default_rng(trial_seed(spec.seed, -2))
    patterns = []
    while len(patterns) < spec.n_classes:
        p = (rng.random((spec.cue_steps, spec.n_cue)) < spec.pattern_rate).astype(float)
        if p.any() and all(np.any(p != q) for q in patterns):
            patterns.append(p)
    return np.array(patterns)


def memory_stress_task(gap: int = 50, n_classes: int = 4, seed: int = 0, **kwargs) -> TrialSet:
    """Delayed pattern classification.

    A class-specific spike pattern on the cue channels fills the first
    ``cue_steps`` steps (each spike dropped with ``drop_rate``), ``gap`` steps
    follow, then the go channels fire at random (probability ``go_rate`` per
    step) during the final ``query_steps`` steps, which form the response
    window.  The random go drive keeps exponentially small leftovers of the
    cue in the membrane from being decodable.  Optional background spikes at
    ``noise_rate`` appear on the cue channels at every step (silent gap by
    default).
    """
    if gap < 0:
        raise ConfigError("gap must be >= 0", "task.gap")
    spec = MemoryTaskSpec(gap=gap, n_classes=n_classes, seed=seed, **kwargs)
    if spec.cue_steps < 1 or spec.query_steps < 1 or spec.n_cue < 1:
        raise ConfigError("cue_steps, query_steps and n_cue must be >= 1", "task")
    patterns = cue_patterns(spec)
    T, N = spec.T, spec.n_trials
    rasters = np.zeros((N, T, spec.n_in))
    labels = np.arange(N) % n_classes
    for idx in range(N):
        rng = np.random.default_rng(trial_seed(seed, idx))
        keep = rng.random(patterns[0].shape) >= spec.drop_rate
        rasters[idx, :spec.cue_steps, :spec.n_cue] = patterns[labels[idx]] * keep
        noise = rng.random((T, spec.n_cue)) < spec.noise_rate
        rasters[idx, :, :spec.n_cue] = np.maximum(rasters[idx, :, :spec.n_cue], noise)
        go = rng.random((spec.query_steps, spec.n_go)) < spec.go_rate
        rasters[idx, T - spec.query_steps:, spec.n_cue:] = go
    meta = {"generator": "memory_stress", "version": GENERATOR_VERSION,
            "spec": _jsonable(dataclasses.asdict(spec)), "T": T,
            "response_window": [T - spec.query_steps, T], "patterns": patterns.tolist()}
    return TrialSet(rasters, labels, make_splits(N, spec.splits, seed), meta)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# target tracking and static patterns


def target_tracking_task(n_in: int = 10, n_out: int = 4, T: int = 50, n_trials: int = 40,
                         rate: float = 0.1, seed: int = 0) -> TrialSet:
    """Map random Poisson inputs to fixed random output spike trains.

    Every trial shares the same output target (one fixed random raster per
    task); inputs are fresh Poisson spikes per trial plus a fixed "frozen"
    pattern shared by all trials, so the mapping is learnable.
    """
    base = np.random.default_rng(trial_seed(seed, -3))
    frozen = (base.random((T, n_in)) < rate).astype(float)
    target = (base.random((T, n_out)) < rate).astype(float)
    rasters = np.zeros((n_trials, T, n_in))
    for idx in range(n_trials):
        rng = np.random.default_rng(trial_seed(seed, idx))
        rasters[idx] = np.maximum(frozen, rng.random((T, n_in)) < rate / 4)
    targets = np.repeat(target[None], n_trials, axis=0)
    meta = {"generator": "target_tracking", "version": GENERATOR_VERSION, "T": T,
            "spec": {"n_in": n_in, "n_out": n_out, "T": T, "n_trials": n_trials,
                     "rate": rate, "seed": seed}}
    return TrialSet(rasters, np.zeros(n_trials, dtype=int), make_splits(n_trials, seed=seed),
                    meta, targets)


def latency_pattern_task(n_in: int = 10, n_classes: int = 2, T: int = 20, n_trials: int = 200,
                         jitter: float = 0.05, seed: int = 0) -> TrialSet:
    """Latency-coded noisy copies of one random prototype vector per class."""
    base = np.random.default_rng(trial_seed(seed, -4))
    protos = base.random((n_classes, n_in))
    rasters = np.zeros((n_trials, T, n_in))
    labels = np.arange(n_trials) % n_classes
    for idx in range(n_trials):
        rng = np.random.default_rng(trial_seed(seed, idx))
        v = np.clip(protos[labels[idx]] + jitter * rng.standard_normal(n_in), 0.0, 1.0)
        rasters[idx] = latency_encode(v, T)
    meta = {"generator": "latency_pattern", "version": GENERATOR_VERSION, "T": T,
            "spec": {"n_in": n_in, "n_classes": n_classes, "T": T, "n_trials": n_trials,
                     "jitter": jitter, "seed": seed}, "prototypes": protos.tolist()}
    return TrialSet(rasters, labels, make_splits(n_trials, seed=seed), meta)


TASKS = {
    "randman": lambda **kw: randman_generate(RandmanSpec(**kw)),
    "memory": memory_stress_task,
    "target_tracking": target_tracking_task,
    "latency_pattern": latency_pattern_task,
}


def generate_task(kind: str, **params) -> TrialSet:
    """Build a task by name: ``randman``, ``memory``, ``target_tracking`` or
    ``latency_pattern``."""
    if kind not in TASKS:
        raise ConfigError(f"unknown task {kind!r}; choose from {sorted(TASKS)}", "task.kind")
    if kind == "randman" and "splits" in params:
        params = dict(params, splits=tuple(params["splits"]))
    return TASKS[kind](**params)
