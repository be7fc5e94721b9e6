"""Training loops, optimizers, the FF/RC/RD ablation and grid search."""

from __future__ import annotations

import dataclasses
import itertools
import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .engines import bptt, forward_outputs, streaming_engine
from .errors import ConfigError, LockingError, UsageError
from .losses import LossProgram
from .neurons import NetworkSpec, init_params
from .tasks import TrialSet, trial_seed

# ---------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: Optional[float] = 10.0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}", "optimizer.kind")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", "optimizer.learning_rate")
        if self.clip is not None and not self.clip > 0:
            raise ConfigError("clip must be positive or absent", "optimizer.clip")


def optimizer_init(spec: OptimizerSpec, params: dict) -> dict:
    if spec.kind == "sgd":
        return {"step": 0}
    return {"step": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def clip_gradients(grads: dict, max_norm: Optional[float]) -> dict:
    """Rescale so the global L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def optimizer_step(spec: OptimizerSpec, params: dict, grads: dict, state: dict):
    """Pure update; returns ``(new_params, new_state)``."""
    grads = clip_gradients(grads, spec.clip)
    step = state["step"] + 1
    if spec.kind == "sgd":
        return ({k: params[k] - spec.learning_rate * grads[k] for k in params}, {"step": step})
    m = {k: spec.beta1 * state["m"][k] + (1 - spec.beta1) * grads[k] for k in params}
    v = {k: spec.beta2 * state["v"][k] + (1 - spec.beta2) * grads[k] ** 2 for k in params}
    c1 = 1 - spec.beta1 ** step
    c2 = 1 - spec.beta2 ** step
    new = {k: params[k] - spec.learning_rate * (m[k] / c1) / (np.sqrt(v[k] / c2) + spec.eps)
           for k in params}
    return new, {"step": step, "m": m, "v": v}


# ---------------------------------------------------------------------------
# configuration and records


@dataclass(frozen=True)
class InitSpec:
    w_gain: float = 1.0
    v_gain: float = 1.0
    readout_gain: float = 1.0
    v_diag: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to train one network on one task.

    ``task`` is ``(kind, params)`` for :func:`spikegrad.tasks.generate_task`;
    it may be None when data are passed to the training functions directly.
    """

    network: NetworkSpec
    program: LossProgram
    optimizer: OptimizerSpec = OptimizerSpec()
    engine: str = "bptt"
    epochs: int = 20
    batch_size: int = 32
    seeds: tuple = (0,)
    cadence: str = "trial"
    init: InitSpec = InitSpec()
    task: Optional[tuple] = None
    output_dir: Optional[str] = None
    eval_train: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", "train.epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "train.batch_size")
        if self.cadence not in ("trial", "step"):
            raise ConfigError("cadence must be 'trial' or 'step'", "train.cadence")
        if self.engine not in ("bptt", "rtrl_exact", "rtrl_sparse", "mixed"):
            raise ConfigError(f"unknown engine {self.engine!r}", "train.engine")

    @property
    def mode(self) -> str:
        return self.network.mode


@dataclass
class MetricRecord:
    seed: int
    epoch: int
    train_error: Optional[float]
    valid_error: Optional[float]
    test_error: Optional[float]
    train_loss: float
    valid_loss: Optional[float]
    peak_memory_elements: int
    scalar_mult_count: int
    wall_clock: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    records: list
    params: dict
    config: ExperimentConfig
    seed: int

    def best_epoch(self) -> MetricRecord:
        """Record with the lowest validation error (earliest on ties)."""
        def key(r):
            v = r.valid_error if r.valid_error is not None else r.valid_loss
            return (np.inf if v is None else v, r.epoch)
        return min(self.records, key=key)


# ---------------------------------------------------------------------------
# helpers


def _prepare(config: ExperimentConfig, data: Optional[TrialSet]):
    if data is None:
        if config.task is None:
            raise ConfigError("no task configured and no data given", "task")
        from .tasks import generate_task
        kind, params = config.task
        data = generate_task(kind, **dict(params))
    if data.n_in != config.network.n_in:
        raise ConfigError(f"network expects {config.network.n_in} inputs, task provides "
                          f"{data.n_in}", "network.n_in")
    program = config.program
    if program.window is None and data.window() is not None:
        program = dataclasses.replace(program, window=data.window())
    return data, program


def _targets(program: LossProgram, data: TrialSet, idx):
    if program.classification:
        return data.labels[idx]
    if data.targets is None:
        raise ConfigError(f"loss head {program.head!r} needs target streams", "loss.head")
    return data.targets[idx]


def evaluate(spec: NetworkSpec, params: dict, program: LossProgram, data: TrialSet,
             chunk: int = 256):
    """Mean loss and classification error (None for regression heads)."""
    if len(data) == 0:
        return None, None
    losses, wrong = 0.0, 0
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        _, y = forward_outputs(spec, params, data.rasters[idx], program)
        losses += float(np.sum(program.evaluate(y, _targets(program, data, idx)).loss))
        if program.classification:
            wrong += int(np.sum(program.predict(y) != data.labels[idx]))
    err = wrong / len(data) if program.classification else None
    return losses / len(data), err


def _batches(n: int, size: int, seed: int, epoch: int):
    order = np.random.default_rng(trial_seed(seed, 1000 + epoch)).permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _record(config, spec, params, program, splits, seed, epoch, train_loss, peak, mults, t0):
    train, valid, test = splits
    tr_loss, tr_err = evaluate(spec, params, program, train) if config.eval_train else (None, None)
    va_loss, va_err = evaluate(spec, params, program, valid)
    _, te_err = evaluate(spec, params, program, test)
    return MetricRecord(seed, epoch, tr_err, va_err, te_err,
                        tr_loss if train_loss is None else train_loss, va_loss,
                        int(peak), int(mults), time.perf_counter() - t0)


def _finish(config, result: TrainResult):
    if config.output_dir:
        from .io import save_run
        save_run(config.output_dir, result)
    return result


# ---------------------------------------------------------------------------
# training loops


def train_offline(config: ExperimentConfig, data: Optional[TrialSet] = None,
                  seed: Optional[int] = None) -> TrainResult:
    """Minibatch training with BPTT.  Epoch 0 evaluates the initial weights."""
    if config.engine != "bptt":
        raise UsageError("train_offline uses the bptt engine; use train_streaming for "
                         f"{config.engine!r}")
    seed = config.seeds[0] if seed is None else seed
    data, program = _prepare(config, data)
    spec = config.network
    splits = (data.subset("train"), data.subset("valid"), data.subset("test"))
    train = splits[0]
    params = init_params(spec, seed, **dataclasses.asdict(config.init))
    opt = optimizer_init(config.optimizer, params)
    t0 = time.perf_counter()
    records = [_record(config, spec, params, program, splits, seed, 0, None, 0, 0, t0)]
    peak = mults = 0
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for idx in _batches(len(train), config.batch_size, seed, epoch):
            rep = bptt(spec, params, train.rasters[idx], program, _targets(program, train, idx))
            grads = {k: g / len(idx) for k, g in rep.grads.items()}
            params, opt = optimizer_step(config.optimizer, params, grads, opt)
            total += rep.total_loss
            peak = max(peak, rep.peak_memory_elements)
            mults += rep.scalar_mult_count
        records.append(_record(config, spec, params, program, splits, seed, epoch,
                               total / max(len(train), 1), peak, mults, t0))
    return _finish(config, TrainResult(records, params, config, seed))


def train_streaming(config: ExperimentConfig, data: Optional[TrialSet] = None,
                    seed: Optional[int] = None) -> TrainResult:
    """Online training with a forward-mode engine.

    ``cadence="trial"`` applies the gradient accumulated over each minibatch
    of trials at the trial boundary; ``cadence="step"`` applies every released
    gradient immediately (requires an online loss head).  No trajectory is
    stored in either case.
    """
    if config.engine == "bptt":
        raise UsageError("train_streaming needs rtrl_exact, rtrl_sparse or mixed")
    if config.cadence == "step" and config.program.locality != "online":
        raise LockingError(f"loss head {config.program.head!r} is locking and cannot be "
                           "updated every step")
    seed = config.seeds[0] if seed is None else seed
    data, program = _prepare(config, data)
    spec = config.network
    splits = (data.subset("train"), data.subset("valid"), data.subset("test"))
    train = splits[0]
    params = init_params(spec, seed, **dataclasses.asdict(config.init))
    opt = optimizer_init(config.optimizer, params)
    t0 = time.perf_counter()
    records = [_record(config, spec, params, program, splits, seed, 0, None, 0, 0, t0)]
    peak = mults = 0
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for idx in _batches(len(train), config.batch_size, seed, epoch):
            x = train.rasters[idx]
            engine = streaming_engine(config.engine, spec, params, program, len(idx))
            engine.begin_trial(_targets(program, train, idx), x.shape[1])
            applied = {k: np.zeros_like(v) for k, v in params.items()}
            for t in range(x.shape[1]):
                part = engine.step(x[:, t])
                if config.cadence == "step" and part is not None:
                    grads = {k: part.get(k, np.zeros_like(v)) for k, v in params.items()}
                    for k, g in grads.items():
                        applied[k] += g
                    params, opt = optimizer_step(
                        config.optimizer, params, {k: g / len(idx) for k, g in grads.items()}, opt)
                    engine.params = params
            grads, loss = engine.end_trial()
            # in step mode only the terms released at the trial boundary remain
            rest = {k: grads[k] - applied[k] for k in grads}
            if config.cadence == "trial" or any(np.any(g) for g in rest.values()):
                params, opt = optimizer_step(config.optimizer, params,
                                             {k: g / len(idx) for k, g in rest.items()}, opt)
            total += float(np.sum(loss))
            peak = max(peak, engine.meter.peak)
            mults += engine.meter.mults
        records.append(_record(config, spec, params, program, splits, seed, epoch,
                               total / max(len(train), 1), peak, mults, t0))
    return _finish(config, TrainResult(records, params, config, seed))


def train(config: ExperimentConfig, data: Optional[TrialSet] = None,
          seed: Optional[int] = None) -> TrainResult:
    """Dispatch to :func:`train_offline` or :func:`train_streaming` by engine."""
    fn = train_offline if config.engine == "bptt" else train_streaming
    return fn(config, data, seed)


# ---------------------------------------------------------------------------
# experiments

READOUT_HEADS = {"sum": "sum_readout_ce", "max": "max_readout_ce"}


def with_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Copy of ``config`` with dotted-path fields replaced, e.g.
    ``{"optimizer.learning_rate": 1e-2, "network.mode": "FF"}``."""
    for path, value in overrides.items():
        config = _replace_path(config, path.split("."), value)
    return config


def _replace_path(obj, parts, value):
    name = parts[0]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown field {name!r}", ".".join(parts))
    if len(parts) == 1:
        return dataclasses.replace(obj, **{name: value})
    return dataclasses.replace(obj, **{name: _replace_path(getattr(obj, name), parts[1:], value)})


def ablation_config(base: ExperimentConfig, mode: str, readout: str) -> ExperimentConfig:
    net = base.network
    ro = dataclasses.replace(net.readout, aggregation=readout)
    return dataclasses.replace(
        base, network=net.replace(mode=mode, readout=ro),
        program=dataclasses.replace(base.program, head=READOUT_HEADS[readout]),
        output_dir=None, eval_train=False)


def _run_one(args):
    config, data, seed = args
    res = train(config, data, seed)
    best = res.best_epoch()
    return best.test_error, best.valid_error, best.epoch


def _map(fn, jobs, workers):
    if workers and workers > 1:
        import concurrent.futures
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


@dataclass
class AblationRow:
    mode: str
    readout: str
    mean_err: float
    sem: Optional[float]
    n_seeds: int
    errors: list

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def summarize(errors: Sequence[float]):
    """Mean and standard error (sample std / sqrt(n)); SEM is None for n < 2."""
    arr = np.asarray(errors, dtype=float)
    sem = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else None
    return float(arr.mean()), sem


def run_ablation(base: ExperimentConfig, data: Optional[TrialSet] = None,
                 modes=("FF", "RC", "RD"), readouts=("sum", "max"), seeds=None,
                 workers: int = 1, output_dir: Optional[str] = None, title: str = "") -> list:
    """Train every (mode, readout, seed) combination with BPTT and report the
    test error at the epoch with the best validation error.

    Returns a list of :class:`AblationRow`; with ``output_dir`` also writes
    ``ablation.csv``, ``ablation.json`` and ``ablation.png``.
    """
    seeds = tuple(base.seeds if seeds is None else seeds)
    if data is None:
        data, _ = _prepare(base, None)
    jobs, keys = [], []
    for mode in modes:
        for readout in readouts:
            cfg = ablation_config(base, mode, readout)
            for seed in seeds:
                jobs.append((cfg, data, seed))
                keys.append((mode, readout))
    results = _map(_run_one, jobs, workers)
    rows = []
    for mode in modes:
        for readout in readouts:
            errs = [r[0] for k, r in zip(keys, results) if k == (mode, readout)]
            mean, sem = summarize(errs)
            rows.append(AblationRow(mode, readout, mean, sem, len(errs), errs))
    if output_dir:
        from .io import write_ablation
        write_ablation(output_dir, rows, title=title)
    return rows


@dataclass
class GridResult:
    ranked: list        # dicts: overrides, seed, valid_error, test_error
    best: list          # the selected top entries
    partial: bool
    n_planned: int


def grid_search(base: ExperimentConfig, grid: dict, data: Optional[TrialSet] = None,
                budget: Optional[int] = None, top: int = 10, seeds=None,
                workers: int = 1) -> GridResult:
    """Train every combination of ``grid`` values (dotted field paths) for every
    seed, rank by validation error and keep the ``top`` best runs.

    ``budget`` caps the number of runs; when it cuts the grid short the
    result is flagged ``partial``.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must name at least one field with at least one value", "grid")
    seeds = tuple(base.seeds if seeds is None else seeds)
    if data is None:
        data, _ = _prepare(base, None)
    names = sorted(grid)
    combos = [dict(zip(names, values)) for values in itertools.product(*(grid[n] for n in names))]
    plan = [(c, s) for c in combos for s in seeds]
    n_planned = len(plan)
    if budget is not None:
        plan = plan[:max(budget, 0)]
    jobs = [(dataclasses.replace(with_overrides(base, c), output_dir=None), data, s)
            for c, s in plan]
    results = _map(_run_one, jobs, workers)
    entries = [{"overrides": c, "seed": s, "valid_error": r[1], "test_error": r[0],
                "best_epoch": r[2], "order": i}
               for i, ((c, s), r) in enumerate(zip(plan, results))]
    ranked = sorted(entries, key=lambda e: (np.inf if e["valid_error"] is None
                                            else e["valid_error"], e["order"]))
    return GridResult(ranked, ranked[:top], len(plan) < n_planned, n_planned)
