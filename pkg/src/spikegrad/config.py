"""Experiment configuration files.

Configurations are TOML documents validated against a strict schema: unknown
keys, wrong types and out-of-range values are rejected with the dotted path of
the offending field.  :func:`dump_config` produces the fully resolved form
(every default filled in) that is written as ``resolved_config.json`` and can
be loaded back with :func:`config_from_dict`.

Example
-------
::

    [task]
    kind = "memory"
    params = { gap = 50, n_trials = 500 }

    [network]
    mode = "RC"
    surrogate = { slope = 10.0, scale = 0.1 }
    readout = { n_classes = 4 }

    [[network.layers]]
    k = 32
    tau_mem = 5.0
    input_scale_mode = "unit"

    [loss]
    head = "max_readout_ce"

    [train]
    epochs = 25
"""

from __future__ import annotations

import dataclasses
import json
import sys
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError, SpikeGradError
from .losses import KernelSpec, LossProgram
from .neurons import (LayerSpec, MultiCompartmentSpec, NetworkSpec, ReadoutConfig,
                      SurrogateSpec, make_lif_params)
from .tasks import TASKS, MemoryTaskSpec, RandmanSpec
from .training import ExperimentConfig, InitSpec, OptimizerSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class TaskModel(_Strict):
    kind: Literal["randman", "memory", "target_tracking", "latency_pattern"]
    params: Dict[str, Any] = Field(default_factory=dict)


class SurrogateModel(_Strict):
    kind: Literal["fast_sigmoid", "rectangular", "arctan_like"] = "fast_sigmoid"
    slope: float = Field(10.0, gt=0)
    scale: float = Field(1.0, gt=0)


class CompartmentModel(_Strict):
    m: int = Field(ge=1)
    coupling: List[List[float]]
    spike_compartment: int = 0
    input_compartments: Optional[List[int]] = None
    input_scale: float = 1.0


class LayerModel(_Strict):
    k: int = Field(ge=1)
    tau_mem: float = Field(10.0, gt=0, description="membrane time constant, must be > 0")
    dt: float = Field(1.0, gt=0)
    threshold: float = Field(1.0, gt=0)
    input_scale_mode: Literal["one_minus_beta", "unit"] = "one_minus_beta"
    u_rest: float = 0.0
    resistance: float = 1.0
    self_connections: bool = True
    compartments: Optional[CompartmentModel] = None


class ReadoutModel(_Strict):
    n_classes: int = Field(ge=1)
    beta: Optional[float] = Field(None, ge=0, lt=1)
    aggregation: Literal["sum", "max"] = "sum"
    input_scale_mode: Optional[Literal["one_minus_beta", "unit"]] = None


class NetworkModel(_Strict):
    n_in: Optional[int] = Field(None, ge=1)
    mode: Literal["FF", "RC", "RD"] = "RC"
    layers: List[LayerModel] = Field(min_length=1)
    surrogate: SurrogateModel = SurrogateModel()
    readout: Optional[ReadoutModel] = None
    smooth_forward: bool = False
    reset: Literal["subtract", "none"] = "subtract"


class KernelModel(_Strict):
    kind: Literal["exponential", "double_exponential", "delta"] = "exponential"
    tau: float = Field(10.0, gt=0)
    dt: float = Field(1.0, gt=0)
    tau_rise: Optional[float] = Field(None, gt=0)
    normalize: bool = False


class LossModel(_Strict):
    head: Literal["van_rossum", "local_mse", "sum_readout_ce", "max_readout_ce",
                  "step_readout_ce"]
    kernel: Optional[KernelModel] = None
    label_delay: int = Field(0, ge=0)
    window: Optional[List[int]] = Field(None, min_length=2, max_length=2)
    target_kind: Literal["spikes", "stream"] = "spikes"


class OptimizerModel(_Strict):
    kind: Literal["adam", "sgd"] = "adam"
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    clip: Optional[float] = Field(10.0, gt=0)


class InitModel(_Strict):
    w_gain: float = 1.0
    v_gain: float = 1.0
    readout_gain: float = 1.0
    v_diag: float = 0.0


class TrainModel(_Strict):
    engine: Literal["bptt", "rtrl_exact", "rtrl_sparse", "mixed"] = "bptt"
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(32, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    cadence: Literal["trial", "step"] = "trial"

    @field_validator("seeds")
    @classmethod
    def _non_negative(cls, v):
        if any(s < 0 for s in v):
            raise ValueError("seeds must be non-negative")
        return v


class ConfigModel(_Strict):
    task: Optional[TaskModel] = None
    network: NetworkModel
    loss: LossModel
    optimizer: OptimizerModel = OptimizerModel()
    init: InitModel = InitModel()
    train: TrainModel = TrainModel()


# ---------------------------------------------------------------------------
# loading


def _first_error(exc: ValidationError) -> ConfigError:
    errors = exc.errors()
    lines = []
    for err in errors:
        path = ".".join(str(p) for p in err["loc"])
        lines.append(f"{path}: {err['msg']}")
    first = ".".join(str(p) for p in errors[0]["loc"]) if errors else ""
    return ConfigError("; ".join(lines), first)


def task_input_size(kind: str, params: dict) -> int:
    """Input channel count a task generator will produce, without generating it."""
    if kind == "randman":
        return RandmanSpec(**params).embedding_dim
    if kind == "memory":
        spec = MemoryTaskSpec(**params)
        return spec.n_cue + spec.n_go
    # remaining generators are cheap; build a single trial set and read it off
    return TASKS[kind](**params).n_in


def _build_network(net: NetworkModel, n_in: int) -> NetworkSpec:
    layers = []
    fan_in = n_in
    for idx, lm in enumerate(net.layers):
        try:
            lif = make_lif_params(lm.tau_mem, lm.dt, lm.threshold, lm.input_scale_mode,
                                  lm.u_rest, lm.resistance)
        except SpikeGradError as exc:
            raise ConfigError(str(exc), f"network.layers.{idx}") from None
        comp = None
        if lm.compartments is not None:
            c = lm.compartments
            comp = MultiCompartmentSpec(
                c.m, np.array(c.coupling, dtype=float), c.spike_compartment,
                None if c.input_compartments is None else tuple(c.input_compartments),
                c.input_scale)
        layers.append(LayerSpec(lm.k, fan_in, lif, comp, lm.self_connections))
        fan_in = lm.k
    readout = None
    if net.readout is not None:
        r = net.readout
        readout = ReadoutConfig(r.n_classes, r.beta, r.aggregation, r.input_scale_mode)
    surrogate = SurrogateSpec(net.surrogate.kind, net.surrogate.slope, net.surrogate.scale)
    return NetworkSpec(n_in, layers, surrogate, net.mode, readout, net.smooth_forward, net.reset)


def build_config(model: ConfigModel, output_dir: Optional[str] = None) -> ExperimentConfig:
    """Turn a validated :class:`ConfigModel` into an :class:`ExperimentConfig`."""
    task = None
    if model.task is not None:
        task = (model.task.kind, dict(model.task.params))
    n_in = model.network.n_in
    if n_in is None:
        if task is None:
            raise ConfigError("network.n_in is required when no task is given", "network.n_in")
        try:
            n_in = task_input_size(*task)
        except TypeError as exc:
            raise ConfigError(str(exc), "task.params") from None
    try:
        network = _build_network(model.network, n_in)
        kernel = None if model.loss.kernel is None else KernelSpec(**model.loss.kernel.model_dump())
        program = LossProgram(model.loss.head, kernel, model.loss.label_delay,
                              None if model.loss.window is None else tuple(model.loss.window),
                              model.loss.target_kind)
        o = model.optimizer
        optimizer = OptimizerSpec(o.kind, o.learning_rate, o.beta1, o.beta2, o.eps, o.clip)
    except ConfigError:
        raise
    except SpikeGradError as exc:
        raise ConfigError(str(exc), "network") from None
    t = model.train
    return ExperimentConfig(network, program, optimizer, t.engine, t.epochs, t.batch_size,
                            tuple(t.seeds), t.cadence, InitSpec(**model.init.model_dump()),
                            task, output_dir)


def config_from_dict(data: dict, output_dir: Optional[str] = None) -> ExperimentConfig:
    try:
        model = ConfigModel.model_validate(data)
    except ValidationError as exc:
        raise _first_error(exc) from None
    return build_config(model, output_dir)


def load_config(path, output_dir: Optional[str] = None) -> ExperimentConfig:
    """Read and validate a TOML config (or a ``resolved_config.json``).

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    ConfigError
        On syntax errors, unknown keys, type mismatches or invalid values;
        the error carries the dotted field path.
    """
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".json"):
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}", "") from None
        if isinstance(data, dict) and data.get("format") == "spikegrad-config":
            data = data["config"]
    else:
        try:
            data = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}", "") from None
    return config_from_dict(data, output_dir)


# ---------------------------------------------------------------------------
# resolved form


def dump_config(config: ExperimentConfig) -> dict:
    """Resolved plain-data form of a config; ``config_from_dict`` inverts it."""
    net = config.network
    layers = []
    for layer in net.layers:
        entry = {"k": layer.k, "tau_mem": layer.lif.tau_mem, "dt": layer.lif.dt,
                 "threshold": layer.lif.threshold, "input_scale_mode": layer.lif.input_scale_mode,
                 "u_rest": layer.lif.u_rest, "resistance": layer.lif.resistance,
                 "self_connections": layer.self_connections, "compartments": None}
        if layer.compartments is not None:
            c = layer.compartments
            entry["compartments"] = {
                "m": c.m, "coupling": np.asarray(c.coupling, float).tolist(),
                "spike_compartment": c.spike_compartment,
                "input_compartments": None if c.input_compartments is None
                else list(c.input_compartments),
                "input_scale": c.input_scale}
        layers.append(entry)
    p = config.program
    out = {
        "task": None if config.task is None else {"kind": config.task[0],
                                                  "params": _plain(config.task[1])},
        "network": {"n_in": net.n_in, "mode": net.mode, "layers": layers,
                    "surrogate": dataclasses.asdict(net.surrogate),
                    "readout": dataclasses.asdict(net.readout) if net.readout else None,
                    "smooth_forward": net.smooth_forward, "reset": net.reset},
        "loss": {"head": p.head,
                 "kernel": dataclasses.asdict(p.kernel) if p.kernel else None,
                 "label_delay": p.label_delay,
                 "window": None if p.window is None else list(p.window),
                 "target_kind": p.target_kind},
        "optimizer": dataclasses.asdict(config.optimizer),
        "init": dataclasses.asdict(config.init),
        "train": {"engine": config.engine, "epochs": config.epochs,
                  "batch_size": config.batch_size, "seeds": list(config.seeds),
                  "cadence": config.cadence},
    }
    # JSON round trip turns tuples into lists, matching what a reload sees
    return json.loads(json.dumps(out))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
