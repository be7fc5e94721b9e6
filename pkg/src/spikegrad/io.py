"""File formats: spike rasters, gradient dumps, checkpoints, dataset bundles,
run artifacts and ablation tables.

Every JSON format carries ``format`` and ``version`` fields ("major.minor");
readers reject unknown formats and unknown major versions.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ShapeError, SpikeGradError

RASTER_MAGIC = b"SNNR"
RASTER_TEXT_HEADER = "SNNRASTER"
RASTER_VERSION = 1
JSON_VERSION = "1.0"
SUPPORTED_MAJOR = 1


class FormatError(SpikeGradError, ValueError):
    """File content does not match the expected format or version."""


# ---------------------------------------------------------------------------
# helpers


def _dumps(obj) -> str:
    # repr-based float output round-trips doubles exactly
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def _check_version(obj: dict, fmt: str, path) -> dict:
    if not isinstance(obj, dict) or obj.get("format") != fmt:
        raise FormatError(f"{path}: not a {fmt} file")
    version = str(obj.get("version", ""))
    try:
        major = int(version.split(".")[0])
    except ValueError:
        raise FormatError(f"{path}: malformed version {version!r}") from None
    if major != SUPPORTED_MAJOR:
        raise FormatError(f"{path}: unsupported {fmt} major version {major}")
    return obj


def _read_json(path, fmt: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from None
    return _check_version(obj, fmt, path)


def _write_text(path, text: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def tensors_to_json(tensors: dict) -> dict:
    """``{name: {"shape": [...], "data": [flat values]}}`` in float64."""
    out = {}
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=float)
        out[name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    return out


def tensors_from_json(obj: dict) -> dict:
    out = {}
    for name, entry in obj.items():
        data = np.asarray(entry["data"], dtype=float)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape, dtype=int)):
            raise FormatError(f"tensor {name!r}: {data.size} values for shape {shape}")
        out[name] = data.reshape(shape)
    return out


def spec_hash(spec) -> str:
    """Short stable digest of a network's structure."""
    text = _dumps(spec.describe())
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# spike rasters


def _as_raster(raster) -> np.ndarray:
    r = np.asarray(raster)
    if r.ndim != 2:
        raise ShapeError(f"raster must be (T, n), got shape {r.shape}")
    if not np.all((r == 0) | (r == 1)):
        raise ShapeError("raster entries must be 0 or 1")
    return r.astype(bool)


def format_raster_text(raster) -> str:
    r = _as_raster(raster)
    T, n = r.shape
    lines = [f"{RASTER_TEXT_HEADER} v{RASTER_VERSION} {T} {n}"]
    lines += [f"{t} {i}" for t, i in zip(*np.nonzero(r))]
    return "\n".join(lines) + "\n"


def parse_raster_text(text: str, source="<string>") -> np.ndarray:
    lines = text.splitlines()
    if not lines:
        raise FormatError(f"{source}: empty raster file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != RASTER_TEXT_HEADER:
        raise FormatError(f"{source}: missing '{RASTER_TEXT_HEADER} v1 <T> <n>' header")
    if head[1] != f"v{RASTER_VERSION}":
        raise FormatError(f"{source}: unsupported raster version {head[1]!r}")
    T, n = int(head[2]), int(head[3])
    out = np.zeros((T, n))
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{source}:{lineno}: expected 't neuron_id'")
        t, i = int(parts[0]), int(parts[1])
        if not (0 <= t < T and 0 <= i < n):
            raise FormatError(f"{source}:{lineno}: event ({t}, {i}) outside {T}x{n}")
        out[t, i] = 1.0
    return out


def write_raster(path, raster, binary: bool = False):
    """Write a ``(T, n)`` 0/1 raster as ``SNNRASTER v1`` text or packed binary."""
    if binary:
        r = _as_raster(raster)
        T, n = r.shape
        header = RASTER_MAGIC + struct.pack("<III", T, n, 0)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(header + np.packbits(r.ravel()).tobytes())
    else:
        _write_text(path, format_raster_text(raster))


def read_raster(path) -> np.ndarray:
    """Read either raster format (detected from the first bytes)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    # the text header also begins with the binary magic, so test it first
    if blob[:4] == RASTER_MAGIC and not blob.startswith(RASTER_TEXT_HEADER.encode()):
        if len(blob) < 16:
            raise FormatError(f"{path}: truncated binary header")
        T, n, flags = struct.unpack("<III", blob[4:16])
        if flags != 0:
            raise FormatError(f"{path}: unsupported binary raster flags {flags}")
        bits = np.unpackbits(np.frombuffer(blob[16:], dtype=np.uint8))
        if bits.size < T * n:
            raise FormatError(f"{path}: expected {T * n} bits, found {bits.size}")
        return bits[:T * n].reshape(T, n).astype(float)
    return parse_raster_text(blob.decode("utf-8"), str(path))


# ---------------------------------------------------------------------------
# labels, targets, loss logs


def write_labels(path, labels):
    _write_text(path, "".join(f"{i} {int(y)}\n" for i, y in enumerate(labels)))


def read_labels(path) -> np.ndarray:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'trial_id label'")
            pairs.append((int(parts[0]), int(parts[1])))
    ids = [p[0] for p in pairs]
    if ids != list(range(len(ids))):
        raise FormatError(f"{path}: trial ids must run 0..N-1 in order")
    return np.array([p[1] for p in pairs], dtype=int)


def write_target_csv(path, stream):
    """Target stream ``(T, n_y)`` as CSV with header ``t,y0,...``."""
    stream = np.asarray(stream, dtype=float)
    if stream.ndim != 2:
        raise ShapeError(f"target stream must be (T, n_y), got {stream.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"y{j}" for j in range(stream.shape[1])])
        for t, row in enumerate(stream):
            w.writerow([t] + [repr(float(v)) for v in row])


def read_target_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["t"]:
        raise FormatError(f"{path}: missing 't,y0,...' header")
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=float).reshape(
        len(rows) - 1, len(rows[0]) - 1)


def loss_log_lines(result, trial_offset: int = 0) -> list:
    """JSON-lines records for a loss evaluation.

    ``result`` is a :class:`~spikegrad.losses.HeadResult` or a streaming
    engine's :class:`GradientReport` recorded with ``record_log=True``.
    Online heads give one ``{trial, t, loss}`` record per evaluated term
    (``t`` is the step whose output the term scores); locking heads give one
    ``{trial, loss}`` per trial.
    """
    if getattr(result, "loss_log", None):
        return [{"trial": trial_offset + b, "t": int(src), "loss": float(value)}
                for _, src, loss in result.loss_log
                for b, value in enumerate(np.atleast_1d(loss))]
    if getattr(result, "step_loss", None) is not None:
        return [{"trial": trial_offset + b, "t": t, "loss": float(value)}
                for b, row in enumerate(np.atleast_2d(result.step_loss))
                for t, value in enumerate(row)]
    return [{"trial": trial_offset + b, "loss": float(value)}
            for b, value in enumerate(np.atleast_1d(result.loss))]


def write_jsonl(path, records):
    _write_text(path, "".join(_dumps(r) + "\n" for r in records))


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# gradient dumps and checkpoints


def write_gradient_dump(path, report, seed: int, spec):
    obj = {"format": "spikegrad-gradients", "version": JSON_VERSION, "engine": report.engine,
           "seed": int(seed), "spec_hash": spec_hash(spec),
           "tensors": tensors_to_json(report.grads)}
    _write_text(path, _dumps(obj))


def read_gradient_dump(path) -> dict:
    obj = _read_json(path, "spikegrad-gradients")
    return dict(obj, tensors=tensors_from_json(obj["tensors"]))


def write_checkpoint(path, params: dict, spec, epoch: int, extra: dict = None):
    obj = {"format": "spikegrad-checkpoint", "version": JSON_VERSION,
           "spec_hash": spec_hash(spec), "epoch": int(epoch),
           "tensors": tensors_to_json(params)}
    if extra:
        obj["meta"] = extra
    _write_text(path, _dumps(obj))


def read_checkpoint(path, spec=None) -> dict:
    """Load a checkpoint; with ``spec`` also verify the structure hash."""
    obj = _read_json(path, "spikegrad-checkpoint")
    if spec is not None and obj["spec_hash"] != spec_hash(spec):
        raise FormatError(f"{path}: checkpoint was written for a different network "
                          f"({obj['spec_hash']} != {spec_hash(spec)})")
    return dict(obj, tensors=tensors_from_json(obj["tensors"]))


# ---------------------------------------------------------------------------
# dataset bundles


def write_dataset(directory, data, binary: bool = False, extra_meta: dict = None):
    """Write ``meta.json``, ``labels.txt`` and one raster file per trial
    (plus ``targets/`` CSVs when the set carries target streams)."""
    directory = Path(directory)
    (directory / "trials").mkdir(parents=True, exist_ok=True)
    ext = "snnr" if binary else "txt"
    for i, raster in enumerate(data.rasters):
        write_raster(directory / "trials" / f"{i:06d}.{ext}", raster, binary)
    write_labels(directory / "labels.txt", data.labels)
    if data.targets is not None:
        for i, stream in enumerate(data.targets):
            write_target_csv(directory / "targets" / f"{i:06d}.csv", stream)
    meta = {"format": "spikegrad-dataset", "version": JSON_VERSION,
            "n_trials": len(data), "T": data.T, "n_in": data.n_in,
            "raster_format": "binary" if binary else "text",
            "splits": [str(s) for s in data.splits], "has_targets": data.targets is not None,
            "task": data.meta}
    if extra_meta:
        meta.update(extra_meta)
    _write_text(directory / "meta.json", _dumps(meta))


def read_dataset_meta(directory) -> dict:
    return _read_json(Path(directory) / "meta.json", "spikegrad-dataset")


def read_dataset(directory):
    from .tasks import TrialSet
    directory = Path(directory)
    meta = read_dataset_meta(directory)
    ext = "snnr" if meta["raster_format"] == "binary" else "txt"
    N = meta["n_trials"]
    rasters = np.zeros((N, meta["T"], meta["n_in"]))
    for i in range(N):
        rasters[i] = read_raster(directory / "trials" / f"{i:06d}.{ext}")
    labels = read_labels(directory / "labels.txt")
    if len(labels) != N:
        raise FormatError(f"{directory}: {len(labels)} labels for {N} trials")
    targets = None
    if meta.get("has_targets"):
        targets = np.stack([read_target_csv(directory / "targets" / f"{i:06d}.csv")
                            for i in range(N)])
    return TrialSet(rasters, labels, np.array(meta["splits"]), meta["task"], targets)


# ---------------------------------------------------------------------------
# run artifacts


def save_run(directory, result, extra_meta: dict = None):
    """Persist ``metrics.jsonl``, ``checkpoint.json`` and ``resolved_config.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_jsonl(directory / "metrics.jsonl", [r.as_dict() for r in result.records])
    last = result.records[-1].epoch if result.records else 0
    meta = {"seed": int(result.seed)}
    if extra_meta:
        meta.update(extra_meta)
    write_checkpoint(directory / "checkpoint.json", result.params, result.config.network,
                     last, meta)
    write_resolved_config(directory, result.config, meta)


def write_resolved_config(directory, config, meta: dict = None):
    from .config import dump_config
    obj = {"format": "spikegrad-config", "version": JSON_VERSION,
           "config": dump_config(config)}
    if meta:
        obj["meta"] = meta
    _write_text(Path(directory) / "resolved_config.json", _dumps(obj))


def read_resolved_config(path) -> dict:
    return _read_json(path, "spikegrad-config")


ABLATION_COLUMNS = ("mode", "readout", "mean_err", "sem", "n_seeds")


def write_ablation(directory, rows, title: str = "", meta: dict = None):
    """``ablation.csv`` (mode,readout,mean_err,sem,n_seeds), ``ablation.json``
    with per-seed errors, and a bar chart ``ablation.png``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r.mode, r.readout, repr(r.mean_err),
                        "" if r.sem is None else repr(r.sem), r.n_seeds])
    obj = {"format": "spikegrad-ablation", "version": JSON_VERSION, "title": title,
           "rows": [r.as_dict() for r in rows]}
    if meta:
        obj["meta"] = meta
    _write_text(directory / "ablation.json", _dumps(obj))
    from .plotting import plot_ablation
    plot_ablation(rows, os.fspath(directory / "ablation.png"), title)


def read_ablation_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ABLATION_COLUMNS:
            raise FormatError(f"{path}: expected columns {','.join(ABLATION_COLUMNS)}")
        return [{"mode": r["mode"], "readout": r["readout"], "mean_err": float(r["mean_err"]),
                 "sem": float(r["sem"]) if r["sem"] else None, "n_seeds": int(r["n_seeds"])}
                for r in reader]


SCALING_COLUMNS = ("engine", "k", "T", "mem_elements", "mult_count", "wall_ms")


def write_scaling_csv(path, rows):
    """Rows are dicts (or tuples) with the :data:`SCALING_COLUMNS` fields."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCALING_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in SCALING_COLUMNS] if isinstance(r, dict) else list(r))
