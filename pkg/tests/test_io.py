import json

import numpy as np
import pytest

from cases import make_case, make_program
from spikegrad.engines import bptt
from spikegrad.errors import ShapeError
from spikegrad.io import (FormatError, format_raster_text, loss_log_lines, parse_raster_text,
                          read_ablation_csv, read_checkpoint, read_dataset, read_dataset_meta,
                          read_gradient_dump, read_jsonl, read_labels, read_raster,
                          read_target_csv, spec_hash, write_checkpoint, write_dataset,
                          write_gradient_dump, write_jsonl, write_labels, write_raster,
                          write_scaling_csv, write_target_csv)
from spikegrad.tasks import memory_stress_task, target_tracking_task
from spikegrad.training import AblationRow
from spikegrad.io import write_ablation


def _raster(seed=0, T=30, n=7):
    return (np.random.default_rng(seed).random((T, n)) < 0.2).astype(float)


# -- rasters -----------------------------------------------------------------

def test_raster_text_format():
    r = np.zeros((4, 3))
    r[1, 2] = r[3, 0] = 1
    assert format_raster_text(r) == "SNNRASTER v1 4 3\n1 2\n3 0\n"
    np.testing.assert_array_equal(parse_raster_text("SNNRASTER v1 4 3\n1 2\n3 0\n"), r)


@pytest.mark.parametrize("binary", [False, True])
def test_raster_round_trip(tmp_path, binary):
    r = _raster()
    path = tmp_path / ("r.snnr" if binary else "r.txt")
    write_raster(path, r, binary=binary)
    np.testing.assert_array_equal(read_raster(path), r)


def test_empty_raster_round_trip(tmp_path):
    write_raster(tmp_path / "e.txt", np.zeros((5, 2)))
    np.testing.assert_array_equal(read_raster(tmp_path / "e.txt"), np.zeros((5, 2)))


@pytest.mark.parametrize("text", [
    "", "SNNRASTER v2 3 3\n", "SPIKES v1 3 3\n", "SNNRASTER v1 3 3\n5 0\n",
    "SNNRASTER v1 3 3\n1\n",
])
def test_malformed_raster_text(text):
    with pytest.raises(FormatError):
        parse_raster_text(text)


def test_binary_raster_rejects_flags(tmp_path):
    path = tmp_path / "r.snnr"
    write_raster(path, _raster(), binary=True)
    blob = bytearray(path.read_bytes())
    blob[12] = 1
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_raster(path)


def test_non_binary_raster_rejected(tmp_path):
    with pytest.raises(ShapeError):
        write_raster(tmp_path / "x.txt", np.full((2, 2), 0.5))


# -- labels, targets, logs ---------------------------------------------------

def test_labels_round_trip(tmp_path):
    write_labels(tmp_path / "l.txt", [2, 0, 1])
    assert (tmp_path / "l.txt").read_text() == "0 2\n1 0\n2 1\n"
    np.testing.assert_array_equal(read_labels(tmp_path / "l.txt"), [2, 0, 1])
    (tmp_path / "bad.txt").write_text("1 2\n")
    with pytest.raises(FormatError):
        read_labels(tmp_path / "bad.txt")


def test_target_csv_round_trip(tmp_path):
    y = np.random.default_rng(0).normal(size=(6, 3))
    write_target_csv(tmp_path / "y.csv", y)
    assert (tmp_path / "y.csv").read_text().splitlines()[0] == "t,y0,y1,y2"
    np.testing.assert_array_equal(read_target_csv(tmp_path / "y.csv"), y)


def test_loss_log_records():
    y = np.random.default_rng(0).normal(size=(2, 6, 3))
    online = loss_log_lines(make_program("step_readout_ce").evaluate(y, np.array([0, 2])))
    assert len(online) == 2 * 6 and set(online[0]) == {"trial", "t", "loss"}
    res = make_program("sum_readout_ce").evaluate(y, np.array([0, 2]))
    locking = loss_log_lines(res, trial_offset=10)
    assert [r["trial"] for r in locking] == [10, 11]
    assert [r["loss"] for r in locking] == res.loss.tolist()


def test_jsonl_round_trip(tmp_path):
    recs = [{"a": 1, "b": 0.1}, {"a": 2, "b": None}]
    write_jsonl(tmp_path / "m.jsonl", recs)
    assert read_jsonl(tmp_path / "m.jsonl") == recs


# -- checkpoints and gradient dumps ------------------------------------------

def test_checkpoint_round_trip_is_exact(tmp_path):
    spec, params, *_ = make_case()
    params = {k: v * np.pi for k, v in params.items()}
    write_checkpoint(tmp_path / "c.json", params, spec, epoch=3)
    obj = read_checkpoint(tmp_path / "c.json", spec)
    assert obj["epoch"] == 3 and obj["spec_hash"] == spec_hash(spec)
    for name in params:
        np.testing.assert_array_equal(obj["tensors"][name], params[name])


def test_checkpoint_hash_mismatch(tmp_path):
    spec, params, *_ = make_case()
    other, *_ = make_case(k=5)
    write_checkpoint(tmp_path / "c.json", params, spec, 0)
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "c.json", other)


@pytest.mark.parametrize("version,ok", [("1.0", True), ("1.7", True), ("2.0", False),
                                        ("x", False)])
def test_checkpoint_version_gate(tmp_path, version, ok):
    spec, params, *_ = make_case()
    write_checkpoint(tmp_path / "c.json", params, spec, 0)
    obj = json.loads((tmp_path / "c.json").read_text())
    obj["version"] = version
    (tmp_path / "c.json").write_text(json.dumps(obj))
    if ok:
        read_checkpoint(tmp_path / "c.json")
    else:
        with pytest.raises(FormatError):
            read_checkpoint(tmp_path / "c.json")


def test_wrong_format_tag(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"format": "other", "version": "1.0"}))
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "c.json")


def test_gradient_dump_round_trip(tmp_path):
    spec, params, x, prog, y = make_case()
    rep = bptt(spec, params, x, prog, y)
    write_gradient_dump(tmp_path / "g.json", rep, seed=4, spec=spec)
    obj = read_gradient_dump(tmp_path / "g.json")
    assert obj["engine"] == "bptt" and obj["seed"] == 4
    for name, g in rep.grads.items():
        np.testing.assert_array_equal(obj["tensors"][name], g)


def test_spec_hash_is_stable():
    a, *_ = make_case(seed=0)
    b, *_ = make_case(seed=5)
    c, *_ = make_case(mode="FF")
    assert spec_hash(a) == spec_hash(b) != spec_hash(c)
    assert len(spec_hash(a)) == 16


# -- dataset bundles ---------------------------------------------------------

@pytest.mark.parametrize("binary", [False, True])
def test_dataset_round_trip(tmp_path, binary):
    data = memory_stress_task(gap=3, n_trials=12)
    write_dataset(tmp_path, data, binary=binary)
    meta = read_dataset_meta(tmp_path)
    assert meta["n_trials"] == 12 and meta["task"]["generator"] == "memory_stress"
    back = read_dataset(tmp_path)
    np.testing.assert_array_equal(back.rasters, data.rasters)
    np.testing.assert_array_equal(back.labels, data.labels)
    np.testing.assert_array_equal(back.splits, data.splits)


def test_dataset_with_targets(tmp_path):
    data = target_tracking_task(n_trials=3, T=8)
    write_dataset(tmp_path, data)
    np.testing.assert_array_equal(read_dataset(tmp_path).targets, data.targets)


# -- tables ------------------------------------------------------------------

def test_ablation_csv_round_trip(tmp_path):
    rows = [AblationRow("FF", "sum", 0.25, 0.05, 5, [0.2] * 5),
            AblationRow("RC", "max", 0.1, None, 1, [0.1])]
    write_ablation(tmp_path, rows, title="t")
    back = read_ablation_csv(tmp_path / "ablation.csv")
    assert back == [{"mode": "FF", "readout": "sum", "mean_err": 0.25, "sem": 0.05, "n_seeds": 5},
                    {"mode": "RC", "readout": "max", "mean_err": 0.1, "sem": None, "n_seeds": 1}]


def test_scaling_csv_columns(tmp_path):
    write_scaling_csv(tmp_path / "s.csv", [{"engine": "bptt", "k": 8, "T": 10,
                                            "mem_elements": 80, "mult_count": 9,
                                            "wall_ms": 0.5}])
    assert (tmp_path / "s.csv").read_text().splitlines() == [
        "engine,k,T,mem_elements,mult_count,wall_ms", "bptt,8,10,80,9,0.5"]


def test_streaming_loss_log_matches_batch_terms():
    from spikegrad.engines import rtrl_sparse_gradient
    spec, params, x, prog, y = make_case(head="step_readout_ce", T=6, readout_beta=0.0)
    rep = rtrl_sparse_gradient(spec, params, x, prog, y, record_log=True)
    lines = loss_log_lines(rep)
    assert len(lines) == 2 * 6 and set(lines[0]) == {"trial", "t", "loss"}
    total = sum(r["loss"] for r in lines)
    assert total == pytest.approx(rep.total_loss, rel=1e-12)
