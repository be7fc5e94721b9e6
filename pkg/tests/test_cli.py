import json
from pathlib import Path

import pytest

from spikegrad.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, gradcheck_report, main
from spikegrad.config import load_config
from spikegrad.io import read_checkpoint, read_dataset_meta, read_jsonl, read_resolved_config

TINY = str(Path(__file__).resolve().parent.parent / "configs" / "tiny.toml")


@pytest.fixture
def short_tiny(tmp_path):
    """The tiny config with two training epochs."""
    path = tmp_path / "short.toml"
    path.write_text(Path(TINY).read_text().replace("seeds = [0]", "seeds = [0]\nepochs = 2"))
    return str(path)


def test_gradcheck_report_fields():
    report = gradcheck_report(load_config(TINY), n_trials=3)
    for key in ("bptt_vs_rtrl_exact", "sparse_vs_mixed", "bptt_vs_finite_diff"):
        assert "max_rel_err" in report[key] and report[key]["ok"]
    assert report["bptt_vs_rtrl_exact"]["max_rel_err"] < 1e-10
    assert report["sparse_vs_mixed"]["max_rel_err"] < 1e-12
    assert report["bptt_vs_finite_diff"]["max_rel_err"] < 1e-4
    assert report["ok"]


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--config", TINY, "--trials", "2", "-o", str(tmp_path)]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((tmp_path / "gradcheck.json").read_text())


def test_gradcheck_failure_exit_code(monkeypatch, tmp_path):
    import spikegrad.cli as cli
    monkeypatch.setattr(cli, "TOL_EXACT", 0.0)
    assert main(["gradcheck", "--config", TINY, "--trials", "1"]) == EXIT_NUMERIC


def test_gen_data_and_inspect(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", TINY, "--seed", "7", "-o", str(out)]) == EXIT_OK
    meta = read_dataset_meta(out)
    assert meta["seed"] == 7 and meta["task"]["spec"]["seed"] == 7
    assert main(["inspect", str(out)]) == EXIT_OK
    assert "20 trials" in capsys.readouterr().out
    assert main(["inspect", str(out / "trials" / "000000.txt")]) == EXIT_OK


def test_gen_data_binary_with_params(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--task", "latency_pattern", "--param", "n_trials=6",
                 "--binary", "-o", str(out)]) == EXIT_OK
    assert read_dataset_meta(out)["raster_format"] == "binary"
    assert len(list((out / "trials").glob("*.snnr"))) == 6


def test_train_seed_override_in_all_outputs(tmp_path, short_tiny):
    out = tmp_path / "run"
    assert main(["train", "--config", short_tiny, "--seed", "7", "-o", str(out)]) == EXIT_OK
    ck = read_checkpoint(out / "checkpoint.json")
    assert ck["meta"]["seed"] == 7 and ck["epoch"] == 2
    resolved = read_resolved_config(out / "resolved_config.json")
    assert resolved["config"]["train"]["seeds"] == [7] and resolved["meta"]["seed"] == 7
    metrics = read_jsonl(out / "metrics.jsonl")
    assert [m["epoch"] for m in metrics] == [0, 1, 2] and {m["seed"] for m in metrics} == {7}
    assert (out / "training.png").exists()


def test_resolved_config_reproduces_run(tmp_path, short_tiny):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", short_tiny, "-o", str(a)]) == EXIT_OK
    assert main(["train", "--config", str(a / "resolved_config.json"), "-o", str(b)]) == EXIT_OK
    assert (read_checkpoint(a / "checkpoint.json")["tensors"].keys()
            == read_checkpoint(b / "checkpoint.json")["tensors"].keys())
    for name, t in read_checkpoint(a / "checkpoint.json")["tensors"].items():
        assert (t == read_checkpoint(b / "checkpoint.json")["tensors"][name]).all()


def test_ablate_command(tmp_path, short_tiny):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", short_tiny, "--n-seeds", "2", "--modes", "FF", "RC",
                 "--readouts", "sum", "-o", str(out)]) == EXIT_OK
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "mode,readout,mean_err,sem,n_seeds"
    assert [l.split(",")[:2] for l in lines[1:]] == [["FF", "sum"], ["RC", "sum"]]
    assert read_resolved_config(out / "resolved_config.json")["meta"]["seeds"] == [0, 1]


def test_bench_command(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--engines", "bptt", "rtrl_exact", "--k", "4", "8", "--T", "10",
                 "-o", str(out)]) == EXIT_OK
    lines = (out / "scaling.csv").read_text().splitlines()
    assert lines[0] == "engine,k,T,mem_elements,mult_count,wall_ms"
    assert len(lines) == 5
    fits = json.loads((out / "fits.json").read_text())["fits"]
    assert set(fits) == {"bptt", "rtrl_exact"}


def test_missing_config_names_path(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    missing = str(tmp_path / "nope.toml")
    assert main(["train", "--config", missing]) == EXIT_IO
    assert missing in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_bad_config_reports_field(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(Path(TINY).read_text().replace("tau_mem = 5.0", "tau_mem = -1.0"))
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert "network.layers.0.tau_mem" in capsys.readouterr().err


def test_unknown_subcommand_prints_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_CONFIG
    assert "usage" in capsys.readouterr().err


def test_inspect_missing_path(tmp_path):
    assert main(["inspect", str(tmp_path / "absent")]) == EXIT_IO
