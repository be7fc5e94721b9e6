"""Command-line interface.

Subcommands: ``gen-data``, ``train``, ``ablate``, ``gradcheck``, ``bench`` and
``inspect``.  Exit status is 0 on success, 2 for configuration or usage
errors, 3 when a numeric check fails and 4 for I/O errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import load_config
from .errors import ConfigError, SpikeGradError
from .io import FormatError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("spikegrad")

# gradcheck tolerances (max relative error, infinity norm)
TOL_EXACT = 1e-10
TOL_SPARSE_MIXED = 1e-12
TOL_FD = 1e-4


class NumericCheckFailed(SpikeGradError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_params(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}", "param")
        key, value = pair.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def _with_seed(config, seed):
    if seed is None:
        return config
    return dataclasses.replace(config, seeds=(int(seed),))


def _out_dir(args, default: str) -> Path:
    path = Path(args.out or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from .tasks import generate_task
    if args.config:
        config = load_config(args.config)
        if config.task is None:
            raise ConfigError("config has no [task] section", "task")
        kind, params = config.task[0], dict(config.task[1])
    else:
        if not args.task:
            raise ConfigError("give --config or --task", "task")
        kind, params = args.task, {}
    params.update(_parse_params(args.param))
    if args.seed is not None:
        params["seed"] = args.seed
    try:
        data = generate_task(kind, **params)
    except TypeError as exc:
        raise ConfigError(str(exc), "task.params") from None
    out = _out_dir(args, "data")
    io.write_dataset(out, data, binary=args.binary,
                     extra_meta={"task_kind": kind, "task_params": params,
                                 "seed": params.get("seed", 0)})
    print(f"wrote {len(data)} trials (T={data.T}, n={data.n_in}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_training
    from .training import train
    config = _with_seed(load_config(args.config), args.seed)
    config = dataclasses.replace(config, output_dir=None)
    data = io.read_dataset(args.data) if args.data else None
    out = _out_dir(args, "run")
    for seed in config.seeds:
        res = train(config, data, seed)
        run_dir = out if len(config.seeds) == 1 else out / f"seed{seed}"
        io.save_run(run_dir, res, {"seed": seed, "cli_seed_override": args.seed})
        plot_training(res.records, str(run_dir / "training.png"), f"seed {seed}")
        best = res.best_epoch()
        print(f"seed {seed}: best epoch {best.epoch} valid_error={best.valid_error} "
              f"test_error={best.test_error}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .training import run_ablation
    config = load_config(args.config)
    if args.seed is not None:
        config = _with_seed(config, args.seed)
    elif args.n_seeds:
        config = dataclasses.replace(config, seeds=tuple(range(args.n_seeds)))
    data = io.read_dataset(args.data) if args.data else None
    out = _out_dir(args, "ablation")
    rows = run_ablation(config, data, modes=tuple(args.modes), readouts=tuple(args.readouts),
                        workers=args.workers, title=args.title or "")
    io.write_ablation(out, rows, args.title or "", meta={"seeds": list(config.seeds)})
    io.write_resolved_config(out, config, {"seeds": list(config.seeds),
                                           "cli_seed_override": args.seed})
    print(f"{'mode':<5} {'readout':<8} {'mean_err':>9} {'sem':>8} n")
    for r in rows:
        sem = "-" if r.sem is None else f"{r.sem:.4f}"
        print(f"{r.mode:<5} {r.readout:<8} {r.mean_err:9.4f} {sem:>8} {r.n_seeds}")
    return EXIT_OK


def gradcheck_report(config, data=None, n_trials: int = 4, seed: int = 0) -> dict:
    """Cross-engine and finite-difference comparison on a few trials.

    Returns a dict with one entry per comparison holding ``max_rel_err``,
    ``tol`` and ``ok`` (or ``skipped`` with a reason).
    """
    from .engines import compute_gradient, finite_difference_oracle, relative_error
    from .neurons import init_params
    from .training import _prepare, _targets

    data, program = _prepare(config, data)
    idx = np.arange(min(n_trials, len(data)))
    x = data.rasters[idx]
    targets = _targets(program, data, idx)
    spec = config.network
    params = init_params(spec, seed, **dataclasses.asdict(config.init))

    def compare(a, b):
        a, b = getattr(a, "grads", a), getattr(b, "grads", b)
        return max(relative_error(a[k], b[k]) for k in a)

    def run(engine, s=spec):
        return compute_gradient(engine, s, params, x, program, targets)

    report = {"seed": seed, "n_trials": len(idx), "T": data.T}
    ref = run("bptt")
    report["bptt_vs_rtrl_exact"] = _entry(compare(ref, run("rtrl_exact")), TOL_EXACT)
    try:
        report["sparse_vs_mixed"] = _entry(compare(run("rtrl_sparse"), run("mixed")),
                                           TOL_SPARSE_MIXED)
    except SpikeGradError as exc:
        report["sparse_vs_mixed"] = {"skipped": str(exc)}
    smooth = spec.replace(smooth_forward=True)
    fd = finite_difference_oracle(smooth, params, x, program, targets, h=1e-5)
    report["bptt_vs_finite_diff"] = _entry(compare(run("bptt", smooth), fd), TOL_FD)
    report["ok"] = all(v.get("ok", True) for v in report.values() if isinstance(v, dict))
    return report


def _entry(err: float, tol: float) -> dict:
    return {"max_rel_err": err, "tol": tol, "ok": bool(err < tol)}


def cmd_gradcheck(args) -> int:
    config = _with_seed(load_config(args.config), args.seed)
    data = io.read_dataset(args.data) if args.data else None
    report = gradcheck_report(config, data, args.trials, config.seeds[0])
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = _out_dir(args, "gradcheck")
        (out / "gradcheck.json").write_text(text + "\n")
        io.write_resolved_config(out, config, {"seed": config.seeds[0]})
    if not report["ok"]:
        raise NumericCheckFailed("gradient check exceeded tolerance")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .engines import complexity_probe, fit_exponent, probe_network
    from .plotting import plot_scaling
    seed = 0 if args.seed is None else args.seed
    rows = []
    for engine in args.engines:
        for k in args.k:
            for T in args.T:
                mem, mults, wall = complexity_probe(engine, probe_network(k), T, seed)
                rows.append({"engine": engine, "k": k, "T": T, "mem_elements": int(mem),
                             "mult_count": int(mults), "wall_ms": round(wall, 3)})
                log.info("%s k=%d T=%d mem=%d mults=%d", engine, k, T, mem, mults)
    out = _out_dir(args, "bench")
    io.write_scaling_csv(out / "scaling.csv", rows)
    T0 = args.T[0]
    fits = {}
    for engine in args.engines:
        sel = [r for r in rows if r["engine"] == engine and r["T"] == T0]
        if len(sel) > 1:
            ks = [r["k"] for r in sel]
            fits[engine] = {"mem_exponent_k": fit_exponent(ks, [r["mem_elements"] for r in sel]),
                            "mult_exponent_k": fit_exponent(ks, [r["mult_count"] for r in sel])}
            print(f"{engine}: memory ~ k^{fits[engine]['mem_exponent_k']:.2f}, "
                  f"mults ~ k^{fits[engine]['mult_exponent_k']:.2f} (T={T0})")
    (out / "fits.json").write_text(json.dumps({"seed": seed, "fits": fits}, indent=2) + "\n")
    plot_scaling([r for r in rows if r["T"] == T0], str(out / "scaling_mem.png"))
    plot_scaling([r for r in rows if r["T"] == T0], str(out / "scaling_mult.png"), y="mult_count")
    print(f"wrote {out / 'scaling.csv'}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    if path.is_dir():
        if (path / "meta.json").exists():
            meta = io.read_dataset_meta(path)
            labels = io.read_labels(path / "labels.txt")
            print(f"dataset: {meta['n_trials']} trials, T={meta['T']}, n_in={meta['n_in']}, "
                  f"raster format {meta['raster_format']}")
            print(f"generator: {meta['task'].get('generator')} "
                  f"v{meta['task'].get('version')}")
            counts = np.bincount(labels)
            print("labels: " + ", ".join(f"{c}: {n}" for c, n in enumerate(counts)))
            splits = meta["splits"]
            print("splits: " + ", ".join(f"{s}: {splits.count(s)}" for s in sorted(set(splits))))
            return EXIT_OK
        for name in ("checkpoint.json", "resolved_config.json", "ablation.json"):
            if (path / name).exists():
                path = path / name
                break
        else:
            raise FormatError(f"{path}: nothing to inspect")
    head = path.read_bytes()[:16]
    if head.startswith(io.RASTER_MAGIC) or head.startswith(io.RASTER_TEXT_HEADER.encode()):
        r = io.read_raster(path)
        print(f"raster: T={r.shape[0]}, n={r.shape[1]}, {int(r.sum())} spikes, "
              f"rate {r.mean():.4f}")
        return EXIT_OK
    obj = json.loads(path.read_text())
    fmt = obj.get("format") if isinstance(obj, dict) else None
    if fmt == "spikegrad-checkpoint":
        ck = io.read_checkpoint(path)
        print(f"checkpoint: epoch {ck['epoch']}, spec_hash {ck['spec_hash']}")
        if ck.get("meta"):
            print(f"meta: {json.dumps(ck['meta'], sort_keys=True)}")
        for name, t in sorted(ck["tensors"].items()):
            print(f"  {name:<14} shape={t.shape} mean={t.mean():+.4f} std={t.std():.4f}")
    elif fmt == "spikegrad-gradients":
        g = io.read_gradient_dump(path)
        print(f"gradients: engine {g['engine']}, seed {g['seed']}, spec_hash {g['spec_hash']}")
        for name, t in sorted(g["tensors"].items()):
            print(f"  {name:<14} shape={t.shape} max|g|={np.abs(t).max():.4e}")
    elif fmt in ("spikegrad-config", "spikegrad-ablation"):
        io._check_version(obj, fmt, path)
        print(json.dumps(obj, indent=2, sort_keys=True))
    else:
        raise FormatError(f"{path}: unrecognised file")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--seed", type=int, help="override the seed (recorded in outputs)")
    common.add_argument("-o", "--out", help="output directory")

    parser = argparse.ArgumentParser(prog="spikegrad",
                                     description="Gradient engines for spiking networks.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="generate a dataset bundle")
    p.add_argument("--config", help="TOML config with a [task] section")
    p.add_argument("--task", help="task kind when no config is given")
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="task parameter override (repeatable)")
    p.add_argument("--binary", action="store_true", help="bit-packed rasters")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one network per seed")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="dataset bundle (defaults to the config's task)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ablate", parents=[common], help="FF/RC/RD x readout ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--modes", nargs="+", default=["FF", "RC", "RD"])
    p.add_argument("--readouts", nargs="+", default=["sum", "max"], choices=["sum", "max"])
    p.add_argument("--n-seeds", type=int, help="use seeds 0..N-1")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--title")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="compare engines and finite differences")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--trials", type=int, default=4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common], help="memory and multiplication counts")
    p.add_argument("--engines", nargs="+", default=["bptt", "rtrl_exact", "rtrl_sparse"])
    p.add_argument("--k", nargs="+", type=int, default=[8, 16, 32])
    p.add_argument("--T", nargs="+", type=int, default=[50, 100])
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect", parents=[common], help="summarise a file or directory")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        where = f" [{exc.path}]" if getattr(exc, "path", "") else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericCheckFailed as exc:
        print(f"numeric check failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SpikeGradError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
