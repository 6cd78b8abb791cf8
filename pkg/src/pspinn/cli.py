"""Command-line pipeline: ``generate -> train -> eval -> bench``, plus ``simulate``.

Each stage writes into ``<out>/<stage>/`` together with the resolved config
and a manifest (seeds, library versions, sha256 of every input and output
file).  Failures exit with the error's code and a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import config as cfgmod
from .dataset import (
    build_collocation,
    generate_labeled,
    load_dataset,
    save_dataset,
    split_by_trajectory,
    thin,
    time_grid,
)
from .errors import ConfigError, IoFailure, MissingArtifact, PinnError
from .evaluation import bench_inference, evaluate, export_overlays
from .nn import config_hash, init_mlp, load_model, normalization_bounds, save_model
from .sampling import sample, sm9_reference_domain
from .solver import simulate
from .training import history_to_csv, train

STAGES = ("generate", "train", "eval", "bench", "simulate")


# ---------------------------------------------------------------- helpers


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _stage_dir(cfg, stage):
    root = Path(cfg["out_dir"]) / stage
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {root}: {exc}") from exc
    return root


def _require(path, stage, producer):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{stage} needs {path}; run '{producer}' first")
    return path


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _relative(path, base):
    try:
        return str(Path(path).resolve().relative_to(Path(base).resolve()))
    except ValueError:
        return str(path)


def _finish_stage(cfg, stage, root, inputs, extra=None):
    """Record the resolved config and a manifest next to the stage outputs."""
    _write_text(root / "config.yaml", cfgmod.dump(cfg))
    outputs = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "stage": stage,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config_sha256": config_hash(cfgmod.identity(cfg)),
        "seeds": {
            "seed": cfg["seed"],
            "data": cfg["dataset"]["seed_data"],
            "collocation": cfg["dataset"]["seed_collocation"],
            "split": cfg["dataset"]["seed_split"],
            "network": cfg["network"]["seed"],
            "training": cfg["training"]["seed"],
            "bench": cfg["evaluation"]["bench_seed"],
        },
        "inputs": {_relative(p, cfg["out_dir"]): _sha256(p) for p in inputs},
        "outputs": {str(p.relative_to(root)): _sha256(p) for p in outputs},
        **(extra or {}),
    }
    _write_text(root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _component_and_domain(cfg):
    component = cfgmod.build_component(cfg)
    if cfg.get("domain") is None:
        if cfg["component"]["name"] != "sm9":
            raise ConfigError("domain: required for non-default components")
        return component, sm9_reference_domain()
    return component, cfgmod.build_domain(cfg, component)


def _dataset_files(root):
    return sorted(p for p in Path(root).iterdir() if p.suffix in (".csv", ".pnnd", ".json") and p.name != "manifest.json")


# ---------------------------------------------------------------- stages


def cmd_generate(cfg, threads=1):
    component, domain = _component_and_domain(cfg)
    ds_cfg = cfgmod.dataset_settings(cfg)
    solver_cfg = cfgmod.solve_config(cfg)
    horizon, dt = ds_cfg["horizon_s"], ds_cfg["dt_s"]
    try:
        ics = sample(domain, ds_cfg["n_trajectories"], ds_cfg["seed_data"], ds_cfg["sampling"])
        _, points = generate_labeled(component, ics, horizon, dt, solver_cfg, threads)
        split = split_by_trajectory(points, ds_cfg["split_ratios"], ds_cfg["seed_split"])
        split.train = thin(split.train, ds_cfg["data_stride"], ds_cfg["stride_offset"] % ds_cfg["data_stride"])
        col_ics = sample(domain, ds_cfg["n_collocation"], ds_cfg["seed_collocation"], ds_cfg["sampling"])
        split.collocation = build_collocation(
            col_ics,
            time_grid(horizon, dt),
            ds_cfg["collocation_stride"],
            ds_cfg["stride_offset"] % ds_cfg["collocation_stride"],
            first_id=ds_cfg["n_trajectories"],
        )
    except ValueError as exc:
        if isinstance(exc, PinnError):
            raise
        raise ConfigError(f"dataset: {exc}") from exc
    split.metadata = {
        "horizon_s": horizon,
        "dt_s": dt,
        "data_stride": ds_cfg["data_stride"],
        "collocation_stride": ds_cfg["collocation_stride"],
        "n_trajectories": ds_cfg["n_trajectories"],
        "n_collocation": ds_cfg["n_collocation"],
        "domain": domain.to_mapping(),
        "counts": {
            "labeled_before_thinning": len(points),
            "train": len(split.train),
            "validation": len(split.validation),
            "test": len(split.test),
            "collocation": len(split.collocation),
            "train_trajectories": len(split.train.trajectory_ids()),
            "validation_trajectories": len(split.validation.trajectory_ids()),
            "test_trajectories": len(split.test.trajectory_ids()),
        },
    }
    root = _stage_dir(cfg, "generate")
    save_dataset(split, root, ds_cfg["binary"], component.state_names)
    return _finish_stage(cfg, "generate", root, [])


def cmd_train(cfg, threads=1):
    data_root = Path(cfg["out_dir"]) / "generate"
    _require(data_root / "metadata.json", "train", "generate")
    component, domain = _component_and_domain(cfg)
    datasets = load_dataset(data_root)
    dims = cfgmod.layer_dims(cfg, component.state_dim)
    if cfg["network"]["normalize_inputs"]:
        low, high = normalization_bounds(domain.bounds, cfgmod.dataset_settings(cfg)["horizon_s"])
    else:
        low = high = None
    try:
        model = init_mlp(dims, cfg["network"]["seed"], low, high, cfg["network"]["activation"])
    except ValueError as exc:
        if isinstance(exc, PinnError):
            raise
        raise ConfigError(f"network: {exc}") from exc
    tcfg = cfgmod.train_config(cfg)
    result = train(tcfg, datasets, component, model)
    trained = result.model
    trained.provenance = {"config_sha256": config_hash(cfgmod.identity(cfg)), "best_epoch": result.best_epoch}
    root = _stage_dir(cfg, "train")
    save_model(trained, root / "model.pnnm")
    _write_text(root / "history.csv", history_to_csv(result.history))
    summary = {"best_epoch": result.best_epoch, "stopped_epoch": result.stopped_epoch, "train_config": tcfg.to_dict()}
    _write_text(root / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return _finish_stage(cfg, "train", root, _dataset_files(data_root))


def _load_trained(cfg, stage):
    path = _require(Path(cfg["out_dir"]) / "train" / "model.pnnm", stage, "train")
    component, domain = _component_and_domain(cfg)
    model = load_model(path, cfgmod.layer_dims(cfg, component.state_dim))
    return path, model, component, domain


def cmd_eval(cfg, threads=1):
    model_path, model, component, _ = _load_trained(cfg, "eval")
    data_root = Path(cfg["out_dir"]) / "generate"
    _require(data_root / "metadata.json", "eval", "generate")
    datasets = load_dataset(data_root)
    metrics = evaluate(model, datasets.test, component.state_names)
    root = _stage_dir(cfg, "eval")
    _write_text(root / "metrics.txt", metrics.to_report())
    _write_text(root / "metrics.json", metrics.to_json() + "\n")
    _write_text(root / "per_timestep.csv", metrics.timestep_table())
    n_overlays = int(cfg["evaluation"]["n_overlays"])
    if n_overlays > 0:
        ics = datasets.test.initial_conditions()[:n_overlays]
        export_overlays(
            model,
            component,
            ics,
            root / "overlays",
            cfgmod.dataset_settings(cfg)["horizon_s"],
            cfgmod.dataset_settings(cfg)["dt_s"],
            cfgmod.solve_config(cfg),
            component.state_names,
        )
    return _finish_stage(cfg, "eval", root, [model_path, *_dataset_files(data_root)], {"summary": metrics.summary()})


def cmd_bench(cfg, threads=1):
    model_path, model, component, domain = _load_trained(cfg, "bench")
    ev = cfg["evaluation"]
    sizes = [int(n) for n in ev["bench_sizes"]]
    if any(n < 0 for n in sizes):
        raise ConfigError("evaluation.bench_sizes: sizes must be >= 0")
    method = cfg["dataset"]["sampling"]
    ic_sets = [sample(domain, n, int(ev["bench_seed"]), method) if n > 0 else np.empty((0, domain.dim)) for n in sizes]
    try:
        table = bench_inference(
            model,
            component,
            ic_sets,
            cfgmod.solve_config(cfg),
            cfgmod.dataset_settings(cfg)["dt_s"],
            int(ev["bench_repeats"]),
        )
    except ValueError as exc:
        if isinstance(exc, PinnError):
            raise
        raise ConfigError(f"evaluation: {exc}") from exc
    root = _stage_dir(cfg, "bench")
    _write_text(root / "timing.csv", table.to_csv())
    _write_text(root / "timing.txt", table.to_text())
    return _finish_stage(cfg, "bench", root, [model_path])


def _parse_x0(text, domain):
    if text is None:
        return (domain.low + domain.high) / 2.0
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--x0: expected comma-separated numbers, got {text!r}") from None
    if len(values) != domain.dim:
        raise ConfigError(f"--x0: expected {domain.dim} values, got {len(values)}")
    return np.array(values)


def cmd_simulate(cfg, x0=None, threads=1):
    component, domain = _component_and_domain(cfg)
    x0 = _parse_x0(x0, domain)
    settings = cfgmod.dataset_settings(cfg)
    tr = simulate(component, x0, cfgmod.solve_config(cfg), settings["dt_s"])
    root = _stage_dir(cfg, "simulate")
    table = np.column_stack([tr.times, tr.states])
    header = ",".join(["t", *component.state_names])
    try:
        np.savetxt(root / "trajectory.csv", table, fmt="%.17g", delimiter=",", header=header, comments="")
    except OSError as exc:
        raise IoFailure(f"cannot write trajectory: {exc}") from exc
    return _finish_stage(cfg, "simulate", root, [], {"x0": [float(v) for v in x0]})


# ---------------------------------------------------------------- entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="pspinn", description="Physics-informed surrogate pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--out", type=Path, help="run directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides seed)")
    common.add_argument("--threads", type=int, default=1, help="worker count; 1 is bitwise deterministic")
    common.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common])
        if name == "simulate":
            p.add_argument("--x0", help="comma-separated initial state (default: domain centre)")
    return parser


def run(args):
    if args.threads < 1:
        raise ConfigError(f"--threads: must be >= 1, got {args.threads}")
    cfg = cfgmod.load_config(args.config, args.sets, args.seed, args.out)
    commands = {
        "generate": cmd_generate,
        "train": cmd_train,
        "eval": cmd_eval,
        "bench": cmd_bench,
    }
    with threadpool_limits(limits=args.threads):
        if args.command == "simulate":
            return cmd_simulate(cfg, args.x0, args.threads)
        return commands[args.command](cfg, args.threads)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        root = run(args)
    except PinnError as exc:
        print(json.dumps({"error": type(exc).__name__, "exit_code": exc.exit_code, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    print(str(root))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
