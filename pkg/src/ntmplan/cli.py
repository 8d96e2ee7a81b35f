"""``ntmplan`` command line: one subcommand per pipeline stage.

Every run writes ``<out>.run.json`` next to its main output, recording the
command, resolved config, seed, input/output hashes, library versions and wall
time. Failures print a JSON error object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__

EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Bad flags or config, detected before any computation."""


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import torch

    return {"ntmplan": __version__, "python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__}


def run_manifest_path(out) -> Path:
    p = Path(out)
    return p.with_name(p.name + ".run.json")


def write_run_manifest(command, args, config, inputs, outputs, wall_time) -> Path:
    manifest = {
        "command": command,
        "seed": args.seed,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "versions": versions(),
        "wall_time": wall_time,
    }
    path = run_manifest_path(outputs[0])
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def parse_config(raw: str | None) -> dict:
    """``--config`` accepts inline JSON or a path to a JSON file."""
    if raw is None:
        return {}
    text = raw
    if not raw.lstrip().startswith("{"):
        path = Path(raw)
        if not path.exists():
            raise UsageError(f"config file not found: {raw}")
        text = path.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed config JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def _require(args, *names):
    for name in names:
        value = getattr(args, name)
        if value is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")
        if name in ("env", "dataset", "checkpoint") and not Path(value).exists():
            raise UsageError(f"input file not found: {value}")


def _build(cls, fields: dict, what: str):
    try:
        return cls.from_dict(fields) if hasattr(cls, "from_dict") else cls(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} config: {exc}") from exc


def _pop_keys(cfg: dict, keys) -> dict:
    return {k: cfg.pop(k) for k in list(keys) if k in cfg}


def _check_empty(cfg: dict):
    if cfg:
        raise UsageError(f"unknown config keys: {sorted(cfg)}")


def _thresholds(cfg: dict):
    from .trajectory import Thresholds

    return _build(Thresholds, cfg.pop("thresholds", {}), "thresholds")


def _load_env(path):
    from .sdf import load_environment

    return load_environment(path).normalized()


def _set_threads(args):
    import torch

    torch.set_num_threads(max(1, args.threads or 1))


# --- subcommands --------------------------------------------------------------


def cmd_gen_env(args, cfg):
    from .envgen import generate_environment
    from .sdf import save_environment

    _require(args, "kind", "density", "out")
    _check_empty(cfg)

    def run():
        env = generate_environment(args.kind, args.density, seed=args.seed)
        save_environment(env, args.out)
        return {"obstacles": len(env.primitives), "env_hash": env.normalized().content_hash()}

    return run, {"kind": args.kind, "density": args.density}, [], [args.out]


def cmd_gen_data(args, cfg):
    from .datagen import DatagenConfig, generate_dataset, revalidate, save_dataset, split_dataset

    _require(args, "env", "out")
    fractions = cfg.pop("split", None)
    fields = dict(cfg)
    fields["seed"] = args.seed
    if args.agents is not None:
        fields["n_agents"] = args.agents
    if args.horizon is not None:
        fields["horizon"] = args.horizon
    if args.threads:
        fields["workers"] = args.threads
    config = _build(DatagenConfig, fields, "dataset")
    if fractions is not None and (len(fractions) != 3 or not np.isclose(sum(fractions), 1.0)):
        raise UsageError("split must be three fractions summing to 1")
    out = Path(args.out)
    outputs = [out]
    if fractions is not None:
        outputs += [out.with_name(f"{out.stem}.{part}{out.suffix}") for part in ("train", "val", "test")]

    def run():
        env = _load_env(args.env)
        ds = generate_dataset(env, config)
        ds.manifest["env_file_hash"] = sha256_file(args.env)
        save_dataset(ds, out)
        if fractions is not None:
            for part, path in zip(split_dataset(ds, fractions, seed=args.seed), outputs[1:]):
                save_dataset(part, path)
        bad = revalidate(ds, env, config.thresholds)
        if bad:
            raise RuntimeError(f"{len(bad)} generated instances failed re-validation")
        return {"instances": len(ds), "counts": ds.manifest["counts"]}

    return run, config.to_dict() | {"split": fractions}, [args.env], outputs


def cmd_train(args, cfg):
    from .datagen import load_dataset
    from .model import NtmConfig, build_model, save_params
    from .training import train

    _require(args, "env", "dataset", "out")
    thresholds = _thresholds(cfg)
    fields = dict(cfg)
    fields["seed"] = args.seed
    if args.agents is not None:
        fields["n_agents"] = args.agents
    if args.horizon is not None:
        fields["horizon"] = args.horizon
    config = _build(NtmConfig, fields, "model")
    out = Path(args.out)
    log_path = out.with_name(out.name + ".log.csv")

    def run():
        _set_threads(args)
        env = _load_env(args.env)
        ds = load_dataset(args.dataset)
        _check_env(ds.manifest, env)
        bundles = ds.bundles()
        nonlocal config
        if "horizon" not in fields:
            config = replace(config, horizon=bundles.shape[2] - 1)
        if "n_agents" not in fields:
            config = replace(config, n_agents=bundles.shape[1])
        if config.epochs == 0:
            model, history = build_model(config), []
        else:
            model, history = train(bundles, env, thresholds, config, log_path=log_path)
        raw_env = _raw_env(args.env)
        save_params(
            model,
            out,
            env_hash=env.content_hash(),
            normalization={"center": raw_env.norm_center.tolist(), "scale": raw_env.norm_scale},
            extra={"dataset_hash": sha256_file(args.dataset), "thresholds": thresholds.to_dict()},
        )
        return {"epochs": len(history), "final": history[-1] if history else None}

    outputs = [out] + ([log_path] if config.epochs else [])
    return run, {"model": config.to_dict(), "thresholds": thresholds.to_dict()}, [args.env, args.dataset], outputs


def _raw_env(path):
    from .sdf import load_environment

    return load_environment(path)


def _check_env(manifest: dict, env):
    from .evalkit import ArtifactMismatch

    if manifest.get("env_hash") not in (None, env.content_hash()):
        raise ArtifactMismatch("dataset was generated for a different environment")


def _queries(args, env, model_agents):
    from .datagen import load_dataset
    from .sdf import sample_free_points
    from .trajectory import PlanningInstance

    if args.dataset:
        ds = load_dataset(args.dataset)
        _check_env(ds.manifest, env)
        return ds.instances
    n = args.agents or model_agents
    pts = sample_free_points(env, 2 * n, 0.06, seed=args.seed)
    return [PlanningInstance(pts.reshape(n, 6))]


def _refine_parts(cfg: dict, refine_steps):
    from .optimizer import OptimizerConfig

    margin = cfg.pop("refine_margin", 0.01)
    opt_fields = cfg.pop("optimizer", {"stop_when_valid": False})
    opt = _build(OptimizerConfig, opt_fields, "optimizer")
    steps = refine_steps or 0
    return (opt.with_steps(steps) if steps > 0 else None), margin


def _write_bundles_and_report(out, name, bundles, times, env, thresholds, extra):
    from .evalkit import evaluate
    from .trajectory import PlanningInstance, write_jsonl

    write_jsonl([PlanningInstance.from_bundle(b) for b in bundles], out)
    report = {"conditions": [evaluate(name, bundles, env, thresholds, times).to_dict()], **extra}
    report_path = Path(out).with_name(Path(out).name + ".report.json")
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def cmd_plan(args, cfg):
    from .inference import infer
    from .model import load_params

    _require(args, "env", "checkpoint", "out")
    if args.dataset:
        _require(args, "dataset")
    thresholds = _thresholds(cfg)
    refine, margin = _refine_parts(cfg, args.refine_steps)
    _check_empty(cfg)
    out = Path(args.out)

    def run():
        _set_threads(args)
        env = _load_env(args.env)
        model, config, _ = load_params(args.checkpoint, expected_env_hash=env.content_hash())
        bundles, times = [], []
        for inst in _queries(args, env, config.n_agents):
            res = infer(model, inst.starts_goals, env=env, thresholds=thresholds.inflated(margin), refine=refine)
            bundles.append(res.bundle)
            times.append(res.calc_time)
        report = _write_bundles_and_report(
            out, "model", bundles, times, env, thresholds, {"checkpoint_hash": sha256_file(args.checkpoint)}
        )
        return report["conditions"][0]

    inputs = [args.env, args.checkpoint] + ([args.dataset] if args.dataset else [])
    config = {"thresholds": thresholds.to_dict(), "refine": refine.to_dict() if refine else None, "refine_margin": margin}
    return run, config, inputs, [out, out.with_name(out.name + ".report.json")]


def cmd_deconflict(args, cfg):
    from .datagen import load_dataset
    from .evalkit import perturb_until
    from .inference import deconflict
    from .model import load_params

    _require(args, "env", "checkpoint", "dataset", "out")
    thresholds = _thresholds(cfg)
    refine, margin = _refine_parts(cfg, args.refine_steps)
    perturb = cfg.pop("perturb_icr", None)
    _check_empty(cfg)
    out = Path(args.out)

    def run():
        _set_threads(args)
        env = _load_env(args.env)
        model, _, _ = load_params(args.checkpoint, expected_env_hash=env.content_hash())
        ds = load_dataset(args.dataset)
        _check_env(ds.manifest, env)
        given = [inst.trajectories for inst in ds.instances]
        if any(b is None for b in given):
            raise ValueError("deconflict needs trajectories in every instance")
        if perturb is not None:
            given = perturb_until(given, thresholds, float(perturb), args.seed)
        bundles, times = [], []
        for b in given:
            res = deconflict(model, b, env=env, thresholds=thresholds.inflated(margin), refine=refine)
            bundles.append(res.bundle)
            times.append(res.calc_time)
        from .evalkit import evaluate

        before = evaluate("before", given, env, thresholds).to_dict()
        report = _write_bundles_and_report(
            out, "after", bundles, times, env, thresholds, {"before": before, "checkpoint_hash": sha256_file(args.checkpoint)}
        )
        return report["conditions"][0]

    config = {
        "thresholds": thresholds.to_dict(),
        "refine": refine.to_dict() if refine else None,
        "refine_margin": margin,
        "perturb_icr": perturb,
    }
    return run, config, [args.env, args.checkpoint, args.dataset], [out, out.with_name(out.name + ".report.json")]


def cmd_optimize(args, cfg):
    from .datagen import load_dataset
    from .optimizer import OptimizerConfig, optimize

    _require(args, "env", "dataset", "out")
    thresholds = _thresholds(cfg)
    margin = cfg.pop("margin", 0.02)
    config = _build(OptimizerConfig, cfg, "optimizer")
    if args.refine_steps is not None:
        config = config.with_steps(args.refine_steps)
    out = Path(args.out)

    def run():
        env = _load_env(args.env)
        ds = load_dataset(args.dataset)
        _check_env(ds.manifest, env)
        bundles, times = [], []
        for inst in ds.instances:
            if inst.trajectories is None:
                raise ValueError("optimize needs trajectories in every instance")
            t0 = time.perf_counter()
            best, _ = optimize(inst.trajectories, env, thresholds.inflated(margin), config)
            bundles.append(best)
            times.append(time.perf_counter() - t0)
        report = _write_bundles_and_report(out, "optimized", bundles, times, env, thresholds, {})
        return report["conditions"][0]

    resolved = {"thresholds": thresholds.to_dict(), "optimizer": config.to_dict(), "margin": margin}
    return run, resolved, [args.env, args.dataset], [out, out.with_name(out.name + ".report.json")]


def cmd_eval(args, cfg):
    from .datagen import load_dataset
    from .evalkit import PROTOCOLS, ExperimentConfig, evaluate, run_experiment

    _require(args, "env", "out")
    protocol = args.protocol
    if protocol not in PROTOCOLS + ("dataset",):
        raise UsageError(f"unknown protocol {protocol!r}")
    if protocol != "scaling":
        _require(args, "dataset")
    if protocol != "dataset":
        _require(args, "checkpoint")
    fields = dict(cfg)
    fields["seed"] = args.seed
    config = _build(ExperimentConfig, fields, "experiment")
    if args.refine_steps is not None:
        config = replace(config, deconflict_refine_steps=args.refine_steps)
    out = Path(args.out)
    csv_path = out.with_name(out.name + ".csv")

    def run():
        _set_threads(args)
        if protocol == "dataset":
            env = _load_env(args.env)
            ds = load_dataset(args.dataset)
            _check_env(ds.manifest, env)
            rep = evaluate("dataset", [i.trajectories for i in ds.instances], env, config.thresholds)
            report = {
                "protocol": "dataset",
                "env_hash": env.content_hash(),
                "dataset_hash": sha256_file(args.dataset),
                "thresholds": config.thresholds.to_dict(),
                "conditions": [rep.to_dict()],
            }
            out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
            return report["conditions"]
        report = run_experiment(protocol, args.checkpoint, args.dataset, args.env, config, out, csv_path)
        return report["conditions"]

    inputs = [p for p in (args.env, args.checkpoint, args.dataset) if p]
    outputs = [out] + ([csv_path] if protocol != "dataset" else [])
    return run, {"protocol": protocol, **config.to_dict()}, inputs, outputs


COMMANDS = {
    "gen-env": cmd_gen_env,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "plan": cmd_plan,
    "deconflict": cmd_deconflict,
    "optimize": cmd_optimize,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntmplan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--env")
        p.add_argument("--dataset")
        p.add_argument("--checkpoint")
        p.add_argument("--out")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="inline JSON object or path to a JSON file")
        p.add_argument("--agents", type=int)
        p.add_argument("--horizon", type=int)
        p.add_argument("--refine-steps", type=int)
        p.add_argument("--threads", type=int)
        if name == "gen-env":
            p.add_argument("--kind", choices=("sphere-forest", "box-city", "capsule-grove"))
            p.add_argument("--density", type=int)
        if name == "eval":
            p.add_argument("--protocol", default="plan", help="plan, ablation, deconflict, scaling or dataset")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        # validation happens here, before any computation
        run, resolved, inputs, outputs = COMMANDS[args.command](args, cfg)
        for p in outputs:
            parent = Path(p).parent
            if not parent.is_dir():
                raise UsageError(f"output directory does not exist: {parent}")
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    t0 = time.perf_counter()
    try:
        summary = run()
    except Exception as exc:  # noqa: BLE001 - every module error becomes an error JSON
        return _fail(EXIT_ERROR, exc)
    write_run_manifest(args.command, args, resolved, inputs, outputs, time.perf_counter() - t0)
    print(json.dumps(summary, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
