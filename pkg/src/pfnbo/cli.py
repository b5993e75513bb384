"""Command line entry points.

Every subcommand reads an optional YAML config with one section per concern
(``prior``, ``model``, ``kg``, ``train``, ``bo``, ``space``, ``objective``,
``bench``, ``compare``, ``inspect``).  Flags and ``--set section.key=value``
override config keys.  ``--seed`` is required everywhere.

    pfnbo train --seed 0 --config run.yaml --out model.pfn
    pfnbo bo-run --seed 0 --checkpoint model.pfn --objective branin --budget 20 --out traj.csv
    pfnbo bench --seed 0 --n-tasks 100 --n-points 200 --dims 1 2 --out bench.json
    pfnbo compare --seed 0 --benchmark bench.json --config optimizers.yaml --out report/
    pfnbo inspect-prior --seed 0 --n 50 --d 2 --count 3 --out datasets/
"""

from __future__ import annotations

import argparse
import copy
import importlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import bench, bo, kg, pfn
from .acqopt import AcqSpec, Dimension, SearchSpace
from .gp import GaussianProcess, Hyperpriors
from .priors import BnnPrior, Dataset, PriorConfig, UserPriorSpec, sample_datasets

logger = logging.getLogger("pfnbo")

DEFAULTS = {
    "prior": {},
    "model": {},
    "kg": {},
    "train": {"out": "model.pfn", "log_every": 100},
    "bo": {"checkpoint": None, "surrogate": "pfn", "budget": 20, "init": "sobol", "acquisition": "ei",
           "power_transform": True, "warp": False, "n_candidates": 10000, "top_k": 100, "maxiter": 30,
           "user_prior": None, "out": "trajectory.csv"},
    "space": {"dims": None},
    "objective": {"name": "branin", "table": None},
    "bench": {"n_tasks": 100, "n_points": 200, "dims": [1, 2], "out": "benchmark.json"},
    "compare": {"benchmark": "benchmark.json", "budget": 50, "repetitions": 1, "workers": 1, "n_init": 1,
                "n_candidates": 10000, "top_k": 100, "maxiter": 30,
                "optimizers": [{"name": "random", "kind": "random"}], "out": "report"},
    "inspect": {"n": 50, "d": 1, "count": 5, "out": "datasets"},
}


# ---------------------------------------------------------------- config


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def set_key(config: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = config
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def load_config(path, overrides=(), flags: dict | None = None) -> dict:
    config = copy.deepcopy(DEFAULTS)
    if path:
        config = _merge(config, yaml.safe_load(Path(path).read_text()) or {})
    for dotted, value in (flags or {}).items():
        if value is not None:
            set_key(config, dotted, value)
    for item in overrides:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_key(config, key.strip(), yaml.safe_load(raw))
    return config


def prior_config(section: dict) -> PriorConfig:
    section = dict(section)
    if "hyperpriors" in section:
        section["hyperpriors"] = Hyperpriors(**section["hyperpriors"])
    if "bnn" in section:
        section["bnn"] = BnnPrior(**section["bnn"])
    if "warp_std" in section:
        section["warp_std"] = tuple(section["warp_std"])
    return PriorConfig(**section)


def search_space(section: dict, default_d: int) -> SearchSpace:
    dims = section.get("dims")
    if not dims:
        return SearchSpace.unit(default_d)
    return SearchSpace(tuple(Dimension(d.get("type", "continuous"), float(d.get("lo", 0.0)), float(d.get("hi", 1.0)))
                             for d in dims))


# ---------------------------------------------------------------- objectives


def branin(x):
    """Negated Branin on [-5, 10] x [0, 15] (maximum about -0.398)."""
    x1, x2 = float(x[0]), float(x[1])
    b, c, t = 5.1 / (4 * np.pi**2), 5 / np.pi, 1 / (8 * np.pi)
    return -((x2 - b * x1**2 + c * x1 - 6) ** 2 + 10 * (1 - t) * np.cos(x1) + 10)


def sphere(x):
    return -float(np.sum((np.asarray(x, dtype=float) - 0.5) ** 2))


BUILTINS = {"branin": (branin, [(-5.0, 10.0), (0.0, 15.0)]), "sphere": (sphere, None)}


def make_objective(section: dict, space_section: dict):
    """Returns ``(objective, space)``: a builtin, a CSV lookup table or ``module:function``."""
    if section.get("table"):
        data = Dataset.from_csv(section["table"])
        task = bench.DiscreteTask(data.X, data.y, Path(section["table"]).stem)
        return task.objective(), SearchSpace.from_pool(task.X)
    name = section.get("name", "branin")
    if name in BUILTINS:
        fn, box = BUILTINS[name]
        if box and not space_section.get("dims"):
            return fn, SearchSpace.box(*zip(*box))
        return fn, search_space(space_section, int(section.get("d", 2)))
    if ":" in name:
        module, attr = name.split(":", 1)
        fn = getattr(importlib.import_module(module), attr)
        return fn, search_space(space_section, int(section.get("d", 2)))
    raise SystemExit(f"unknown objective {name!r}")


# ---------------------------------------------------------------- subcommands


def cmd_train(config: dict, seed: int) -> Path:
    prior = prior_config(config["prior"])
    cfg = pfn.PfnConfig.from_dict(config["model"])
    out = Path(config["train"]["out"])
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    if cfg.style == "kg":
        model = kg.train_kg_model(prior, cfg, kg.KgTrainingConfig(**config["kg"]), rng)
    else:
        sink = None
        if cfg.checkpoint_every:
            sink = lambda m, step: pfn.save(m, out.with_name(f"{out.stem}.step{step}{out.suffix}"))
        model = pfn.train(prior, cfg, rng, checkpoint_sink=sink, log_every=int(config["train"]["log_every"]))
    model.meta["prior"] = json.loads(json.dumps(config["prior"], default=str))
    model.meta["seed"] = seed
    pfn.save(model, out)
    logger.info("wrote %s (%d steps, final loss %.4f)", out, model.steps_trained, np.mean(model.history[-50:]))
    return out


def _surrogate(section: dict, d: int, seed: int):
    kind = section["surrogate"]
    if kind == "random":
        return bo.RandomSurrogate()
    if kind == "gp":
        return bo.GpSurrogate(GaussianProcess(**section.get("gp", {})))
    if kind == "gp-map":
        return bo.GpSurrogate(fit="map")
    if not section.get("checkpoint"):
        raise SystemExit("a pfn surrogate needs --checkpoint")
    model = pfn.load(section["checkpoint"])
    if kind == "kg":
        return kg.KgSurrogate(model)
    if kind == "ei+kg":
        return kg.EiKgSurrogate(model, float(section.get("p_kg", 0.5)), seed)
    style = None
    if model.cfg.style == "user-prior":
        up = section.get("user_prior")
        spec = UserPriorSpec.none(d) if not up else UserPriorSpec(np.asarray(up["lo"], float), np.asarray(up["hi"], float),
                                                                  float(up["rho"]))
        style = spec.encode(model.cfg.capacity)
    elif model.cfg.style == "kg":
        style = kg.mode_style("ppd")
    return bo.PfnSurrogate(model, AcqSpec(section["acquisition"]), style)


def _without_outputs(config: dict) -> dict:
    return {k: ({kk: vv for kk, vv in v.items() if kk != "out"} if isinstance(v, dict) else v) for k, v in config.items()}


def cmd_bo_run(config: dict, seed: int) -> Path:
    section = config["bo"]
    objective, space = make_objective(config["objective"], config["space"])
    surrogate = _surrogate(section, space.d, seed)
    traj = bo.run_bo(objective, surrogate, space, int(section["budget"]), init=section["init"], seed=seed,
                     power_transform=bool(section["power_transform"]), warp=bool(section["warp"]),
                     n_candidates=int(section["n_candidates"]), top_k=int(section["top_k"]),
                     maxiter=int(section["maxiter"]), config=_without_outputs(config))
    out = Path(section["out"])
    traj.to_csv(out)
    logger.info("wrote %s (status %s, best %.6g)", out, traj.status, traj.incumbents[-1] if traj.ok_steps else float("nan"))
    return out


def cmd_bench(config: dict, seed: int) -> Path:
    section = config["bench"]
    tasks = bench.make_benchmark(prior_config(config["prior"]), int(section["n_tasks"]), int(section["n_points"]),
                                 section["dims"], seed)
    out = Path(section["out"])
    bench.save_benchmark(tasks, out)
    logger.info("wrote %s (%d tasks)", out, len(tasks))
    return out


def _optimizer(spec: dict) -> bench.Optimizer:
    spec = dict(spec)
    if "checkpoint" in spec:
        spec["model"] = pfn.load(spec.pop("checkpoint"))
        if spec["model"].cfg.style == "kg" and spec.get("kind") == "pfn-ei":
            spec.setdefault("style", kg.mode_style("ppd"))
    if "gp" in spec:
        spec["gp"] = GaussianProcess(**spec["gp"])
    if "acquisition" in spec:
        spec["acq"] = AcqSpec(spec.pop("acquisition"))
    return bench.Optimizer(**spec)


def cmd_compare(config: dict, seed: int) -> Path:
    section = config["compare"]
    tasks = bench.load_benchmark(section["benchmark"])
    optimizers = [_optimizer(o) for o in section["optimizers"]]
    report = bench.run_comparison(optimizers, tasks, int(section["budget"]), int(section["repetitions"]), seed,
                                  int(section["workers"]), int(section["n_init"]),
                                  n_candidates=int(section["n_candidates"]), top_k=int(section["top_k"]),
                                  maxiter=int(section["maxiter"]))
    out = Path(section["out"])
    bench.emit_report(report, out)
    for row in report.table():
        logger.info("%s vs %s: %d wins, %d ties, %d losses", row["optimizer"], row["versus"], row["wins"], row["ties"],
                    row["losses"])
    return out


def cmd_inspect_prior(config: dict, seed: int) -> Path:
    section = config["inspect"]
    out = Path(section["out"])
    out.mkdir(parents=True, exist_ok=True)
    prior = prior_config(config["prior"]).build()
    count, n, d = int(section["count"]), int(section["n"]), int(section["d"])
    X, y = sample_datasets(prior, count, n, d, np.random.default_rng(seed))
    for i in range(count):
        Dataset(X[i], y[i]).to_csv(out / f"dataset_{i:03d}.csv")
    logger.info("wrote %d datasets to %s", count, out)
    return out


COMMANDS = {"train": cmd_train, "bo-run": cmd_bo_run, "bench": cmd_bench, "compare": cmd_compare,
            "inspect-prior": cmd_inspect_prior}

# flag -> (config key, argparse kwargs)
FLAGS = {
    "train": {"--out": ("train.out", {}), "--steps": ("model.steps", {"type": int}),
              "--log-every": ("train.log_every", {"type": int})},
    "bo-run": {"--out": ("bo.out", {}), "--checkpoint": ("bo.checkpoint", {}), "--surrogate": ("bo.surrogate", {}),
               "--budget": ("bo.budget", {"type": int}), "--init": ("bo.init", {}),
               "--acquisition": ("bo.acquisition", {}), "--objective": ("objective.name", {}),
               "--table": ("objective.table", {})},
    "bench": {"--out": ("bench.out", {}), "--n-tasks": ("bench.n_tasks", {"type": int}),
              "--n-points": ("bench.n_points", {"type": int}), "--dims": ("bench.dims", {"type": int, "nargs": "+"})},
    "compare": {"--out": ("compare.out", {}), "--benchmark": ("compare.benchmark", {}),
                "--budget": ("compare.budget", {"type": int}), "--repetitions": ("compare.repetitions", {"type": int}),
                "--workers": ("compare.workers", {"type": int})},
    "inspect-prior": {"--out": ("inspect.out", {}), "--n": ("inspect.n", {"type": int}),
                      "--d": ("inspect.d", {"type": int}), "--count": ("inspect.count", {"type": int})},
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, required=True)
    common.add_argument("--config", help="YAML file with nested sections")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="pfnbo", description="Prior-fitted networks for Bayesian optimisation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in FLAGS.items():
        p = sub.add_parser(name, parents=[common])
        for flag, (key, kwargs) in flags.items():
            p.add_argument(flag, dest=key, default=None, **kwargs)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    torch.set_num_threads(1)
    flags = {key: getattr(args, key) for key, _ in FLAGS[args.command].values()}
    config = load_config(args.config, args.set, flags)
    COMMANDS[args.command](config, args.seed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
