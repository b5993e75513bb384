"""Discrete lookup-table benchmarks and optimizer comparisons.

A task is a table of points drawn from a prior; optimizers may only evaluate
table rows.  Results are simple regret per step, per-step ranks (ties share
the averaged rank) and pairwise wins/ties at the final step, where a tie
means identical incumbent values.
"""

from __future__ import annotations

import csv
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .acqopt import AcqSpec, SearchSpace
from .bo import GpSurrogate, PfnSurrogate, RandomSurrogate, run_bo
from .gp import GaussianProcess
from .priors import PriorConfig, sample_datasets

logger = logging.getLogger(__name__)

Z95 = 1.959963984540054
OPTIMIZER_KINDS = ("pfn-ei", "pfn-kg", "pfn-ei+kg", "gp-ei", "gp-map", "random")


@dataclass(eq=False)
class DiscreteTask:
    X: np.ndarray
    y: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if len(self.X) != len(self.y) or len(self.y) < 2:
            raise ValueError("a task needs at least two (x, y) rows")
        if len({r.tobytes() for r in self.X}) != len(self.X):
            raise ValueError("task points must be distinct")

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def best_y(self) -> float:
        return float(self.y.max())

    def objective(self):
        table = {r.tobytes(): v for r, v in zip(self.X, self.y)}
        return lambda x: table[np.asarray(x, dtype=float).tobytes()]


def make_benchmark(prior: PriorConfig, n_tasks: int, n_points: int, dims, seed: int) -> list[DiscreteTask]:
    """``n_tasks`` tables of ``n_points`` uniform points for every dimension in ``dims``."""
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    dims = [int(dims)] if np.isscalar(dims) else [int(d) for d in dims]
    built = prior.build()
    tasks = []
    for d in dims:
        for i in range(n_tasks):
            rng = np.random.default_rng([seed, d, i])
            X, y = sample_datasets(built, 1, n_points, d, rng)
            tasks.append(DiscreteTask(X[0], y[0], f"d{d}-{i}"))
    return tasks


def save_benchmark(tasks, path) -> None:
    data = [{"name": t.name, "X": t.X.tolist(), "y": t.y.tolist()} for t in tasks]
    Path(path).write_text(json.dumps({"tasks": data}) + "\n")


def load_benchmark(path) -> list[DiscreteTask]:
    return [DiscreteTask(t["X"], t["y"], t["name"]) for t in json.loads(Path(path).read_text())["tasks"]]


# ---------------------------------------------------------------- optimizers


@dataclass(eq=False)
class Optimizer:
    """A surrogate recipe plus loop settings, picklable for worker processes."""

    name: str
    kind: str = "random"
    model: object = None
    gp: GaussianProcess | None = None
    acq: AcqSpec = AcqSpec()
    style: object = None
    p_kg: float = 0.5
    power_transform: bool = False
    warp: bool = False

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.kind.startswith("pfn") and self.model is None:
            raise ValueError(f"{self.kind} needs a model")

    def surrogate(self, seed: int):
        if self.kind == "pfn-ei":
            return PfnSurrogate(self.model, self.acq, self.style)
        if self.kind in ("pfn-kg", "pfn-ei+kg"):
            from .kg import EiKgSurrogate, KgSurrogate

            return KgSurrogate(self.model) if self.kind == "pfn-kg" else EiKgSurrogate(self.model, self.p_kg, seed)
        if self.kind == "gp-ei":
            return GpSurrogate(self.gp or GaussianProcess())
        if self.kind == "gp-map":
            return GpSurrogate(fit="map")
        return RandomSurrogate()


def _unit_seed(seed: int, task: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, task, rep]).generate_state(1)[0])


def run_task(opt: Optimizer, task: DiscreteTask, budget: int, seed: int, n_init: int = 1, **bo_kwargs) -> np.ndarray:
    """Regret after the initial design and after each of ``budget`` proposals."""
    init_rng = np.random.default_rng([seed, 0])
    init = task.X[init_rng.choice(len(task.X), size=min(n_init, len(task.X)), replace=False)]
    space = SearchSpace.from_pool(task.X)
    traj = run_bo(task.objective(), opt.surrogate(seed), space, budget, init=init,
                  rng=np.random.default_rng([seed, 1]), power_transform=opt.power_transform, warp=opt.warp,
                  seed=seed, **bo_kwargs)
    if traj.status == "aborted":
        raise RuntimeError(f"{opt.name} aborted on {task.name}")
    inc = traj.incumbents[len(init) - 1 :]
    inc = np.concatenate([inc, np.full(budget + 1 - len(inc), inc[-1])])[: budget + 1]
    return task.best_y - inc


def _job(args):
    opt, task, budget, seed, n_init, kwargs = args
    torch.set_num_threads(1)
    try:
        return run_task(opt, task, budget, seed, n_init, **kwargs), None
    except Exception as exc:  # any optimizer failure marks the task failed
        logger.warning("%s failed on %s: %s", opt.name, task.name, exc)
        return None, f"{type(exc).__name__}: {exc}"


# ---------------------------------------------------------------- report


@dataclass(eq=False)
class ComparisonReport:
    """``regret`` is ``(optimizers, units, steps)``; a unit is one (task, repetition)."""

    optimizers: list
    tasks: list
    repetitions: list
    regret: np.ndarray
    failures: dict = field(default_factory=dict)

    @property
    def n_units(self) -> int:
        return self.regret.shape[1]

    @property
    def ranks(self) -> np.ndarray:
        if self.n_units == 0:
            return np.zeros_like(self.regret)
        return rankdata(self.regret, axis=0, method="average")

    def _mean_ci(self, a: np.ndarray):
        mean = a.mean(1)
        n = a.shape[1]
        half = Z95 * a.std(1, ddof=1) / np.sqrt(n) if n > 1 else np.full_like(mean, np.nan)
        return mean, mean - half, mean + half

    def mean_regret(self):
        """Mean regret per optimizer and step, with 95% normal intervals."""
        return self._mean_ci(self.regret)

    def mean_rank(self):
        return self._mean_ci(self.ranks)

    def pairwise(self, step: int = -1):
        """``(wins, ties)`` matrices at ``step``: wins[i, j] counts units where i beats j."""
        r = self.regret[:, :, step]
        wins = (r[:, None, :] < r[None, :, :]).sum(-1)
        ties = (r[:, None, :] == r[None, :, :]).sum(-1)
        return wins, ties

    def table(self, step: int = -1) -> list[dict]:
        wins, ties = self.pairwise(step)
        rows = []
        for i, a in enumerate(self.optimizers):
            for j, b in enumerate(self.optimizers):
                if i < j:
                    rows.append({"optimizer": a, "versus": b, "wins": int(wins[i, j]), "ties": int(ties[i, j]),
                                 "losses": int(wins[j, i])})
        return rows


def run_comparison(optimizers, benchmark, budget: int, repetitions: int = 1, seed: int = 0, workers: int = 1,
                   n_init: int = 1, **bo_kwargs) -> ComparisonReport:
    """Run every optimizer on every task; units where any optimizer failed are dropped."""
    names = [o.name for o in optimizers]
    if len(set(names)) != len(names):
        raise ValueError("optimizer names must be unique")
    units = [(t, r) for t in range(len(benchmark)) for r in range(repetitions)]
    jobs = [(o, benchmark[t], budget, _unit_seed(seed, t, r), n_init, bo_kwargs) for (t, r) in units for o in optimizers]
    if workers > 1:
        with ProcessPoolExecutor(workers, mp_context=multiprocessing.get_context("fork")) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    O = len(optimizers)
    failures = {n: 0 for n in names}
    keep, curves = [], []
    for u, unit in enumerate(units):
        res = results[u * O : (u + 1) * O]
        for name, (_, err) in zip(names, res):
            failures[name] += err is not None
        if all(err is None for _, err in res):
            keep.append(unit)
            curves.append([c for c, _ in res])
    regret = np.array(curves).transpose(1, 0, 2) if curves else np.zeros((O, 0, budget + 1))
    return ComparisonReport(names, [benchmark[t].name for t, _ in keep], [r for _, r in keep], regret, failures)


RESULT_COLUMNS = ["optimizer", "task", "repetition", "step", "regret", "rank"]


def emit_report(report: ComparisonReport, directory) -> dict:
    """Write long-format results, a summary, the pairwise table and curve CSVs."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    ranks = report.ranks
    paths = {k: out / f"{k}.csv" for k in ("results", "table", "regret_curve", "rank_curve")}
    paths["summary"] = out / "summary.json"
    with open(paths["results"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for i, name in enumerate(report.optimizers):
            for u in range(report.n_units):
                for s in range(report.regret.shape[2]):
                    w.writerow([name, report.tasks[u], report.repetitions[u], s, repr(float(report.regret[i, u, s])),
                                repr(float(ranks[i, u, s]))])
    with open(paths["table"], "w", newline="") as fh:
        w = csv.DictWriter(fh, ["optimizer", "versus", "wins", "ties", "losses"])
        w.writeheader()
        w.writerows(report.table() if report.n_units else [])
    for key, fn in (("regret_curve", report.mean_regret), ("rank_curve", report.mean_rank)):
        with open(paths[key], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["optimizer", "step", "mean", "ci_low", "ci_high"])
            if report.n_units:
                mean, lo, hi = fn()
                for i, name in enumerate(report.optimizers):
                    for s in range(mean.shape[1]):
                        w.writerow([name, s, repr(float(mean[i, s])), repr(float(lo[i, s])), repr(float(hi[i, s]))])
    summary = {"optimizers": report.optimizers, "units": report.n_units, "steps": int(report.regret.shape[2]),
               "failures": report.failures, "final": {}}
    if report.n_units:
        reg, rank = report.mean_regret(), report.mean_rank()
        for i, name in enumerate(report.optimizers):
            summary["final"][name] = {"regret": float(reg[0][i, -1]), "regret_ci": [float(reg[1][i, -1]), float(reg[2][i, -1])],
                                      "rank": float(rank[0][i, -1]), "rank_ci": [float(rank[1][i, -1]), float(rank[2][i, -1])]}
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return paths


def read_report(directory) -> ComparisonReport:
    out = Path(directory)
    summary = json.loads((out / "summary.json").read_text())
    names = summary["optimizers"]
    steps = summary["steps"]
    with open(out / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    units = list(dict.fromkeys((row["task"], int(row["repetition"])) for row in rows))
    regret = np.zeros((len(names), len(units), steps))
    index = {k: i for i, k in enumerate(units)}
    for row in rows:
        u = index[(row["task"], int(row["repetition"]))]
        regret[names.index(row["optimizer"]), u, int(row["step"])] = float(row["regret"])
    return ComparisonReport(names, [t for t, _ in units], [r for _, r in units], regret, summary["failures"])
