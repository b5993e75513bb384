"""The Bayesian-optimisation loop (maximisation) and its trajectory record."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.stats import qmc

from .acqopt import AcqSpec, ExhaustedSpaceError, SearchSpace, pfn_score, propose
from .gp import GaussianProcess, Hyperpriors, condition, fit_map, gaussian_ei_torch
from .transforms import WarpParams, fit_output_transform, fit_warp

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- surrogates


class PfnSurrogate:
    """Acquisition scores from a trained network."""

    name = "pfn"

    def __init__(self, model, acq: AcqSpec = AcqSpec(), style=None, chunk: int = 2048):
        self.model = model
        self.acq = acq
        self.style = style
        self.chunk = chunk

    def score(self, X, y, rng=None) -> Callable:
        return pfn_score(self.model, X, y, self.acq.functional(float(np.max(y))), self.style, self.chunk)

    def fit_warp(self, X, y, rng) -> WarpParams:
        return fit_warp(self.model, X, y, style=self.style, rng=rng).params


class GpSurrogate:
    """Exact GP expected improvement; ``fit="map"`` refits hyperparameters each call."""

    name = "gp"

    def __init__(self, gp: GaussianProcess | None = None, fit: str = "fixed", kernel: str = "matern32",
                 hyperpriors: Hyperpriors = Hyperpriors(), restarts: int = 3):
        if fit not in ("fixed", "map"):
            raise ValueError(f"unknown fit mode {fit!r}")
        self.gp = gp or GaussianProcess()
        self.fit = fit
        self.kernel = kernel
        self.hyperpriors = hyperpriors
        self.restarts = restarts

    def score(self, X, y, rng=None) -> Callable:
        gp = self.gp
        if self.fit == "map" and len(y) >= 2:
            gp = fit_map(X, y, self.kernel, self.hyperpriors, restarts=self.restarts, rng=rng).gp
        post = condition(gp, X, y)
        f_star = float(np.max(y))

        def score(xq):
            mean, var = post.predict_torch(xq)
            return gaussian_ei_torch(mean, var, f_star)

        return score


class RandomSurrogate:
    """Fresh uniform scores on every call (zero gradient), i.e. random search."""

    name = "random"

    def score(self, X, y, rng=None) -> Callable:
        rng = rng if rng is not None else np.random.default_rng()
        return lambda xq: xq.sum(-1) * 0.0 + torch.as_tensor(rng.random(xq.shape[0]), dtype=xq.dtype)


# ---------------------------------------------------------------- initial designs


def initial_design(space: SearchSpace, kind="sobol", rng=None, n: int | None = None) -> np.ndarray:
    """Initial points in raw coordinates.

    ``kind`` is ``sobol`` (``n`` defaults to d scrambled Sobol points),
    ``init-min``/``min`` (lower corner), ``init-mid``/``mid`` (centre),
    ``random`` (n uniform points) or an explicit array of points.
    Pool spaces snap each point to its nearest unused pool member.
    """
    rng = rng or np.random.default_rng(0)
    d = space.d
    if not isinstance(kind, str):
        pts = np.atleast_2d(np.asarray(kind, dtype=float))
        return pts
    if kind == "sobol":
        n = n or d
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # non power-of-two sample sizes
            u = qmc.Sobol(d, scramble=True, seed=rng).random(n)
    elif kind in ("init-min", "min"):
        u = np.zeros((1, d))
    elif kind in ("init-mid", "mid"):
        u = np.full((1, d), 0.5)
    elif kind == "random":
        u = rng.random((n or 1, d))
    else:
        raise ValueError(f"unknown initial design {kind!r}")
    if space.pool is not None:
        pool_u = space.to_unit(space.pool)
        if kind == "random":
            idx = rng.choice(len(pool_u), size=min(len(u), len(pool_u)), replace=False)
            return space.pool[idx].copy()
        used: list[int] = []
        for p in u:
            dist = ((pool_u - p) ** 2).sum(1)
            dist[used] = np.inf
            used.append(int(np.argmin(dist)))
        return space.pool[used].copy()
    return space.from_unit(u)


# ---------------------------------------------------------------- trajectory


@dataclass
class Step:
    iteration: int
    x: np.ndarray
    y: float
    y_transformed: float
    incumbent: float
    acquisition: str = "init"
    status: str = "ok"


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    seed: int | None = None
    config_hash: str = ""
    model_version: str = ""
    status: str = "complete"
    meta: dict = field(default_factory=dict)

    @property
    def ok_steps(self) -> list:
        return [s for s in self.steps if s.status == "ok"]

    @property
    def X(self) -> np.ndarray:
        return np.array([s.x for s in self.ok_steps])

    @property
    def y(self) -> np.ndarray:
        return np.array([s.y for s in self.ok_steps])

    @property
    def incumbents(self) -> np.ndarray:
        return np.array([s.incumbent for s in self.ok_steps])

    @property
    def best_x(self) -> np.ndarray:
        return self.X[int(np.argmax(self.y))]

    def to_csv(self, path) -> None:
        path = Path(path)
        d = len(self.steps[0].x) if self.steps else self.meta.get("d", 0)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + [f"x_{i}" for i in range(d)] + ["y_raw", "incumbent", "y_transformed", "acquisition", "status"])
            for s in self.steps:
                w.writerow([s.iteration] + [repr(float(v)) for v in s.x] + [repr(float(s.y)), repr(float(s.incumbent)),
                           repr(float(s.y_transformed)), s.acquisition, s.status])
        sidecar = {"seed": self.seed, "config_hash": self.config_hash, "model_version": self.model_version,
                   "status": self.status, "meta": self.meta}
        path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        d = sum(h.startswith("x_") for h in header)
        steps = [
            Step(int(r[0]), np.array([float(v) for v in r[1 : 1 + d]]), float(r[1 + d]), float(r[3 + d]),
                 float(r[2 + d]), r[4 + d], r[5 + d])
            for r in rows[1:]
        ]
        side = json.loads(path.with_suffix(".json").read_text())
        return cls(steps, side["seed"], side["config_hash"], side["model_version"], side["status"], side["meta"])


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- loop


def _evaluate(objective, x):
    try:
        y = float(objective(x))
    except Exception as exc:  # objective code is user code; any failure is recorded
        logger.warning("objective failed at %s: %s", x, exc)
        return None
    return y if math.isfinite(y) else None


def run_bo(
    objective: Callable,
    surrogate,
    space: SearchSpace,
    budget: int,
    init="sobol",
    rng: np.random.Generator | None = None,
    power_transform: bool = True,
    warp: bool = False,
    warp_every: int = 5,
    n_candidates: int = 10_000,
    top_k: int = 100,
    maxiter: int = 30,
    seed: int | None = None,
    config: dict | None = None,
) -> Trajectory:
    """Maximise ``objective`` over ``space`` with ``budget`` proposals after the initial design."""
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    if rng is None:
        rng = np.random.default_rng(seed)
    design_rng, loop_rng = rng.spawn(2)
    model = getattr(surrogate, "model", None)
    traj = Trajectory(
        seed=seed,
        config_hash=config_hash(config or {}),
        model_version="" if model is None else f"v{model.VERSION}/steps{model.steps_trained}",
        meta={"d": space.d, "budget": budget},
    )
    X_unit: list[np.ndarray] = []
    ys: list[float] = []
    seen_unit: list[np.ndarray] = []
    incumbent = -math.inf

    def record(x_raw, u, y, acq, it):
        nonlocal incumbent
        seen_unit.append(u)
        if y is None:
            traj.steps.append(Step(it, x_raw, math.nan, math.nan, incumbent, acq, "failed"))
            return False
        X_unit.append(u)
        ys.append(y)
        incumbent = max(incumbent, y)
        yt = fit_output_transform(ys).apply(np.array([y]))[0] if power_transform else y
        traj.steps.append(Step(it, x_raw, y, float(yt), incumbent, acq))
        return True

    for x in initial_design(space, init, design_rng):
        record(x, space.to_unit(x), _evaluate(objective, x), "init", 0)
    if not ys:
        traj.status = "aborted"
        return traj

    warp_params = None
    for it in range(1, budget + 1):
        y_arr = np.asarray(ys)
        y_model = fit_output_transform(y_arr).apply(y_arr) if power_transform else y_arr
        Xu = np.asarray(X_unit)
        if warp and hasattr(surrogate, "fit_warp") and (warp_params is None or (it - 1) % warp_every == 0):
            warp_params = surrogate.fit_warp(Xu, y_model, loop_rng)
        X_model = Xu if warp_params is None else warp_params.apply(Xu)
        score = surrogate.score(X_model, y_model, loop_rng)
        acq_name = getattr(surrogate, "last_choice", surrogate.name)
        ok = False
        for _attempt in range(2):
            try:
                prop = propose(score, space, np.asarray(seen_unit), loop_rng, n_candidates, top_k, maxiter, warp_params)
            except ExhaustedSpaceError:
                traj.status = "exhausted"
                return traj
            x_raw = space.pool[prop.pool_index].copy() if prop.pool_index is not None else space.from_unit(prop.x_unit)
            if record(x_raw, prop.x_unit, _evaluate(objective, x_raw), acq_name, it):
                ok = True
                break
        if not ok:
            traj.status = "aborted"
            return traj
    return traj
