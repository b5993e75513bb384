"""Acquisition maximisation: random search, then L-BFGS-B on the best candidates.

The optimiser works on a differentiable ``score(x) -> values`` over points in
the model's input space, so it serves the network and the exact-GP oracle
alike.  Points are handled in three coordinate systems: raw (the user's
space), unit (min/max scaled) and model space (unit after an optional input
warp); refinement runs in model space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy import optimize

from .riemann import RiemannDistribution, acq_ei, acq_on_mean, acq_pi, acq_ucb
from .transforms import WarpParams, from_unit_cube, to_unit_cube

logger = logging.getLogger(__name__)


class ExhaustedSpaceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dimension:
    kind: str = "continuous"  # continuous | integer | boolean
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("continuous", "integer", "boolean"):
            raise ValueError(f"unknown dimension kind {self.kind!r}")
        if self.kind == "boolean" and (self.lo, self.hi) != (0.0, 1.0):
            object.__setattr__(self, "lo", 0.0)
            object.__setattr__(self, "hi", 1.0)
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def is_integer(self) -> bool:
        return self.kind != "continuous"


@dataclass(frozen=True, eq=False)
class SearchSpace:
    dims: tuple
    pool: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if self.pool is not None:
            pool = np.atleast_2d(np.asarray(self.pool, dtype=float))
            if pool.shape[0] == 0 or pool.shape[1] != len(self.dims):
                raise ValueError("pool must be a nonempty (P, d) array")
            object.__setattr__(self, "pool", pool)

    @classmethod
    def box(cls, lower, upper) -> "SearchSpace":
        return cls(tuple(Dimension("continuous", float(a), float(b)) for a, b in zip(lower, upper)))

    @classmethod
    def unit(cls, d: int) -> "SearchSpace":
        return cls.box(np.zeros(d), np.ones(d))

    @classmethod
    def from_pool(cls, pool) -> "SearchSpace":
        pool = np.atleast_2d(np.asarray(pool, dtype=float))
        lo, hi = pool.min(0), pool.max(0)
        hi = np.where(hi > lo, hi, lo + 1.0)
        return cls(tuple(Dimension("continuous", a, b) for a, b in zip(lo, hi)), pool)

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def lower(self) -> np.ndarray:
        return np.array([dim.lo for dim in self.dims])

    @property
    def upper(self) -> np.ndarray:
        return np.array([dim.hi for dim in self.dims])

    @property
    def integer_mask(self) -> np.ndarray:
        return np.array([dim.is_integer for dim in self.dims])

    def to_unit(self, x) -> np.ndarray:
        return to_unit_cube(self.lower, self.upper, x)

    def from_unit(self, u) -> np.ndarray:
        x = np.clip(from_unit_cube(self.lower, self.upper, u), self.lower, self.upper)
        ints = self.integer_mask
        if ints.any():
            # proposals sit on the integer lattice; this only removes float error
            x[..., ints] = np.round(x[..., ints])
        return x

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        ok = np.all((x >= self.lower) & (x <= self.upper))
        ints = self.integer_mask
        return bool(ok and np.all(x[ints] == np.round(x[ints])))


def probabilistic_round(x, rng) -> np.ndarray:
    """Round up with probability equal to the fractional part."""
    x = np.asarray(x, dtype=float)
    lo = np.floor(x)
    return lo + (rng.random(x.shape) < (x - lo))


# ---------------------------------------------------------------- acquisitions


@dataclass(frozen=True)
class AcqSpec:
    kind: str = "ei"  # ei | pi | ucb | ei-mean | pi-mean
    quantile: float = 0.95

    def __post_init__(self):
        if self.kind not in ("ei", "pi", "ucb", "ei-mean", "pi-mean"):
            raise ValueError(f"unknown acquisition {self.kind!r}")

    def functional(self, f_star: float) -> Callable[[RiemannDistribution], torch.Tensor]:
        if self.kind == "ei":
            return lambda dist: acq_ei(dist, f_star)
        if self.kind == "pi":
            return lambda dist: acq_pi(dist, f_star)
        if self.kind == "ucb":
            return lambda dist: acq_ucb(dist, self.quantile)
        base = self.kind.split("-")[0]
        return lambda dist: acq_on_mean(dist, f_star, base)


def pfn_score(model, X, y, functional, style=None, chunk: int = 2048) -> Callable:
    """Differentiable score over model-space query points ``(m, d)``."""
    Xt = torch.as_tensor(np.asarray(X, dtype=float))[None]
    yt = torch.as_tensor(np.asarray(y, dtype=float))[None]

    def score(xq: torch.Tensor) -> torch.Tensor:
        outs = []
        for start in range(0, xq.shape[0], chunk):
            dist = model.predict_batch(Xt, yt, xq[None, start : start + chunk], style)
            outs.append(functional(dist)[0])
        return torch.cat(outs)

    return score


# ---------------------------------------------------------------- proposal


@dataclass
class Proposal:
    x_unit: np.ndarray
    value: float
    pool_index: int | None = None
    refined_gain: float = 0.0


def _row_keys(X) -> set:
    return {np.asarray(r, dtype=float).tobytes() for r in np.atleast_2d(X)}


def refine(score: Callable, starts: np.ndarray, maxiter: int = 30, gtol: float = 1e-6):
    """Joint L-BFGS-B on the summed score of independent candidates in ``[0,1]^d``.

    Candidates do not interact (the score is evaluated per query), so the sum's
    gradient block for each candidate is that candidate's own gradient.
    Returns ``(points, values)`` keeping, per candidate, the better of start
    and refined point.
    """
    starts = np.asarray(starts, dtype=float)
    k, d = starts.shape
    with torch.no_grad():
        v0 = score(torch.as_tensor(starts)).numpy()

    def fun(flat):
        x = torch.tensor(flat.reshape(k, d), requires_grad=True)
        vals = score(x)
        total = vals.sum()
        total.backward()
        return -total.item(), -x.grad.numpy().ravel()

    res = optimize.minimize(
        fun, starts.ravel(), jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * (k * d),
        options={"maxiter": maxiter, "gtol": gtol},
    )
    cand = np.clip(res.x.reshape(k, d), 0.0, 1.0)
    with torch.no_grad():
        v1 = score(torch.as_tensor(cand)).numpy()
    better = v1 > v0
    return np.where(better[:, None], cand, starts), np.where(better, v1, v0)


def propose(
    score: Callable,
    space: SearchSpace,
    X_unit,
    rng: np.random.Generator,
    n_candidates: int = 10_000,
    top_k: int = 100,
    maxiter: int = 30,
    warp: WarpParams | None = None,
) -> Proposal:
    """Next point to evaluate, in unit coordinates.

    ``score`` takes model-space points; ``X_unit`` are the evaluated points.
    In pool mode the unevaluated pool is scored exhaustively.
    """
    X_unit = np.atleast_2d(np.asarray(X_unit, dtype=float)).reshape(-1, space.d)
    to_model = (lambda u: u) if warp is None else warp.apply
    from_model = (lambda w: w) if warp is None else warp.invert
    seen = _row_keys(X_unit)

    if space.pool is not None:
        pool_unit = space.to_unit(space.pool)
        free = np.array([r.tobytes() not in seen for r in pool_unit])
        if not free.any():
            raise ExhaustedSpaceError("every pool point has been evaluated")
        idx = np.flatnonzero(free)
        with torch.no_grad():
            vals = score(torch.as_tensor(to_model(pool_unit[idx]))).numpy()
        best = idx[int(np.argmax(vals))]
        return Proposal(pool_unit[best], float(vals.max()), int(best))

    cands = np.vstack([rng.random((n_candidates, space.d)), X_unit])
    w = to_model(cands)
    with torch.no_grad():
        vals = score(torch.as_tensor(w)).numpy()
    top = np.argsort(-vals, kind="stable")[:top_k]
    refined, rvals = refine(score, w[top], maxiter=maxiter)
    gain = float(np.max(rvals - vals[top]))
    order = np.argsort(-rvals, kind="stable")
    ints = space.integer_mask
    for j in order:
        u = np.clip(from_model(refined[j]), 0.0, 1.0)
        if ints.any():
            raw = space.from_unit(u)
            raw[ints] = np.clip(probabilistic_round(raw[ints], rng), space.lower[ints], space.upper[ints])
            u = space.to_unit(raw)
        if u.tobytes() not in seen:
            return Proposal(u, float(rvals[j]), None, gain)
    # every refined candidate collided with history: fall back to fresh random points
    for u in rng.random((1000, space.d)):
        if ints.any():
            raw = space.from_unit(u)
            raw[ints] = np.clip(probabilistic_round(raw[ints], rng), space.lower[ints], space.upper[ints])
            u = space.to_unit(raw)
        if u.tobytes() not in seen:
            with torch.no_grad():
                val = float(score(torch.as_tensor(to_model(u[None]))).numpy()[0])
            return Proposal(u, val, None, 0.0)
    raise ExhaustedSpaceError("could not find an unevaluated point")
