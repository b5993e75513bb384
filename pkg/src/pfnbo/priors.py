"""Synthetic dataset priors used to generate the network's training stream.

Every prior exposes ``sample_y(X, rng, relevant=None, info=None)`` where ``X``
has shape ``(B, n, d)`` and ``relevant`` is a ``(B, d)`` boolean mask of the
columns the generating function may depend on.  Wrappers (spurious columns,
input warping) and the variable-dimension batch builder are all expressed
through that mask, so irrelevant columns can never leak into ``y``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gp import Hyperpriors, robust_cholesky
from .transforms import kumaraswamy

SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0] or y.size < 1:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.size} entries")
        if np.any((X < 0) | (X > 1)):
            raise ValueError("dataset features must lie in [0, 1]")
        if not np.all(np.isfinite(y)):
            raise ValueError("dataset outputs must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i}" for i in range(self.d)] + ["y"])
            for row, yv in zip(self.X, self.y):
                w.writerow([repr(float(v)) for v in row] + [repr(float(yv))])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :-1], data[:, -1])


def _relevant_or_all(X, relevant):
    if relevant is None:
        return np.ones((X.shape[0], X.shape[2]), dtype=bool)
    return np.asarray(relevant, dtype=bool)


# ---------------------------------------------------------------- GP priors


@dataclass(frozen=True)
class GpPrior:
    """Zero-mean GP prior.

    With ``hyperpriors=None`` the kernel hyperparameters are the fixed values
    given here; otherwise outputscale, ARD lengthscales and noise are drawn
    per dataset.  ``noise`` is a variance.
    """

    kernel: str = "rbf"
    lengthscale: float = 0.2
    outputscale: float = 1.0
    noise: float = 1e-4
    hyperpriors: Hyperpriors | None = None

    def __post_init__(self):
        if self.kernel not in ("rbf", "matern32"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.hyperpriors is None and (self.lengthscale <= 0 or self.outputscale <= 0 or self.noise < 0):
            raise ValueError("GP scales must be positive")

    @classmethod
    def simple(cls, lengthscale=0.2, outputscale=1.0, noise=1e-4) -> "GpPrior":
        return cls("rbf", lengthscale, outputscale, noise)

    @classmethod
    def hebo(cls, hyperpriors: Hyperpriors = Hyperpriors()) -> "GpPrior":
        return cls("matern32", hyperpriors=hyperpriors)

    def sample_hyperparameters(self, batch: int, d: int, rng: np.random.Generator):
        if self.hyperpriors is None:
            return (
                np.full(batch, float(self.outputscale)),
                np.full((batch, d), float(self.lengthscale)),
                np.full(batch, float(self.noise)),
            )
        hp = self.hyperpriors
        outputscale = rng.gamma(hp.outputscale[0], 1.0 / hp.outputscale[1], size=batch)
        lengthscale = rng.gamma(hp.lengthscale[0], 1.0 / hp.lengthscale[1], size=(batch, d))
        noise = np.exp(rng.normal(hp.log_noise[0], hp.log_noise[1], size=batch))
        return outputscale, lengthscale, noise

    def covariance(self, X, outputscale, lengthscale, relevant):
        # irrelevant columns get an inverse lengthscale of exactly zero
        inv_ls = np.where(relevant, 1.0 / lengthscale, 0.0)
        A = X * inv_ls[:, None, :]
        d2 = ((A[:, :, None, :] - A[:, None, :, :]) ** 2).sum(-1)
        if self.kernel == "rbf":
            K = np.exp(-0.5 * d2)
        else:
            r = np.sqrt(d2)
            K = (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)
        return outputscale[:, None, None] * K

    def sample_y(self, X, rng, relevant=None, info=None):
        X = np.asarray(X, dtype=float)
        B, n, d = X.shape
        relevant = _relevant_or_all(X, relevant)
        outputscale, lengthscale, noise = self.sample_hyperparameters(B, d, rng)
        K = self.covariance(X, outputscale, lengthscale, relevant)
        K = K + noise[:, None, None] * np.eye(n)
        L = robust_cholesky(K)
        y = (L @ rng.standard_normal((B, n, 1)))[..., 0]
        if info is not None:
            info.update(outputscale=outputscale, lengthscale=lengthscale, noise=noise)
        return y


# ---------------------------------------------------------------- BNN prior


def dropout_rescale(zero_prob: float) -> float:
    return 1.0 / math.sqrt(1.0 - zero_prob)


@dataclass(frozen=True)
class BnnPrior:
    """Random tanh MLPs without biases.

    Architecture and noise levels are drawn once per group of ``group_size``
    datasets; weights are drawn per dataset.  Inputs are warped per feature
    with a random Kumaraswamy CDF first (``warp_std=(0, 0)`` disables it).
    """

    layers: tuple = (8, 15)
    hidden: tuple = (36, 150)
    weight_std: tuple = (0.089, 0.193)
    zero_prob: float = 0.145
    preact_noise: tuple = (0.0003, 0.0014)
    output_noise: tuple = (0.0004, 0.0013)
    warp_std: tuple = (0.976, 0.8003)
    group_size: int = 16

    def __post_init__(self):
        if not 0 <= self.zero_prob < 1:
            raise ValueError("zero_prob must be in [0, 1)")

    def sample_architecture(self, rng):
        return dict(
            layers=int(rng.integers(self.layers[0], self.layers[1] + 1)),
            hidden=int(rng.integers(self.hidden[0], self.hidden[1] + 1)),
            weight_std=float(rng.uniform(*self.weight_std)),
            preact_noise=float(rng.uniform(*self.preact_noise)),
            output_noise=float(rng.uniform(*self.output_noise)),
        )

    def sample_weights(self, shape, std, rng):
        w = rng.normal(0.0, std, size=shape)
        keep = rng.random(shape) >= self.zero_prob
        return np.where(keep, w * dropout_rescale(self.zero_prob), 0.0)

    def network(self, X, arch, rng):
        """Evaluate freshly drawn networks of one architecture on ``X`` (G, n, d)."""
        G, n, d = X.shape
        h = arch["hidden"]
        std = arch["weight_std"]
        a = X
        fan_in = d
        for _ in range(arch["layers"]):
            W = self.sample_weights((G, fan_in, h), std, rng)
            a = np.tanh(a @ W + arch["preact_noise"] * rng.standard_normal((G, n, h)))
            fan_in = h
        W = self.sample_weights((G, fan_in, 1), std, rng)
        return (a @ W)[..., 0]

    def sample_y(self, X, rng, relevant=None, info=None):
        X = np.asarray(X, dtype=float)
        B, n, d = X.shape
        relevant = _relevant_or_all(X, relevant)
        if self.warp_std[0] > 0 or self.warp_std[1] > 0:
            X, _, _ = apply_prior_warp(X, self.warp_std[0], self.warp_std[1], rng)
        X = X * relevant[:, None, :]
        y = np.empty((B, n))
        archs = []
        for start in range(0, B, self.group_size):
            sl = slice(start, min(start + self.group_size, B))
            arch = self.sample_architecture(rng)
            g = sl.stop - sl.start
            y[sl] = self.network(X[sl], arch, rng) + arch["output_noise"] * rng.standard_normal((g, n))
            archs.append(arch)
        if info is not None:
            info["architectures"] = archs
        return y


# ---------------------------------------------------------------- wrappers


def apply_prior_warp(X, c1_std: float, c2_std: float, rng):
    """Per (dataset, feature) Kumaraswamy warp with log a ~ N(0, c1), log b ~ N(0, c2).

    Returns ``(X_warped, a, b)`` where ``a`` and ``b`` have shape ``(B, d)``.
    """
    X = np.asarray(X, dtype=float)
    B, _, d = X.shape
    a = np.exp(rng.normal(0.0, c1_std, size=(B, d)))
    b = np.exp(rng.normal(0.0, c2_std, size=(B, d)))
    return kumaraswamy(X, a[:, None, :], b[:, None, :]), a, b


@dataclass(frozen=True)
class InputWarp:
    base: object
    c1_std: float = 0.976
    c2_std: float = 0.8003

    def sample_y(self, X, rng, relevant=None, info=None):
        Xw, a, b = apply_prior_warp(X, self.c1_std, self.c2_std, rng)
        if info is not None:
            info.update(warp_a=a, warp_b=b)
        return self.base.sample_y(Xw, rng, relevant, info)


def spurious_mask(relevant, fraction: float, rng):
    """Pick ``floor(fraction * d)`` (randomised rounding) of each row's relevant columns."""
    relevant = np.asarray(relevant, dtype=bool)
    B, K = relevant.shape
    d = relevant.sum(1)
    count = np.floor(fraction * d + rng.random(B)).astype(int)
    # random priority per column; the `count` smallest among relevant ones are spurious
    keys = np.where(relevant, rng.random((B, K)), np.inf)
    order = np.argsort(keys, axis=1)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(K)[None, :].repeat(B, 0), axis=1)
    return relevant & (ranks < count[:, None])


@dataclass(frozen=True)
class SpuriousDims:
    base: object
    fraction: float = 0.3

    def __post_init__(self):
        if not 0 <= self.fraction < 1:
            raise ValueError("spurious fraction must be in [0, 1)")

    def sample_y(self, X, rng, relevant=None, info=None):
        relevant = _relevant_or_all(np.asarray(X), relevant)
        if self.fraction == 0:
            return self.base.sample_y(X, rng, relevant, info)
        spurious = spurious_mask(relevant, self.fraction, rng)
        if info is not None:
            info["spurious"] = spurious
        return self.base.sample_y(X, rng, relevant & ~spurious, info)


def add_spurious_dims(prior, fraction: float):
    return prior if fraction == 0 else SpuriousDims(prior, fraction)


def sample_datasets(prior, batch: int, n: int, d: int, rng, X=None, info=None):
    """Draw ``batch`` datasets of ``n`` uniform points in ``[0,1]^d``.

    X and the function draw use separate child streams of ``rng``, so passing
    a modified ``X`` (e.g. with different spurious columns) leaves every other
    random choice unchanged.
    """
    x_rng, f_rng = rng.spawn(2)
    if X is None:
        X = x_rng.random((batch, n, d))
    y = prior.sample_y(X, f_rng, None, info)
    return X, y


def sample_dataset(prior, n: int, d: int, rng) -> Dataset:
    X, y = sample_datasets(prior, 1, n, d, rng)
    return Dataset(X[0], y[0])


def sample_simple_gp(n, d, rng, lengthscale=0.2, outputscale=1.0, noise=1e-4) -> Dataset:
    return sample_dataset(GpPrior.simple(lengthscale, outputscale, noise), n, d, rng)


def sample_hebo_prior(n, d, rng, hyperpriors: Hyperpriors = Hyperpriors()) -> Dataset:
    return sample_dataset(GpPrior.hebo(hyperpriors), n, d, rng)


def sample_bnn_prior(n, d, rng, cfg: BnnPrior = BnnPrior()) -> Dataset:
    return sample_dataset(cfg, n, d, rng)


# ---------------------------------------------------------------- user priors

MAX_K = 5
INTERVALS = tuple((i / k, (i + 1) / k) for k in range(1, MAX_K + 1) for i in range(k))


@dataclass(frozen=True)
class UserPriorSpec:
    """Per-dimension interval ``[lo, hi]`` and confidence ``rho``.

    ``[0, 1]`` with ``rho = 0`` is the "no prior" sentinel.
    """

    lo: np.ndarray
    hi: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        lo, hi, rho = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (self.lo, self.hi, self.rho))
        lo, hi, rho = np.broadcast_arrays(lo, hi, rho)
        if np.any(lo < 0) or np.any(hi > 1) or np.any(lo >= hi):
            raise ValueError("user-prior intervals must satisfy 0 <= lo < hi <= 1")
        if np.any((rho < 0) | (rho > 1)):
            raise ValueError("rho must be in [0, 1]")
        object.__setattr__(self, "lo", lo.copy())
        object.__setattr__(self, "hi", hi.copy())
        object.__setattr__(self, "rho", rho.copy())

    @classmethod
    def none(cls, d: int) -> "UserPriorSpec":
        return cls(np.zeros(d), np.ones(d), np.zeros(d))

    @property
    def d(self) -> int:
        return self.lo.size

    def encode(self, capacity: int | None = None) -> np.ndarray:
        """``(capacity, 3)`` array of (lo, hi, rho); extra rows are sentinels."""
        capacity = capacity or self.d
        if self.d > capacity:
            raise ValueError(f"user prior has {self.d} dims, capacity is {capacity}")
        out = np.tile([0.0, 1.0, 0.0], (capacity, 1))
        out[: self.d] = np.stack([self.lo, self.hi, self.rho], axis=1)
        return out

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x >= self.lo) & (x <= self.hi)


def sample_intervals(m, rng, rho=None):
    """Intervals for optimum coordinates ``m`` (any shape) under the mixture scheme.

    Granularity ``k`` is uniform on 1..5.  With probability ``rho`` the interval
    of that granularity containing ``m`` is used, otherwise a uniformly chosen
    one.  A uniformly placed ``m`` lands in any fixed interval of width 1/k with
    probability 1/k, which is what makes the emitted intervals satisfy
    ``p(I | rho, m) = rho [m in I] + (1 - rho) p(I)``.
    The last axis of ``m`` indexes dimensions of one dataset; when ``rho`` is
    not given it is drawn once per dataset and shared by its dimensions.
    Returns ``(lo, hi, rho)`` arrays shaped like ``m``.
    """
    m = np.asarray(m, dtype=float)
    if rho is None:
        rho = rng.random(m.shape[:-1] + (1,) if m.ndim else ())
    rho = np.broadcast_to(np.asarray(rho, dtype=float), m.shape)
    k = rng.integers(1, MAX_K + 1, size=m.shape)
    informative = rng.random(m.shape) < rho
    i_true = np.clip(np.floor(m * k), 0, k - 1)
    i_rand = np.floor(rng.random(m.shape) * k)
    i = np.where(informative, i_true, i_rand)
    return i / k, (i + 1) / k, rho.copy()


def sample_user_prior_task(prior, n: int, d: int, rng, rho=None):
    """A dataset from ``prior`` and a user prior about its best observed point."""
    data_rng, int_rng = rng.spawn(2)
    ds = sample_dataset(prior, n, d, data_rng)
    m = ds.X[int(np.argmax(ds.y))]
    lo, hi, r = sample_intervals(m, int_rng, rho)
    return ds, UserPriorSpec(lo, hi, r)


# ---------------------------------------------------------------- training batches


@dataclass(frozen=True)
class PriorConfig:
    """Prior selection plus extensions for training-batch generation."""

    kind: str = "gp"  # gp | hebo | bnn
    lengthscale: float = 0.2
    outputscale: float = 1.0
    noise: float = 1e-4
    hyperpriors: Hyperpriors = field(default_factory=Hyperpriors)
    bnn: BnnPrior = field(default_factory=BnnPrior)
    spurious_fraction: float = 0.0
    input_warp: bool = False
    warp_std: tuple = (0.976, 0.8003)
    user_prior: bool = False
    min_dims: int = 1
    max_dims: int = 18
    capacity: int = 18
    seq_len: int = 60

    def __post_init__(self):
        if self.kind not in ("gp", "hebo", "bnn"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not 1 <= self.min_dims <= self.max_dims <= self.capacity:
            raise ValueError("need 1 <= min_dims <= max_dims <= capacity")
        if self.seq_len < 2:
            raise ValueError("seq_len must be at least 2")

    def build(self):
        if self.kind == "gp":
            prior = GpPrior.simple(self.lengthscale, self.outputscale, self.noise)
        elif self.kind == "hebo":
            prior = GpPrior.hebo(self.hyperpriors)
        else:
            prior = self.bnn
        if self.input_warp and self.kind != "bnn":
            prior = InputWarp(prior, *self.warp_std)
        return add_spurious_dims(prior, self.spurious_fraction)


@dataclass
class Batch:
    """Datasets sharing one length and one train/test split.

    ``X`` is already padded to the capacity and scaled by ``K/d``.
    ``style`` holds encoded user priors ``(B, K, 3)`` when enabled.
    ``query_X``/``targets`` replace ``X[:, split:]``/``y[:, split:]`` when a
    stage trains on something other than the held-out outputs.
    """

    X: np.ndarray
    y: np.ndarray
    dims: np.ndarray
    split: int
    style: np.ndarray | None = None
    info: dict = field(default_factory=dict)
    query_X: np.ndarray | None = None
    targets: np.ndarray | None = None

    @property
    def queries(self) -> np.ndarray:
        return self.X[:, self.split :] if self.query_X is None else self.query_X

    @property
    def query_targets(self) -> np.ndarray:
        return self.y[:, self.split :] if self.targets is None else self.targets

    @property
    def batch_size(self) -> int:
        return self.y.shape[0]


def pad_and_scale(X, d, capacity: int):
    """Zero-pad features to ``capacity`` columns and scale by ``capacity / d``.

    ``X`` is ``(..., n, d)`` with one ``d`` for all, or already ``capacity`` wide
    with per-dataset ``d`` (columns beyond ``d`` are zeroed).
    """
    X = np.asarray(X, dtype=float)
    d = np.asarray(d)
    if np.any(d > capacity) or X.shape[-1] > capacity:
        raise ValueError(f"feature dimension exceeds model capacity {capacity}")
    if X.shape[-1] < capacity:
        pad = [(0, 0)] * (X.ndim - 1) + [(0, capacity - X.shape[-1])]
        X = np.pad(X, pad)
    active = np.arange(capacity) < d[..., None]
    scale = (capacity / d)[..., None]
    if d.ndim:
        active = active[:, None, :]
        scale = scale[:, None, :]
    return np.where(active, X * scale, 0.0)


def scale_user_prior(style, d, capacity: int):
    """Put encoded intervals ``(..., capacity, 3)`` into the network's ``K/d``-scaled feature coordinates."""
    style = np.array(style, dtype=float)
    d = np.asarray(d)
    active = np.arange(capacity) < d[..., None]
    scale = np.where(active, capacity / d[..., None], 1.0)
    style[..., 0] *= scale
    style[..., 1] *= scale
    return style


def sample_training_batch(cfg: PriorConfig, batch_size: int, rng, split: int | None = None) -> Batch:
    x_rng, d_rng, f_rng, s_rng = rng.spawn(4)
    K = cfg.capacity
    n = cfg.seq_len
    dims = d_rng.integers(cfg.min_dims, cfg.max_dims + 1, size=batch_size)
    if split is None:
        split = int(s_rng.integers(1, n))
    relevant = np.arange(K)[None, :] < dims[:, None]
    X = x_rng.random((batch_size, n, K)) * relevant[:, None, :]
    info: dict = {}
    y = cfg.build().sample_y(X, f_rng, relevant, info)
    style = None
    if cfg.user_prior:
        # the optimum is approximated by the best of all n points, held-out ones included
        best = np.argmax(y, axis=1)
        m = X[np.arange(batch_size), best]
        lo, hi, rho = sample_intervals(m, s_rng)
        style = np.stack([lo, hi, rho], axis=-1)
        style[~relevant] = (0.0, 1.0, 0.0)
        style = scale_user_prior(style, dims, K)
    return Batch(pad_and_scale(X, dims, K), y, dims, split, style, info)
