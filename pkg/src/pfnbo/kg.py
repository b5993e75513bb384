"""Learned one-step knowledge gradient.

One network with a three-way style token serves three heads:

* ``ppd``  the ordinary predictive distribution p(y | x, D);
* ``mean`` the distribution of the predictive mean E[y | x, D] over x drawn
  uniformly from the cube (queries carry an all-zero x);
* ``kg``   the distribution of ``tau(D + {(x, y)})`` where y is the outcome
  at x and ``tau`` is the 0.999 quantile of the mean head.

The KG acquisition of x is the mean of the kg head minus ``tau(D)``.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.linalg import solve_triangular

from . import pfn
from .acqopt import AcqSpec, pfn_score
from .gp import GaussianProcess, condition
from .priors import Batch
from .riemann import RiemannDistribution

logger = logging.getLogger(__name__)

TAU_QUANTILE = 0.999


def mode_style(mode: str, batch: int | None = None) -> np.ndarray:
    onehot = np.zeros(len(pfn.STYLE_MODES))
    onehot[pfn.STYLE_MODES.index(mode)] = 1.0
    return onehot if batch is None else np.tile(onehot, (batch, 1))


def tau_of(dist: RiemannDistribution) -> torch.Tensor:
    return dist.icdf(TAU_QUANTILE)


def mean_distribution(model: pfn.PfnModel, X, y) -> RiemannDistribution:
    """q_mu(. | D) for one dataset."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return model.predict(X, y, np.zeros((1, X.shape[1])), mode_style("mean"))[0]


def tau(model: pfn.PfnModel, X, y) -> float:
    return float(tau_of(mean_distribution(model, X, y)))


# ---------------------------------------------------------------- training targets


def _frozen(net: torch.nn.Module) -> torch.nn.Module:
    net = copy.deepcopy(net).eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


@torch.no_grad()
def mean_targets(model: pfn.PfnModel, net, batch: Batch, x_query: np.ndarray) -> np.ndarray:
    """Predictive means of ``net`` (ppd mode) at ``x_query`` given each training part."""
    s = batch.split
    B = batch.batch_size
    logits = net(
        torch.as_tensor(batch.X[:, :s], dtype=torch.float32),
        torch.as_tensor(batch.y[:, :s], dtype=torch.float32),
        torch.as_tensor(x_query, dtype=torch.float32),
        torch.as_tensor(mode_style("ppd", B), dtype=torch.float32),
    )
    return RiemannDistribution.from_logits(model.layout, logits.double()).mean().numpy()


@torch.no_grad()
def kg_targets(model: pfn.PfnModel, net, batch: Batch, n_targets: int) -> np.ndarray:
    """``y' = tau(D + {(x_j, y_j)})`` for the first ``n_targets`` held-out points."""
    s = batch.split
    B, n, K = batch.X.shape
    T = min(n_targets, n - s)
    ctx_X = np.repeat(batch.X[:, None, :s], T, axis=1)
    ctx_y = np.repeat(batch.y[:, None, :s], T, axis=1)
    new_X = batch.X[:, s : s + T, None, :]
    new_y = batch.y[:, s : s + T, None]
    Xa = np.concatenate([ctx_X, new_X], axis=2).reshape(B * T, s + 1, K)
    ya = np.concatenate([ctx_y, new_y], axis=2).reshape(B * T, s + 1)
    logits = net(
        torch.as_tensor(Xa, dtype=torch.float32),
        torch.as_tensor(ya, dtype=torch.float32),
        torch.zeros(B * T, 1, K),
        torch.as_tensor(mode_style("mean", B * T), dtype=torch.float32),
    )
    dist = RiemannDistribution.from_logits(model.layout, logits.double())
    return tau_of(dist).numpy().reshape(B, T)


@dataclass(frozen=True)
class KgTrainingConfig:
    ppd_steps: int = 4000
    mean_steps: int = 1500
    kg_steps: int = 3000
    mean_targets: int = 8
    kg_targets: int = 4
    # mode probabilities while training the later stages, to avoid forgetting
    mean_stage_mix: tuple = (0.3, 0.7)
    kg_stage_mix: tuple = (0.2, 0.2, 0.6)


def _ppd_batch(sample, b: int, rng) -> Batch:
    batch = sample(b, rng)
    batch.style = mode_style("ppd", b)
    return batch


def _mean_batch(sample, model, base_net, b, rng, n_targets) -> Batch:
    batch = sample(b, rng)
    K = model.cfg.capacity
    x_rng = rng.spawn(1)[0]
    raw = x_rng.random((b, n_targets, K))
    active = np.arange(K)[None, None, :] < batch.dims[:, None, None]
    xq = np.where(active, raw * (K / batch.dims)[:, None, None], 0.0)
    batch.targets = mean_targets(model, base_net, batch, xq)
    batch.query_X = np.zeros((b, n_targets, K))
    batch.style = mode_style("mean", b)
    return batch


def _kg_batch(sample, model, mean_net, b, rng, n_targets) -> Batch:
    batch = sample(b, rng)
    batch.targets = kg_targets(model, mean_net, batch, n_targets)
    batch.query_X = batch.X[:, batch.split : batch.split + batch.targets.shape[1]]
    batch.style = mode_style("kg", b)
    return batch


def train_mean_head(model, prior, cfg: pfn.PfnConfig, kcfg: KgTrainingConfig, rng, base_net=None):
    """Continue training ``model`` on a ppd/mean mixture; targets come from ``base_net``."""
    sample = pfn._sampler_from(prior)
    if base_net is None:
        base_net = _frozen(model.net)
    probs = np.asarray(kcfg.mean_stage_mix, dtype=float)

    def sampler(b, r):
        if r.random() < probs[0] / probs.sum():
            return _ppd_batch(sample, b, r)
        return _mean_batch(sample, model, base_net, b, r, kcfg.mean_targets)

    stage = pfn.PfnConfig(**{**pfn.asdict(cfg), "steps": kcfg.mean_steps})
    return pfn.train(sampler, stage, rng, model=model)


def train_kg_head(model, prior, cfg: pfn.PfnConfig, kcfg: KgTrainingConfig, rng, base_net):
    sample = pfn._sampler_from(prior)
    mean_net = _frozen(model.net)
    probs = np.asarray(kcfg.kg_stage_mix, dtype=float)
    probs = probs / probs.sum()

    def sampler(b, r):
        u = r.random()
        if u < probs[0]:
            return _ppd_batch(sample, b, r)
        if u < probs[0] + probs[1]:
            return _mean_batch(sample, model, base_net, b, r, kcfg.mean_targets)
        return _kg_batch(sample, model, mean_net, b, r, kcfg.kg_targets)

    stage = pfn.PfnConfig(**{**pfn.asdict(cfg), "steps": kcfg.kg_steps})
    return pfn.train(sampler, stage, rng, model=model)


def train_kg_model(prior, cfg: pfn.PfnConfig, kcfg: KgTrainingConfig, rng) -> pfn.PfnModel:
    """All three stages: ppd, then mean head, then kg head."""
    if cfg.style != "kg":
        raise ValueError("knowledge-gradient training needs style='kg'")
    sample = pfn._sampler_from(prior)
    r1, r2, r3 = rng.spawn(3)
    stage1 = pfn.PfnConfig(**{**pfn.asdict(cfg), "steps": kcfg.ppd_steps})
    model = pfn.train(lambda b, r: _ppd_batch(sample, b, r), stage1, r1)
    base_net = _frozen(model.net)
    model = train_mean_head(model, prior, cfg, kcfg, r2, base_net)
    model = train_kg_head(model, prior, cfg, kcfg, r3, base_net)
    model.meta["kg_stages"] = [kcfg.ppd_steps, kcfg.mean_steps, kcfg.kg_steps]
    return model


# ---------------------------------------------------------------- acquisition


def learned_kg(model, X, y, Xq) -> np.ndarray:
    """KG values ``E[y'] - tau(D)`` at each row of ``Xq``."""
    with torch.no_grad():
        return (model.predict(X, y, Xq, mode_style("kg")).mean() - tau(model, X, y)).numpy()


class KgSurrogate:
    name = "kg"

    def __init__(self, model, chunk: int = 2048):
        if model.cfg.style != "kg":
            raise ValueError("model has no kg style vocabulary")
        self.model = model
        self.chunk = chunk

    def score(self, X, y, rng=None):
        t = tau(self.model, X, y)
        mean = lambda dist: dist.mean() - t
        return pfn_score(self.model, X, y, mean, mode_style("kg"), self.chunk)


class EiKgSurrogate:
    """Coin flip per iteration between EI (ppd head) and learned KG."""

    name = "ei+kg"

    def __init__(self, model, p_kg: float = 0.5, seed: int = 0, chunk: int = 2048):
        if not 0 <= p_kg <= 1:
            raise ValueError("p_kg must be a probability")
        self.model = model
        self.p_kg = p_kg
        self.rng = np.random.default_rng(seed)
        self.choices: list[str] = []
        self.last_choice = None
        self._kg = KgSurrogate(model, chunk)
        self._ei = chunk

    def choose(self) -> str:
        self.last_choice = "kg" if self.rng.random() < self.p_kg else "ei"
        self.choices.append(self.last_choice)
        return self.last_choice

    def score(self, X, y, rng=None):
        if self.choose() == "kg":
            return self._kg.score(X, y, rng)
        return pfn_score(self.model, X, y, AcqSpec("ei").functional(float(np.max(y))), mode_style("ppd"), self._ei)


# ---------------------------------------------------------------- Monte-Carlo oracle


def mc_kg_oracle(gp: GaussianProcess, X, y, x, N: int, M: int, rng, locations=None):
    """Monte-Carlo knowledge gradient of ``x`` under an exact GP.

    The inner maximum runs over ``M`` uniform locations plus the observed
    points and ``x``, the same set before and after the fantasy update.
    Outcomes come in antithetic pairs; the maximum is convex in the outcome,
    so every pair average is at least the current best and the estimate is
    never negative.  Returns ``(estimate, standard_error)`` over the ``N // 2``
    pairs.
    """
    if N < 2:
        raise ValueError("need at least one antithetic pair (N >= 2)")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    loc_rng, y_rng = rng.spawn(2)
    if locations is None:
        locations = loc_rng.random((M, X.shape[1]))
    cand = np.vstack([locations, X, x])
    post = condition(gp, X, y)
    mean0, _ = post.predict(cand)
    best0 = mean0.max()
    mu_x, var_x = post.predict(x, include_noise=True)
    # the updated mean is linear in the fantasy outcome: mean0 + gain * (y_new - mu_x)
    v_c = solve_triangular(post.chol, gp.k(X, cand), lower=True)
    v_x = solve_triangular(post.chol, gp.k(X, x), lower=True)
    k_cx = gp.k(cand, x)[:, 0] - v_c.T @ v_x[:, 0]
    gain = k_cx / var_x[0]
    z = y_rng.standard_normal(N // 2)
    shift = np.sqrt(var_x[0]) * np.concatenate([z, -z])
    best1 = (mean0[None, :] + gain[None, :] * shift[:, None]).max(1)
    pairs = 0.5 * (best1[: N // 2] + best1[N // 2 :]) - best0
    se = pairs.std(ddof=1) / np.sqrt(pairs.size) if pairs.size > 1 else float("nan")
    return float(pairs.mean()), float(se)
