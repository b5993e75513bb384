"""Data transforms applied around the surrogate at inference time.

* Kumaraswamy-CDF input warping, fitted per feature by the re-evaluation
  likelihood of a trained model.
* Yeo-Johnson output power transform followed by standardisation.
* Affine maps between a box-bounded search space and the unit cube.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import optimize, stats

logger = logging.getLogger(__name__)


def kumaraswamy(x, a, b):
    """Kumaraswamy CDF ``1 - (1 - x**a)**b``; works on numpy arrays and tensors."""
    if isinstance(x, torch.Tensor):
        if torch.any((x < 0) | (x > 1)):
            raise ValueError("kumaraswamy warp is defined on [0, 1]")
        return 1.0 - (1.0 - x.clamp(0, 1) ** a) ** b
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise ValueError("kumaraswamy warp is defined on [0, 1]")
    with np.errstate(divide="ignore"):  # x == 1 gives log1p(-1) = -inf, and the result 1 is exact
        return -np.expm1(b * np.log1p(-(x**a)))


def kumaraswamy_inverse(w, a, b):
    if isinstance(w, torch.Tensor):
        return (1.0 - (1.0 - w) ** (1.0 / b)) ** (1.0 / a)
    w = np.asarray(w, dtype=float)
    if np.any((w < 0) | (w > 1)):
        raise ValueError("kumaraswamy warp is defined on [0, 1]")
    with np.errstate(divide="ignore"):
        return (-np.expm1(np.log1p(-w) / b)) ** (1.0 / a)


@dataclass(frozen=True)
class WarpParams:
    a: np.ndarray
    b: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "WarpParams":
        return cls(np.ones(d), np.ones(d))

    def apply(self, x):
        return kumaraswamy(x, self.a, self.b)

    def invert(self, w):
        return kumaraswamy_inverse(w, self.a, self.b)

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.a == 1) and np.all(self.b == 1))


@dataclass
class WarpFit:
    params: WarpParams
    objective: float
    identity_objective: float
    ok: bool = True


def warp_objective(model, X, y, log_a, log_b, style=None) -> torch.Tensor:
    """Sum of log q(y_i | w(x_i), D_w) where D_w is the warped dataset itself.

    ``log_a`` and ``log_b`` have shape ``(R, d)``; returns one value per row.
    """
    Xt = torch.as_tensor(X, dtype=log_a.dtype)
    yt = torch.as_tensor(y, dtype=log_a.dtype)
    a = torch.exp(log_a)[:, None, :]
    b = torch.exp(log_b)[:, None, :]
    # clamp keeps x**a differentiable at the cube's faces
    xw = 1.0 - (1.0 - Xt.clamp(1e-9, 1 - 1e-9)[None] ** a) ** b
    r = log_a.shape[0]
    dist = model.predict_batch(xw, yt.expand(r, -1), xw, style=style)
    return dist.log_prob(yt.expand(r, -1)).sum(-1)


def fit_warp(
    model,
    X,
    y,
    style=None,
    restarts: int = 10,
    steps: int = 50,
    bound: float = 4.0,
    lr: float = 0.1,
    rng: np.random.Generator | None = None,
) -> WarpFit:
    """Per-feature Kumaraswamy parameters maximising the re-evaluation likelihood.

    All restarts run as one batch through the model; restart 0 starts at the
    identity, so the returned objective is never below the identity's.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    rng = rng or np.random.default_rng(0)
    init = rng.uniform(-1.0, 1.0, size=(restarts, 2 * d))
    init[0] = 0.0
    params = torch.tensor(init, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([params], lr=lr)
    best_val = torch.full((restarts,), -math.inf, dtype=torch.float64)
    best_par = params.detach().clone()
    identity_val = None
    try:
        for step in range(steps + 1):
            val = warp_objective(model, X, y, params[:, :d], params[:, d:], style=style)
            with torch.no_grad():
                if identity_val is None:
                    identity_val = float(val[0])
                better = val > best_val
                best_val = torch.where(better, val.detach(), best_val)
                best_par[better] = params.detach()[better]
            if step == steps:
                break
            opt.zero_grad()
            (-val.sum()).backward()
            opt.step()
            with torch.no_grad():
                params.clamp_(-bound, bound)
    except (RuntimeError, ValueError) as exc:  # pragma: no cover - defensive
        logger.warning("warp fit failed (%s); using identity", exc)
        return WarpFit(WarpParams.identity(d), float("nan"), float("nan"), ok=False)
    if not torch.all(torch.isfinite(best_val)):
        logger.warning("non-finite warp objective; using identity")
        return WarpFit(WarpParams.identity(d), identity_val or float("nan"), identity_val or float("nan"), ok=False)
    k = int(torch.argmax(best_val))
    p = best_par[k].double().numpy()
    return WarpFit(WarpParams(np.exp(p[:d]), np.exp(p[d:])), float(best_val[k]), identity_val)


@dataclass(frozen=True)
class OutputTransform:
    """Yeo-Johnson power transform with standardisation.

    ``lmbda=None`` marks the identity transform used for constant data.
    """

    lmbda: float | None
    shift: float
    scale: float
    y_min: float
    y_max: float

    def apply(self, y):
        y = np.asarray(y, dtype=float)
        if self.lmbda is None:
            return y - self.shift
        return (stats.yeojohnson(y, self.lmbda) - self.shift) / self.scale

    def invert(self, t):
        t = np.asarray(t, dtype=float)
        if self.lmbda is None:
            return t + self.shift
        return _yeojohnson_inverse(t * self.scale + self.shift, self.lmbda)


def _yeojohnson_inverse(z, lmbda):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    if abs(lmbda) < 1e-12:
        out[pos] = np.expm1(z[pos])
    else:
        out[pos] = np.power(z[pos] * lmbda + 1, 1 / lmbda) - 1
    if abs(lmbda - 2) < 1e-12:
        out[~pos] = -np.expm1(-z[~pos])
    else:
        out[~pos] = 1 - np.power(-(2 - lmbda) * z[~pos] + 1, 1 / (2 - lmbda))
    return out


def fit_output_transform(y, lmbda_bounds=(-2.0, 2.0)) -> OutputTransform:
    y = np.asarray(y, dtype=float).ravel()
    y_min, y_max = float(y.min()), float(y.max())
    if np.unique(y).size < 2:
        return OutputTransform(None, 0.0, 1.0, y_min, y_max)
    # bounded Brent on the profile log-likelihood of lambda
    res = optimize.minimize_scalar(
        lambda lm: -stats.yeojohnson_llf(lm, y), bounds=lmbda_bounds, method="bounded", options={"xatol": 1e-6}
    )
    lmbda = float(res.x)
    z = stats.yeojohnson(y, lmbda)
    shift, scale = float(z.mean()), float(z.std())
    if not np.isfinite(scale) or scale <= 0:
        return OutputTransform(None, float(y.mean()), 1.0, y_min, y_max)
    return OutputTransform(lmbda, shift, scale, y_min, y_max)


def to_unit_cube(lower, upper, x):
    """Affine min/max map into ``[0, 1]^d``; zero-width dimensions map to 0.5."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.asarray(x, dtype=float)
    width = upper - lower
    degenerate = width <= 0
    if np.any(degenerate):
        logger.warning("degenerate search-space dimensions %s pinned to 0.5", np.flatnonzero(degenerate))
    safe = np.where(degenerate, 1.0, width)
    return np.where(degenerate, 0.5, (x - lower) / safe)


def from_unit_cube(lower, upper, u):
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return lower + np.asarray(u, dtype=float) * (upper - lower)
