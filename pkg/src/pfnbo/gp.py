"""Exact Gaussian-process regression used as ground truth and as a baseline.

Two kernels are supported, RBF and Matérn-3/2, both with per-dimension
(ARD) lengthscales.  ``noise`` is always a variance added to the diagonal.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import optimize, stats
from scipy.linalg import cho_solve, solve_triangular

logger = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)


class CholeskyError(np.linalg.LinAlgError):
    pass


def robust_cholesky(K: np.ndarray, start: float = 1e-10, stop: float = 1e-4) -> np.ndarray:
    """Cholesky factor of (a batch of) covariance matrices with jitter escalation.

    Jitter starts at ``start * trace / n`` and grows tenfold until
    ``stop * trace / n``.
    """
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        pass
    n = K.shape[-1]
    scale = np.trace(K, axis1=-2, axis2=-1)[..., None, None] / n
    scale = np.where(scale > 0, scale, 1.0)
    eye = np.eye(n)
    rel = start
    while rel <= stop * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + rel * scale * eye)
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise CholeskyError(f"matrix not positive definite even with relative jitter {stop:g}")


def _scaled_sqdist(X1, X2, lengthscale):
    A = X1 / lengthscale
    B = X2 / lengthscale
    d2 = (A**2).sum(-1)[..., :, None] + (B**2).sum(-1)[..., None, :] - 2.0 * A @ np.swapaxes(B, -1, -2)
    return np.maximum(d2, 0.0)


def rbf_kernel(X1, X2, lengthscale=1.0, outputscale=1.0):
    return outputscale * np.exp(-0.5 * _scaled_sqdist(X1, X2, lengthscale))


def matern32_kernel(X1, X2, lengthscale=1.0, outputscale=1.0):
    r = np.sqrt(_scaled_sqdist(X1, X2, lengthscale))
    return outputscale * (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)


KERNELS = {"rbf": rbf_kernel, "matern32": matern32_kernel}


@dataclass(frozen=True)
class GaussianProcess:
    kernel: str = "rbf"
    lengthscale: float | tuple = 0.2
    outputscale: float = 1.0
    noise: float = 1e-4

    def k(self, X1, X2):
        ls = np.asarray(self.lengthscale, dtype=float)
        return KERNELS[self.kernel](np.asarray(X1, float), np.asarray(X2, float), ls, self.outputscale)


@dataclass
class GpPosterior:
    """Conditioned GP: keeps the Cholesky factor for repeated queries."""

    gp: GaussianProcess
    X: np.ndarray
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray

    def predict_torch(self, Xq: torch.Tensor):
        """Differentiable latent mean and variance for a float64 tensor ``(m, d)``."""
        ls = torch.as_tensor(np.broadcast_to(np.asarray(self.gp.lengthscale, float), (self.X.shape[1],)).copy())
        A = torch.as_tensor(self.X) / ls
        B = Xq / ls
        d2 = ((B[:, None, :] - A[None, :, :]) ** 2).sum(-1)
        if self.gp.kernel == "rbf":
            ks = self.gp.outputscale * torch.exp(-0.5 * d2)
        else:
            r = torch.sqrt(d2.clamp(min=1e-30))
            ks = self.gp.outputscale * (1 + SQRT3 * r) * torch.exp(-SQRT3 * r)
        mean = ks @ torch.as_tensor(self.alpha)
        v = torch.linalg.solve_triangular(torch.as_tensor(self.chol), ks.T, upper=False)
        return mean, (self.gp.outputscale - (v**2).sum(0)).clamp(min=0.0)

    def predict(self, Xq, include_noise: bool = False):
        Xq = np.atleast_2d(np.asarray(Xq, float))
        Ks = self.gp.k(self.X, Xq)
        mean = Ks.T @ self.alpha
        v = solve_triangular(self.chol, Ks, lower=True)
        var = self.gp.outputscale - (v**2).sum(0)
        var = np.maximum(var, 0.0)
        if include_noise:
            var = var + self.gp.noise
        return mean, var


def condition(gp: GaussianProcess, X, y) -> GpPosterior:
    X = np.atleast_2d(np.asarray(X, float))
    y = np.asarray(y, float).ravel()
    K = gp.k(X, X) + gp.noise * np.eye(X.shape[0])
    L = robust_cholesky(K)
    return GpPosterior(gp, X, y, L, cho_solve((L, True), y))


def posterior(gp: GaussianProcess, X, y, Xq, include_noise: bool = False):
    """Posterior mean and variance of the latent function (plus noise if asked)."""
    return condition(gp, X, y).predict(Xq, include_noise=include_noise)


def gaussian_ei(mean, variance, f_star):
    """Closed-form expected improvement of a Gaussian over ``f_star``."""
    mean = np.asarray(mean, float)
    sd = np.sqrt(np.maximum(np.asarray(variance, float), 0.0))
    diff = mean - f_star
    with np.errstate(divide="ignore", invalid="ignore"):
        z = diff / sd
        ei = sd * (z * stats.norm.cdf(z) + stats.norm.pdf(z))
    return np.where(sd > 0, ei, np.maximum(diff, 0.0))


def gaussian_ei_torch(mean: torch.Tensor, variance: torch.Tensor, f_star: float) -> torch.Tensor:
    sd = torch.sqrt(variance.clamp(min=1e-24))
    z = (mean - f_star) / sd
    cdf = 0.5 * torch.special.erfc(-z / math.sqrt(2.0))
    pdf = torch.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return sd * (z * cdf + pdf)


def log_marginal_likelihood(gp: GaussianProcess, X, y) -> float:
    X = np.atleast_2d(np.asarray(X, float))
    y = np.asarray(y, float).ravel()
    K = gp.k(X, X) + gp.noise * np.eye(X.shape[0])
    L = robust_cholesky(K)
    alpha = cho_solve((L, True), y)
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * y.size * math.log(2 * math.pi))


@dataclass(frozen=True)
class Hyperpriors:
    """Gamma(shape, rate) on outputscale and lengthscales, normal on log-noise."""

    outputscale: tuple = (0.8452, 0.3993)
    lengthscale: tuple = (1.2107, 1.5212)
    log_noise: tuple = (-4.63, 0.5)

    def sample(self, d: int, rng: np.random.Generator):
        os_ = rng.gamma(self.outputscale[0], 1.0 / self.outputscale[1])
        ls = rng.gamma(self.lengthscale[0], 1.0 / self.lengthscale[1], size=d)
        noise = math.exp(rng.normal(*self.log_noise))
        return os_, ls, noise


@dataclass
class MapFit:
    gp: GaussianProcess
    objective: float
    start_objectives: list = field(default_factory=list)
    end_objectives: list = field(default_factory=list)


def _gamma_logpdf(x, shape, rate):
    return shape * math.log(rate) - math.lgamma(shape) + (shape - 1) * torch.log(x) - rate * x


def _map_objective_torch(theta, X, y, kernel, priors: Hyperpriors | None):
    n, d = X.shape
    ls = torch.exp(theta[:d])
    outputscale = torch.exp(theta[d])
    noise = torch.exp(theta[d + 1])
    A = X / ls
    d2 = ((A[:, None, :] - A[None, :, :]) ** 2).sum(-1)
    if kernel == "rbf":
        K = outputscale * torch.exp(-0.5 * d2)
    else:
        r = torch.sqrt(d2 + 1e-30)
        r = torch.where(d2 > 0, r, torch.zeros_like(r))
        K = outputscale * (1 + SQRT3 * r) * torch.exp(-SQRT3 * r)
    K = K + (noise + 1e-10 * outputscale) * torch.eye(n, dtype=X.dtype)
    L = torch.linalg.cholesky(K)
    alpha = torch.cholesky_solve(y[:, None], L)[:, 0]
    lml = -0.5 * (y * alpha).sum() - torch.log(torch.diagonal(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    if priors is not None:
        lml = lml + _gamma_logpdf(outputscale, *priors.outputscale)
        lml = lml + _gamma_logpdf(ls, *priors.lengthscale).sum()
        mu, sd = priors.log_noise
        lml = lml - 0.5 * ((theta[d + 1] - mu) / sd) ** 2
    return lml


def fit_map(
    X,
    y,
    kernel: str = "matern32",
    hyperpriors: Hyperpriors | None = Hyperpriors(),
    restarts: int = 10,
    maxiter: int = 200,
    rng: np.random.Generator | None = None,
) -> MapFit:
    """Maximum-a-posteriori kernel hyperparameters by multi-start L-BFGS-B.

    Parameters are optimised in log space; starting points are drawn from the
    hyperpriors (or a fixed grid when ``hyperpriors`` is None).
    """
    X = np.atleast_2d(np.asarray(X, float))
    y = np.asarray(y, float).ravel()
    if X.shape[0] < 2:
        raise ValueError("need at least two observations")
    rng = rng or np.random.default_rng(0)
    n, d = X.shape
    Xt = torch.as_tensor(X)
    yt = torch.as_tensor(y)
    bounds = [(math.log(1e-3), math.log(1e2))] * d + [(math.log(1e-4), math.log(1e3)), (math.log(1e-8), math.log(10.0))]

    def fun(theta):
        t = torch.tensor(theta, dtype=torch.float64, requires_grad=True)
        try:
            val = _map_objective_torch(t, Xt, yt, kernel, hyperpriors)
        except torch.linalg.LinAlgError:
            return 1e25, np.zeros_like(theta)
        val.backward()
        g = t.grad.numpy()
        if not np.isfinite(val.item()) or not np.all(np.isfinite(g)):
            return 1e25, np.zeros_like(theta)
        return -val.item(), -g

    best = None
    starts, ends = [], []
    for r in range(restarts):
        if hyperpriors is not None:
            os_, ls, noise = hyperpriors.sample(d, rng)
        else:
            os_, ls, noise = 1.0, np.full(d, 0.5 * (1 + r)), 1e-3
        theta0 = np.concatenate([np.log(ls), [math.log(os_), math.log(noise)]])
        theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
        f0 = -fun(theta0)[0]
        res = optimize.minimize(fun, theta0, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": maxiter})
        theta, f1 = (res.x, -res.fun) if -res.fun >= f0 else (theta0, f0)
        starts.append(f0)
        ends.append(f1)
        if np.isfinite(f1) and f1 > -1e24 and (best is None or f1 > best[1]):
            best = (theta, f1)
    if best is None:
        raise RuntimeError(f"all {restarts} MAP restarts failed; start objectives {starts}")
    theta = best[0]
    gp = GaussianProcess(
        kernel=kernel,
        lengthscale=tuple(np.exp(theta[:d])),
        outputscale=float(np.exp(theta[d])),
        noise=float(np.exp(theta[d + 1])),
    )
    return MapFit(gp, float(best[1]), starts, ends)


def map_objective(gp: GaussianProcess, X, y, hyperpriors: Hyperpriors | None = Hyperpriors()) -> float:
    """Log marginal likelihood plus log hyperprior density, evaluated at ``gp``."""
    X = np.atleast_2d(np.asarray(X, float))
    d = X.shape[1]
    ls = np.broadcast_to(np.asarray(gp.lengthscale, float), (d,))
    theta = torch.tensor(np.concatenate([np.log(ls), [math.log(gp.outputscale), math.log(gp.noise)]]))
    return float(_map_objective_torch(theta, torch.as_tensor(X), torch.as_tensor(np.ravel(y), dtype=torch.float64), gp.kernel, hyperpriors))
