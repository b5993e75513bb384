"""Discretized predictive distribution with half-normal tails.

A :class:`RiemannDistribution` puts a piecewise-constant density on ``M``
buckets delimited by ``M + 1`` borders and attaches a half-normal tail on each
side of the outermost borders, so the support is the whole real line.  The
probability vector therefore has ``M + 2`` entries, ordered
``(left tail, bucket_0, ..., bucket_{M-1}, right tail)``.

Everything here is written in torch so that acquisition values can be
differentiated with respect to the network that produced the probabilities.
Leading dimensions of ``probs`` are batch dimensions; scalar arguments such as
``y`` or ``f_star`` broadcast against them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

SQRT2 = math.sqrt(2.0)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LOG_SQRT_2_OVER_PI = 0.5 * math.log(2.0 / math.pi)


class DegenerateLayoutError(ValueError):
    """Raised when prior outputs cannot be split into distinct buckets."""


@dataclass(frozen=True, eq=False)
class BucketLayout:
    """Bucket borders plus the scales of the two half-normal tails.

    Unless given explicitly, each tail scale is set so that a tail carrying the
    same mass as its neighbouring bucket has the same density at the border:
    a half-normal with scale ``s`` has density ``sqrt(2/pi)/s`` at zero, a
    bucket of width ``w`` has density ``1/w``, hence ``s = w * sqrt(2/pi)``.
    """

    borders: np.ndarray
    tail_scale_left: float = field(default=float("nan"))
    tail_scale_right: float = field(default=float("nan"))

    def __post_init__(self):
        borders = np.ascontiguousarray(self.borders, dtype=np.float64)
        if borders.ndim != 1 or borders.size < 3:
            raise DegenerateLayoutError("need at least two buckets (three borders)")
        if not np.all(np.isfinite(borders)) or np.any(np.diff(borders) <= 0):
            raise DegenerateLayoutError("borders must be finite and strictly increasing")
        borders.setflags(write=False)
        object.__setattr__(self, "borders", borders)
        widths = np.diff(borders)
        if math.isnan(self.tail_scale_left):
            object.__setattr__(self, "tail_scale_left", float(widths[0] * SQRT_2_OVER_PI))
        if math.isnan(self.tail_scale_right):
            object.__setattr__(self, "tail_scale_right", float(widths[-1] * SQRT_2_OVER_PI))
        if self.tail_scale_left <= 0 or self.tail_scale_right <= 0:
            raise DegenerateLayoutError("tail scales must be positive")

    @property
    def num_buckets(self) -> int:
        return self.borders.size - 1

    @property
    def num_classes(self) -> int:
        """Number of probability entries: buckets plus the two tails."""
        return self.borders.size + 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.borders)

    def borders_tensor(self, like: torch.Tensor | None = None) -> torch.Tensor:
        dtype = like.dtype if like is not None and like.is_floating_point() else torch.float64
        device = like.device if like is not None else None
        return torch.tensor(self.borders, dtype=dtype, device=device)

    def __eq__(self, other):
        if not isinstance(other, BucketLayout):
            return NotImplemented
        return (
            np.array_equal(self.borders, other.borders)
            and self.tail_scale_left == other.tail_scale_left
            and self.tail_scale_right == other.tail_scale_right
        )

    def __hash__(self):
        return hash((self.borders.tobytes(), self.tail_scale_left, self.tail_scale_right))


def build_borders(prior_outputs, num_buckets: int = 100) -> BucketLayout:
    """Equal-mass bucket layout from samples of the prior's outputs.

    Interior borders sit at the ``i / num_buckets`` empirical quantiles, placed
    at the midpoint between the two straddling sorted samples; the outer
    borders are the sample minimum and maximum.
    """
    if num_buckets < 2:
        raise DegenerateLayoutError("num_buckets must be at least 2")
    ys = np.sort(np.asarray(prior_outputs, dtype=np.float64).ravel())
    if not np.all(np.isfinite(ys)):
        raise DegenerateLayoutError("prior outputs must be finite")
    if np.unique(ys).size < num_buckets + 1:
        raise DegenerateLayoutError(
            f"need more than {num_buckets} distinct prior outputs, got {np.unique(ys).size}"
        )
    n = ys.size
    cuts = (np.arange(1, num_buckets) * n) // num_buckets
    interior = 0.5 * (ys[cuts - 1] + ys[cuts])
    borders = np.concatenate([[ys[0]], interior, [ys[-1]]])
    if np.any(np.diff(borders) <= 0):
        raise DegenerateLayoutError("tied prior outputs collapse a bucket; add jitter or use fewer buckets")
    return BucketLayout(borders)


def _halfnormal_excess(t: torch.Tensor, scale) -> torch.Tensor:
    """E[max(H - t, 0)] for H ~ HalfNormal(scale) and t >= 0."""
    u = t / scale
    pdf = torch.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    survival = 0.5 * torch.special.erfc(u / SQRT2)
    return 2.0 * scale * (pdf - u * survival)


class RiemannDistribution:
    """A batch of Riemann distributions sharing one :class:`BucketLayout`.

    Build from probabilities or, inside a network, from logits with
    :meth:`from_logits` (which keeps an exact log-softmax for the loss).
    """

    def __init__(self, layout: BucketLayout, probs, log_probs: torch.Tensor | None = None):
        probs = torch.as_tensor(probs)
        if not probs.is_floating_point():
            probs = probs.to(torch.float64)
        if probs.shape[-1] != layout.num_classes:
            raise ValueError(
                f"probs has {probs.shape[-1]} entries, layout needs {layout.num_classes}"
            )
        self.layout = layout
        self.probs = probs
        self._log_probs = log_probs

    @classmethod
    def from_logits(cls, layout: BucketLayout, logits: torch.Tensor) -> "RiemannDistribution":
        log_probs = torch.log_softmax(logits, dim=-1)
        return cls(layout, log_probs.exp(), log_probs=log_probs)

    @property
    def log_probs(self) -> torch.Tensor:
        if self._log_probs is None:
            self._log_probs = torch.log(self.probs)
        return self._log_probs

    @property
    def batch_shape(self) -> torch.Size:
        return self.probs.shape[:-1]

    def __getitem__(self, idx) -> "RiemannDistribution":
        if not isinstance(idx, tuple):
            idx = (idx,)
        idx = idx + (slice(None),)
        log_probs = None if self._log_probs is None else self._log_probs[idx]
        return RiemannDistribution(self.layout, self.probs[idx], log_probs)

    def __len__(self):
        return self.probs.shape[0]

    def _as_batch(self, value) -> torch.Tensor:
        return torch.as_tensor(value, dtype=self.probs.dtype, device=self.probs.device)

    def _parts(self):
        b = self.layout.borders_tensor(self.probs)
        p = self.probs
        return b, p[..., 0], p[..., 1:-1], p[..., -1]

    def log_prob(self, y) -> torch.Tensor:
        """Log density at ``y``; finite everywhere thanks to the tails."""
        y = self._as_batch(y)
        b = self.layout.borders_tensor(self.probs)
        m = self.layout.num_buckets
        lp = self.log_probs
        y, lp_b = torch.broadcast_tensors(y.unsqueeze(-1), lp)
        y = y[..., 0]
        idx = torch.searchsorted(b, y.contiguous(), right=True) - 1
        inner_idx = idx.clamp(0, m - 1)
        log_widths = torch.log(b[1:] - b[:-1])
        inner = lp_b[..., 1:-1].gather(-1, inner_idx.unsqueeze(-1)).squeeze(-1) - log_widths[inner_idx]
        sl, sr = self.layout.tail_scale_left, self.layout.tail_scale_right
        dl = (b[0] - y).clamp(min=0.0)
        dr = (y - b[-1]).clamp(min=0.0)
        left = lp_b[..., 0] + LOG_SQRT_2_OVER_PI - math.log(sl) - 0.5 * (dl / sl) ** 2
        right = lp_b[..., -1] + LOG_SQRT_2_OVER_PI - math.log(sr) - 0.5 * (dr / sr) ** 2
        out = torch.where(y < b[0], left, inner)
        return torch.where(y > b[-1], right, out)

    def cdf(self, y) -> torch.Tensor:
        y = self._as_batch(y)
        b, p_l, p_in, p_r = self._parts()
        sl, sr = self.layout.tail_scale_left, self.layout.tail_scale_right
        frac = ((y.unsqueeze(-1) - b[:-1]) / (b[1:] - b[:-1])).clamp(0.0, 1.0)
        inner = (p_in * frac).sum(-1)
        left = p_l * torch.special.erfc((b[0] - y).clamp(min=0.0) / (sl * SQRT2))
        right = p_r * torch.special.erf((y - b[-1]).clamp(min=0.0) / (sr * SQRT2))
        return (left + inner + right).clamp(0.0, 1.0)

    def icdf(self, q) -> torch.Tensor:
        q = self._as_batch(q)
        if torch.any((q <= 0) | (q >= 1)):
            raise ValueError("quantile level must lie strictly inside (0, 1)")
        b, p_l, p_in, p_r = self._parts()
        q, p_l = torch.broadcast_tensors(q, p_l)
        p_r = p_r.expand_as(q)
        p_in = p_in.expand(*q.shape, p_in.shape[-1])
        sl, sr = self.layout.tail_scale_left, self.layout.tail_scale_right

        right_edges = p_l.unsqueeze(-1) + torch.cumsum(p_in, dim=-1)
        idx = torch.searchsorted(right_edges.contiguous(), q.unsqueeze(-1).contiguous())
        idx = idx.clamp(max=p_in.shape[-1] - 1)
        mass = p_in.gather(-1, idx).squeeze(-1)
        left_edge_cdf = (right_edges.gather(-1, idx).squeeze(-1) - mass)
        frac = ((q - left_edge_cdf) / mass.clamp(min=torch.finfo(q.dtype).tiny)).clamp(0.0, 1.0)
        widths = b[1:] - b[:-1]
        inner = b[:-1][idx.squeeze(-1)] + frac * widths[idx.squeeze(-1)]

        tiny = torch.finfo(q.dtype).tiny
        # erfcinv(r) * sqrt(2) == -ndtri(r / 2)
        rl = (q / p_l.clamp(min=tiny)).clamp(tiny, 1.0)
        left = b[0] + sl * torch.special.ndtri(0.5 * rl)
        rr = ((1.0 - q) / p_r.clamp(min=tiny)).clamp(tiny, 1.0)
        right = b[-1] - sr * torch.special.ndtri(0.5 * rr)
        out = torch.where(q < p_l, left, inner)
        return torch.where(q > 1.0 - p_r, right, out)

    def mean(self) -> torch.Tensor:
        b, p_l, p_in, p_r = self._parts()
        mids = 0.5 * (b[:-1] + b[1:])
        left = b[0] - self.layout.tail_scale_left * SQRT_2_OVER_PI
        right = b[-1] + self.layout.tail_scale_right * SQRT_2_OVER_PI
        return p_l * left + (p_in * mids).sum(-1) + p_r * right


def acq_pi(dist: RiemannDistribution, f_star) -> torch.Tensor:
    """Probability that the outcome exceeds ``f_star``.

    Three terms: the part of the left tail above ``f_star``, the clipped
    overlap of each bucket with ``(f_star, inf)``, and the right tail's
    survival beyond ``f_star``.
    """
    f = dist._as_batch(f_star)
    b, p_l, p_in, p_r = dist._parts()
    sl, sr = dist.layout.tail_scale_left, dist.layout.tail_scale_right
    left = p_l * torch.special.erf((b[0] - f).clamp(min=0.0) / (sl * SQRT2))
    hi = b[1:]
    clipped = torch.minimum(hi, torch.maximum(f.unsqueeze(-1), b[:-1]))
    inner = ((hi - clipped) * p_in / (hi - b[:-1])).sum(-1)
    right = p_r * torch.special.erfc((f - b[-1]).clamp(min=0.0) / (sr * SQRT2))
    return left + inner + right


def acq_ei(dist: RiemannDistribution, f_star) -> torch.Tensor:
    """Exact expected improvement ``E[max(y - f_star, 0)]``."""
    f = dist._as_batch(f_star)
    b, p_l, p_in, p_r = dist._parts()
    sl, sr = dist.layout.tail_scale_left, dist.layout.tail_scale_right
    lo, hi = b[:-1], b[1:]
    fe = f.unsqueeze(-1)
    c = torch.clamp(fe, min=lo, max=hi)
    inner = (p_in * (hi - c) * (0.5 * (hi + c) - fe) / (hi - lo)).sum(-1)

    t = f - b[-1]
    t_pos = t.clamp(min=0.0)
    right = p_r * (_halfnormal_excess(t_pos, sr) - (t - t_pos))

    d_pos = (b[0] - f).clamp(min=0.0)
    left = p_l * (d_pos - sl * SQRT_2_OVER_PI + _halfnormal_excess(d_pos, sl))
    return left + inner + right


def acq_ucb(dist: RiemannDistribution, quantile: float = 0.95) -> torch.Tensor:
    """Upper confidence bound as a predictive quantile."""
    return dist.icdf(quantile)


def acq_on_mean(dist: RiemannDistribution, f_star, kind: str = "ei") -> torch.Tensor:
    """EI or PI after collapsing the distribution to a point mass at its mean."""
    diff = dist.mean() - dist._as_batch(f_star)
    if kind == "ei":
        return diff.clamp(min=0.0)
    if kind == "pi":
        return (diff > 0).to(diff.dtype)
    raise ValueError(f"unknown kind {kind!r}")
