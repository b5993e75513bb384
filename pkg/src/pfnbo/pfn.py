"""Set-transformer surrogate trained on prior samples.

Training points enter as one token each (linear encoding of the padded,
scaled features concatenated with y); query points carry a learned
placeholder instead of y.  Every position attends only to the context
(style token plus training tokens), so queries never see each other and no
positional information exists.  The head emits logits over the buckets of
a :class:`~pfnbo.riemann.BucketLayout` plus its two tails.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .priors import Batch, PriorConfig, pad_and_scale, sample_training_batch
from .riemann import BucketLayout, RiemannDistribution, build_borders

logger = logging.getLogger(__name__)

STYLE_MODES = ("ppd", "mean", "kg")
LR_GRID = (1e-3, 3e-4, 1e-4, 5e-5)


class CapacityError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class PfnConfig:
    emsize: int = 128
    nlayers: int = 4
    nhead: int = 4
    ff_factor: int = 2
    capacity: int = 18
    num_buckets: int = 100
    style: str = "none"  # none | user-prior | kg
    lr: float = 1e-3
    warmup_fraction: float = 0.05
    batch_size: int = 64
    steps: int = 2000
    border_batches: int = 64
    grad_clip: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.emsize % self.nhead:
            raise ValueError("emsize must be divisible by nhead")
        if self.capacity < 1 or self.num_buckets < 2:
            raise ValueError("need capacity >= 1 and num_buckets >= 2")
        if self.style not in ("none", "user-prior", "kg"):
            raise ValueError(f"unknown style vocabulary {self.style!r}")

    @property
    def style_dim(self) -> int:
        return {"none": 0, "user-prior": 3 * self.capacity, "kg": len(STYLE_MODES)}[self.style]

    @property
    def num_datasets(self) -> int:
        return self.steps * self.batch_size

    @classmethod
    def from_dict(cls, data: dict) -> "PfnConfig":
        return cls(**data)


class ContextAttentionLayer(nn.Module):
    """Pre-norm transformer block whose keys/values are the first ``n_ctx`` tokens."""

    def __init__(self, emsize: int, nhead: int, ff: int):
        super().__init__()
        self.nhead = nhead
        self.norm1 = nn.LayerNorm(emsize)
        self.qkv = nn.Linear(emsize, 3 * emsize)
        self.out = nn.Linear(emsize, emsize)
        self.norm2 = nn.LayerNorm(emsize)
        self.ff = nn.Sequential(nn.Linear(emsize, ff), nn.GELU(), nn.Linear(ff, emsize))

    def forward(self, h: torch.Tensor, n_ctx: int) -> torch.Tensor:
        B, S, E = h.shape
        H = self.nhead
        q, k, v = self.qkv(self.norm1(h)).split(E, dim=-1)
        q = q.view(B, S, H, E // H).transpose(1, 2)
        k = k[:, :n_ctx].reshape(B, n_ctx, H, E // H).transpose(1, 2)
        v = v[:, :n_ctx].reshape(B, n_ctx, H, E // H).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(E // H), dim=-1)
        a = (att @ v).transpose(1, 2).reshape(B, S, E)
        h = h + self.out(a)
        return h + self.ff(self.norm2(h))


class PfnNetwork(nn.Module):
    def __init__(self, cfg: PfnConfig):
        super().__init__()
        E = cfg.emsize
        self.encoder = nn.Linear(cfg.capacity + 1, E)
        self.y_placeholder = nn.Parameter(torch.zeros(E))
        self.style_encoder = nn.Linear(cfg.style_dim, E) if cfg.style_dim else None
        self.layers = nn.ModuleList(
            ContextAttentionLayer(E, cfg.nhead, cfg.ff_factor * E) for _ in range(cfg.nlayers)
        )
        self.norm = nn.LayerNorm(E)
        self.head = nn.Sequential(nn.Linear(E, 2 * E), nn.GELU(), nn.Linear(2 * E, cfg.num_buckets + 2))

    def forward(self, x_train, y_train, x_query, style=None) -> torch.Tensor:
        """Logits ``(B, m, M+2)`` for inputs already padded and scaled."""
        B = x_train.shape[0]
        train = self.encoder(torch.cat([x_train, y_train.unsqueeze(-1)], dim=-1))
        zeros = x_query.new_zeros(x_query.shape[:-1] + (1,))
        query = self.encoder(torch.cat([x_query, zeros], dim=-1)) + self.y_placeholder
        parts = [train, query]
        if self.style_encoder is not None:
            if style is None:
                raise ValueError("this model needs a style input")
            parts.insert(0, self.style_encoder(style.reshape(B, 1, -1)))
        elif style is not None:
            raise ValueError("this model has no style vocabulary")
        h = torch.cat(parts, dim=1)
        n_ctx = h.shape[1] - x_query.shape[1]
        for layer in self.layers:
            h = layer(h, n_ctx)
        return self.head(self.norm(h[:, n_ctx:]))


def canonical_order(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Indices sorting each training set lexicographically by (x_0, ..., x_K, y)."""
    order = torch.argsort(y, dim=-1, stable=True)
    for c in reversed(range(x.shape[-1])):
        col = torch.gather(x[..., c], -1, order)
        order = torch.gather(order, -1, torch.argsort(col, dim=-1, stable=True))
    return order


class PfnModel:
    """A trained network with its bucket layout and bookkeeping."""

    VERSION = 1

    def __init__(self, cfg: PfnConfig, layout: BucketLayout, net: PfnNetwork | None = None, steps_trained: int = 0):
        if layout.num_buckets != cfg.num_buckets:
            raise ValueError(f"layout has {layout.num_buckets} buckets, config says {cfg.num_buckets}")
        self.cfg = cfg
        self.layout = layout
        self.net = net if net is not None else PfnNetwork(cfg)
        self.steps_trained = steps_trained
        self.history: list[float] = []
        self.meta: dict = {}
        self._net64 = None

    # -- inference --------------------------------------------------------

    def invalidate(self):
        self._net64 = None

    @property
    def net64(self) -> PfnNetwork:
        """Double-precision copy of the weights used for all inference."""
        if self._net64 is None:
            self._net64 = copy.deepcopy(self.net).double().eval()
            for p in self._net64.parameters():
                p.requires_grad_(False)
        return self._net64

    def style_tensor(self, style, batch: int, dtype=torch.float64):
        if style is None:
            return None
        s = torch.as_tensor(np.asarray(style, dtype=float) if not isinstance(style, torch.Tensor) else style, dtype=dtype)
        if s.dim() <= 2 and s.numel() == self.cfg.style_dim:
            s = s.reshape(1, -1).expand(batch, -1)
        return s.reshape(batch, -1)

    def prepare(self, X, d: int | None = None) -> torch.Tensor:
        """Pad to capacity and scale by ``K/d``; works on tensors (differentiably)."""
        K = self.cfg.capacity
        d = X.shape[-1] if d is None else d
        if d > K:
            raise CapacityError(f"{d} features exceed model capacity {K}")
        if isinstance(X, torch.Tensor):
            X = X * (K / d)
            return F.pad(X, (0, K - X.shape[-1]))
        return torch.as_tensor(pad_and_scale(X, d, K))

    def predict_batch(self, x_train, y_train, x_query, style=None, net=None) -> RiemannDistribution:
        """Differentiable prediction for batched tensors of raw ``[0,1]^d`` inputs.

        Shapes: ``x_train (B, n, d)``, ``y_train (B, n)``, ``x_query (B, m, d)``.
        """
        net = net or self.net64
        dtype = next(net.parameters()).dtype
        x_train = torch.as_tensor(x_train, dtype=dtype)
        y_train = torch.as_tensor(y_train, dtype=dtype)
        x_query = torch.as_tensor(x_query, dtype=dtype)
        if x_train.shape[1] < 1:
            raise ValueError("training set must be nonempty")
        xt = self.prepare(x_train)
        xq = self.prepare(x_query)
        order = canonical_order(xt.detach(), y_train.detach())
        xt = torch.gather(xt, 1, order.unsqueeze(-1).expand_as(xt))
        yt = torch.gather(y_train, 1, order)
        style = self.style_tensor(style, xt.shape[0], dtype)
        if style is not None and self.cfg.style == "user-prior":
            K, d = self.cfg.capacity, x_train.shape[-1]
            scale = torch.ones(K, 3, dtype=dtype)
            scale[:d, :2] = K / d
            style = (style.reshape(-1, K, 3) * scale).reshape(style.shape)
        logits = net(xt, yt, xq, style)
        return RiemannDistribution.from_logits(self.layout, logits.double())

    def predict(self, X_train, y_train, X_query, style=None) -> RiemannDistribution:
        """One distribution per query row for a single dataset (no gradients)."""
        X_train = np.atleast_2d(np.asarray(X_train, dtype=float))
        X_query = np.atleast_2d(np.asarray(X_query, dtype=float))
        with torch.no_grad():
            dist = self.predict_batch(
                X_train[None], np.asarray(y_train, dtype=float).reshape(1, -1), X_query[None], style
            )
        return dist[0]

    # -- training ---------------------------------------------------------

    def batch_nll(self, batch: Batch, net=None) -> torch.Tensor:
        """Per-point negative log-likelihood ``(B, m)`` of a training batch."""
        net = net or self.net
        dtype = next(net.parameters()).dtype
        X = torch.as_tensor(batch.X, dtype=dtype)
        y = torch.as_tensor(batch.y, dtype=dtype)
        xq = torch.as_tensor(batch.queries, dtype=dtype)
        targets = torch.as_tensor(batch.query_targets, dtype=torch.float64)
        style = None if batch.style is None else torch.as_tensor(batch.style, dtype=dtype).reshape(X.shape[0], -1)
        logits = net(X[:, : batch.split], y[:, : batch.split], xq, style)
        dist = RiemannDistribution.from_logits(self.layout, logits)
        return -dist.log_prob(targets.to(logits.dtype))

    def loss(self, batch: Batch, net=None) -> torch.Tensor:
        return self.batch_nll(batch, net).mean()


def layout_for_prior(sampler: Callable, cfg: PfnConfig, rng) -> BucketLayout:
    ys = [np.ravel(sampler(cfg.batch_size, rng).query_targets) for _ in range(cfg.border_batches)]
    return build_borders(np.concatenate(ys), cfg.num_buckets)


def cosine_lr(step: int, total: int, warmup: int) -> float:
    """Multiplier on the base step size: linear warmup, then cosine to 0."""
    if warmup and step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def _sampler_from(prior) -> Callable:
    if isinstance(prior, PriorConfig):
        return lambda b, rng: sample_training_batch(prior, b, rng)
    return prior


def train(
    prior,
    cfg: PfnConfig,
    rng: np.random.Generator,
    checkpoint_sink: Callable | None = None,
    model: PfnModel | None = None,
    layout: BucketLayout | None = None,
    log_every: int = 0,
) -> PfnModel:
    """Fit the network to batches from ``prior`` (a PriorConfig or batch sampler).

    Passing ``model`` continues training it (its layout is kept).
    """
    sampler = _sampler_from(prior)
    border_rng, init_rng, data_rng = rng.spawn(3)
    if model is None:
        layout = layout or layout_for_prior(sampler, cfg, border_rng)
        with torch.random.fork_rng():
            torch.manual_seed(int(init_rng.integers(2**31)))
            model = PfnModel(cfg, layout)
    net = model.net
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    warmup = int(cfg.warmup_fraction * cfg.steps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: cosine_lr(s, cfg.steps, warmup))
    for step in range(cfg.steps):
        batch = sampler(cfg.batch_size, data_rng)
        loss = model.loss(batch, net)
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(
                f"non-finite loss {loss.item()} at step {step} (lr {sched.get_last_lr()[0]:.3g}, "
                f"|y| max {np.abs(batch.y).max():.3g}, split {batch.split})"
            )
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        model.history.append(loss.item())
        model.steps_trained += 1
        if log_every and (step + 1) % log_every == 0:
            logger.info("step %d loss %.4f", step + 1, np.mean(model.history[-log_every:]))
        if checkpoint_sink and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            model.invalidate()
            checkpoint_sink(model, step + 1)
    net.eval()
    model.invalidate()
    return model


def grad_query(model: PfnModel, X_train, y_train, x_query, functional: Callable, style=None) -> np.ndarray:
    """Gradient of ``functional(distribution)`` with respect to one query point."""
    x = torch.tensor(np.asarray(x_query, dtype=float)[None, None, :], requires_grad=True)
    dist = model.predict_batch(
        np.asarray(X_train, dtype=float)[None], np.asarray(y_train, dtype=float)[None], x, style
    )
    value = functional(dist[0, 0])
    if not value.requires_grad:
        return np.zeros(x.shape[-1])
    (g,) = torch.autograd.grad(value, x, allow_unused=True)
    return np.zeros(x.shape[-1]) if g is None else g[0, 0].numpy()


# ---------------------------------------------------------------- checkpoints

MAGIC = b"PFN4BO\0"


def save(model: PfnModel, path) -> None:
    header = json.dumps(
        {"config": asdict(model.cfg), "steps_trained": model.steps_trained, "history": model.history, "meta": model.meta},
        sort_keys=True,
    ).encode()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", PfnModel.VERSION)
    out += struct.pack("<I", len(header)) + header
    borders = np.ascontiguousarray(model.layout.borders, dtype="<f8")
    out += struct.pack("<I", borders.size) + borders.tobytes()
    state = model.net.state_dict()
    out += struct.pack("<I", len(state))
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> PfnModel:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint")
    (version,) = r.unpack("<I")
    if version != PfnModel.VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this code reads {PfnModel.VERSION}")
    if len(data) < r.pos + 4:
        raise CheckpointError("checkpoint truncated")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen))
    cfg = PfnConfig.from_dict(header["config"])
    (nb,) = r.unpack("<I")
    borders = np.frombuffer(r.take(8 * nb), dtype="<f8").astype(float)
    (nt,) = r.unpack("<I")
    state = {}
    for _ in range(nt):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    if r.pos != len(data) - 4:
        raise CheckpointError("trailing bytes in checkpoint")
    model = PfnModel(cfg, BucketLayout(borders), steps_trained=header["steps_trained"])
    model.net.load_state_dict(state)
    model.net.eval()
    model.history = list(header["history"])
    model.meta = dict(header["meta"])
    return model
