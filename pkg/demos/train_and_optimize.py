"""Train a small PFN on a 1-D RBF prior, check it against the exact GP, then optimize with it.

    python demos/train_and_optimize.py

Takes a few minutes on one core.
"""

import numpy as np
import torch

from pfnbo import pfn
from pfnbo.acqopt import SearchSpace
from pfnbo.bo import GpSurrogate, PfnSurrogate, run_bo
from pfnbo.gp import GaussianProcess, posterior
from pfnbo.priors import PriorConfig, sample_simple_gp

torch.set_num_threads(1)

prior = PriorConfig(kind="gp", max_dims=1, capacity=1, seq_len=40)
cfg = pfn.PfnConfig(emsize=64, nlayers=3, capacity=1, steps=800)
model = pfn.train(prior, cfg, np.random.default_rng(0), log_every=200)
print(f"trained on {cfg.num_datasets} synthetic datasets")

# The network was never shown this dataset; its predictive mean should sit close to the GP posterior mean.
data = sample_simple_gp(8, 1, np.random.default_rng(1))
grid = np.linspace(0, 1, 9)[:, None]
dist = model.predict(data.X, data.y, grid)
gp_mean, gp_var = posterior(GaussianProcess("rbf", 0.2, 1.0, 1e-4), data.X, data.y, grid)
lo, hi = dist.icdf(0.05).numpy(), dist.icdf(0.95).numpy()
z = 1.6448536269514722
print("\n   x   PFN mean   GP mean   PFN 90% interval    GP 90% interval")
for x, m, gm, gv, a, b in zip(grid[:, 0], dist.mean().numpy(), gp_mean, gp_var, lo, hi):
    s = z * np.sqrt(gv)
    print(f"{x:5.2f} {m:9.3f} {gm:9.3f}   [{a:6.3f}, {b:6.3f}]   [{gm - s:6.3f}, {gm + s:6.3f}]")


def objective(x):
    return float(np.sin(12 * x[0]) * x[0] + 0.3 * np.cos(5 * x[0]))


space = SearchSpace.unit(1)
best = max(objective(x) for x in np.linspace(0, 1, 10_001)[:, None])
for name, surrogate in (("pfn", PfnSurrogate(model)), ("gp", GpSurrogate(GaussianProcess("rbf", 0.2, 1.0, 1e-4)))):
    traj = run_bo(objective, surrogate, space, budget=12, seed=0, n_candidates=1000, top_k=10)
    print(f"\n{name}: regret after each step", np.round(best - traj.incumbents, 4))
