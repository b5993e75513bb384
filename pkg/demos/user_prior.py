"""A user prior tells the network roughly where the optimum is.

    python demos/user_prior.py

Trains a small 1-D network whose style token encodes an interval and a
confidence, then shows how the predictive mean moves when the interval
changes while the data stay the same.
"""

import numpy as np
import torch

from pfnbo import pfn
from pfnbo.priors import PriorConfig, UserPriorSpec, sample_simple_gp

torch.set_num_threads(1)

prior = PriorConfig(kind="gp", max_dims=1, capacity=1, seq_len=40, user_prior=True)
cfg = pfn.PfnConfig(emsize=64, nlayers=3, capacity=1, style="user-prior", steps=1500)
model = pfn.train(prior, cfg, np.random.default_rng(0), log_every=500)

data = sample_simple_gp(2, 1, np.random.default_rng(7))
grid = np.linspace(0, 1, 11)[:, None]
specs = {
    "no prior": UserPriorSpec.none(1),
    "optimum in [0, 0.25], rho 0.9": UserPriorSpec(0.0, 0.25, 0.9),
    "optimum in [0.75, 1], rho 0.9": UserPriorSpec(0.75, 1.0, 0.9),
}
print("observed:", np.round(data.X[:, 0], 2), np.round(data.y, 2))
print("x      " + "  ".join(f"{x:5.2f}" for x in grid[:, 0]))
base = model.predict(data.X, data.y, grid, specs["no prior"].encode(1)).mean().numpy()
print("no prior\n       " + "  ".join(f"{m:5.2f}" for m in base))
for label, spec in list(specs.items())[1:]:
    mean = model.predict(data.X, data.y, grid, spec.encode(1)).mean().numpy()
    print(f"{label}, change in mean\n       " + "  ".join(f"{m:+5.2f}" for m in mean - base))
