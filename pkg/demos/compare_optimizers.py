"""Run a small benchmark comparison and write the report tables.

    python demos/compare_optimizers.py [out_dir]

Tasks are lookup tables sampled from the RBF prior; every optimizer starts
from the same initial point, so identical regrets are genuine ties.
"""

import sys

import numpy as np
import torch

from pfnbo import pfn
from pfnbo.bench import Optimizer, emit_report, make_benchmark, run_comparison
from pfnbo.gp import GaussianProcess
from pfnbo.priors import PriorConfig

torch.set_num_threads(1)
out = sys.argv[1] if len(sys.argv) > 1 else "compare_report"

prior = PriorConfig(kind="gp", max_dims=2, capacity=2, seq_len=40)
model = pfn.train(prior, pfn.PfnConfig(emsize=64, nlayers=3, capacity=2, steps=800), np.random.default_rng(0),
                  log_every=200)
tasks = make_benchmark(prior, n_tasks=6, n_points=100, dims=[1, 2], seed=0)
optimizers = [
    Optimizer("pfn-ei", "pfn-ei", model),
    Optimizer("gp-ei", "gp-ei", gp=GaussianProcess("rbf", 0.2, 1.0, 1e-4)),
    Optimizer("random", "random"),
]
report = run_comparison(optimizers, tasks, budget=15, seed=0, workers=2)
for row in report.table():
    print(f"{row['optimizer']:8s} vs {row['versus']:8s}  {row['wins']} wins  {row['ties']} ties  {row['losses']} losses")
mean, lo, hi = report.mean_rank()
for i, name in enumerate(report.optimizers):
    print(f"{name:8s} final mean rank {mean[i, -1]:.2f}  [{lo[i, -1]:.2f}, {hi[i, -1]:.2f}]")
for kind, path in emit_report(report, out).items():
    print(f"wrote {kind}: {path}")
