import numpy as np
import pytest
import torch

from pfnbo.riemann import BucketLayout, RiemannDistribution

torch.set_num_threads(1)


def sample_riemann(layout: BucketLayout, probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw from the mixture definition directly: class counts, then points per class (grouped, not shuffled)."""
    b = layout.borders
    counts = rng.multinomial(n, probs / probs.sum())
    inner = counts[1:-1]
    lo = np.repeat(b[:-1], inner)
    width = np.repeat(np.diff(b), inner)
    return np.concatenate([
        b[0] - np.abs(rng.standard_normal(counts[0])) * layout.tail_scale_left,
        lo + rng.random(lo.size) * width,
        b[-1] + np.abs(rng.standard_normal(counts[-1])) * layout.tail_scale_right,
    ])


def random_riemann(rng: np.random.Generator, num_buckets: int | None = None) -> RiemannDistribution:
    m = num_buckets or int(rng.integers(2, 12))
    borders = np.cumsum(np.concatenate([[rng.normal()], rng.uniform(0.05, 1.0, m)]))
    probs = rng.dirichlet(np.ones(m + 2))
    return RiemannDistribution(BucketLayout(borders), torch.as_tensor(probs))


def z_scores_consistent(z, level: float = 3.0, hard: float = 5.0, alpha: float = 1e-3):
    """Family-level check for many independent comparisons at ``level`` SE.

    Returns ``(ok, n_exceed, allowed)``.  With exact code each z is standard
    normal, so the number beyond ``level`` is binomial; ``allowed`` is its
    ``1 - alpha`` quantile.  Nothing may exceed ``hard``.
    """
    from scipy import stats

    z = np.abs(np.asarray(z, dtype=float))
    p_exceed = 2 * stats.norm.sf(level)
    allowed = int(stats.binom.ppf(1 - alpha, z.size, p_exceed))
    n_exceed = int(np.sum(z > level))
    return (n_exceed <= allowed and bool(np.all(z <= hard))), n_exceed, allowed


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
