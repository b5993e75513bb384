import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from pfnbo.riemann import (
    BucketLayout,
    DegenerateLayoutError,
    RiemannDistribution,
    acq_ei,
    acq_on_mean,
    acq_pi,
    acq_ucb,
    build_borders,
)

from conftest import random_riemann, sample_riemann, z_scores_consistent


def one_bucket(lo, hi, masses=(0.0, 1.0, 0.0)):
    # two-bucket layout where the second bucket carries nothing, to get a
    # uniform on [lo, mid] with zero tails
    layout = BucketLayout(np.array([lo, hi, hi + 1.0]))
    return RiemannDistribution(layout, torch.tensor([masses[0], masses[1], 0.0, masses[2]], dtype=torch.float64))


class TestBuildBorders:
    def test_midpoint_rule(self):
        layout = build_borders([1.0, 2.0, 3.0, 4.0, 5.0], 2)
        # 5 samples, cut after floor(5/2)=2 -> between 2 and 3
        assert layout.borders[1] == 2.5

    def test_four_points_two_buckets(self):
        # four points need a fifth distinct value for two finite buckets with
        # distinct outer borders; duplicate-free case from the docs
        layout = build_borders([4.0, 1.0, 3.0, 2.0], 2)
        np.testing.assert_array_equal(layout.borders, [1.0, 2.5, 4.0])

    def test_normal_quantiles(self):
        ys = np.random.default_rng(0).standard_normal(1_000_000)
        layout = build_borders(ys, 10)
        expected = stats.norm.ppf(np.arange(1, 10) / 10)
        assert np.max(np.abs(layout.borders[1:-1] - expected)) < 0.02

    def test_all_equal_is_degenerate(self):
        with pytest.raises(DegenerateLayoutError):
            build_borders(np.ones(100), 10)

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(20, 400), buckets=st.integers(2, 15), seed=st.integers(0, 2**31))
    def test_equal_share(self, n, buckets, seed):
        ys = np.random.default_rng(seed).standard_normal(n)
        if n < buckets + 1:
            return
        layout = build_borders(ys, buckets)
        idx = np.clip(np.searchsorted(layout.borders, ys, side="right") - 1, 0, buckets - 1)
        counts = np.bincount(idx, minlength=buckets)
        assert counts.min() >= n // buckets
        assert counts.max() <= -(-n // buckets)


def test_tail_scale_continuity():
    layout = BucketLayout(np.array([0.0, 0.5, 2.0, 2.25]))
    dist = RiemannDistribution(layout, torch.tensor([0.2, 0.2, 0.4, 0.2, 0.0], dtype=torch.float64))
    eps = 1e-9
    # left tail and first bucket carry 0.2 each: density continuous at border 0
    assert math.isclose(dist.log_prob(-eps).item(), dist.log_prob(eps).item(), rel_tol=1e-6)


class TestLogProb:
    def test_uniform_bucket(self):
        dist = one_bucket(0.0, 2.0)
        assert dist.log_prob(1.0).item() == pytest.approx(math.log(0.5))

    def test_right_tail_decreasing(self, rng):
        dist = random_riemann(rng)
        ys = dist.layout.borders[-1] + np.linspace(0.1, 10.0, 50)
        lp = dist.log_prob(torch.as_tensor(ys)).numpy()
        assert np.all(np.diff(lp) < 0)

    def test_integrates_to_one(self, rng):
        for _ in range(5):
            dist = random_riemann(rng)
            b = dist.layout.borders
            f = lambda y: math.exp(dist.log_prob(y).item())
            total = integrate.quad(f, -np.inf, b[0])[0] + integrate.quad(f, b[-1], np.inf)[0]
            total += sum(integrate.quad(f, lo, hi)[0] for lo, hi in zip(b[:-1], b[1:]))
            assert abs(total - 1.0) < 1e-6

    def test_normalised(self, rng):
        dist = random_riemann(rng)
        assert abs(dist.probs.sum().item() - 1.0) < 1e-9


class TestMoments:
    def test_mean_uniform(self):
        assert one_bucket(0.0, 2.0).mean().item() == pytest.approx(1.0)

    def test_icdf_inverts_cdf(self, rng):
        for _ in range(20):
            dist = random_riemann(rng)
            b = dist.layout.borders
            ys = torch.as_tensor(rng.uniform(b[0], b[-1], 100))
            back = dist.icdf(dist.cdf(ys))
            assert torch.max(torch.abs(back - ys)).item() < 1e-9

    def test_icdf_inverts_cdf_in_tails(self, rng):
        for _ in range(20):
            dist = random_riemann(rng)
            lay = dist.layout
            ys = np.concatenate([
                lay.borders[0] - rng.uniform(0, 3 * lay.tail_scale_left, 50),
                lay.borders[-1] + rng.uniform(0, 3 * lay.tail_scale_right, 50),
            ])
            back = dist.icdf(dist.cdf(torch.as_tensor(ys))).numpy()
            np.testing.assert_allclose(back, ys, rtol=0, atol=1e-6)

    def test_icdf_domain(self, rng):
        dist = random_riemann(rng)
        for q in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                dist.icdf(q)

    def test_mean_matches_monte_carlo(self, rng):
        for _ in range(5):
            dist = random_riemann(rng)
            draws = sample_riemann(dist.layout, dist.probs.numpy(), 1_000_000, rng)
            se = draws.std() / math.sqrt(draws.size)
            assert abs(dist.mean().item() - draws.mean()) < 3 * se + 1e-12

    def test_batched_shapes(self, rng):
        layout = BucketLayout(np.linspace(-1, 1, 6))
        probs = torch.as_tensor(rng.dirichlet(np.ones(7), size=(4, 3)))
        dist = RiemannDistribution(layout, probs)
        assert dist.mean().shape == (4, 3)
        assert dist.cdf(0.0).shape == (4, 3)
        assert dist.icdf(0.3).shape == (4, 3)
        assert dist.log_prob(torch.zeros(4, 3)).shape == (4, 3)
        assert dist[1].mean().shape == (3,)


class TestAcquisitions:
    def test_pi_boundary_aligned(self):
        layout = BucketLayout(np.array([0.0, 1.0, 2.0]))
        dist = RiemannDistribution(layout, torch.tensor([0.1, 0.4, 0.4, 0.1], dtype=torch.float64))
        assert acq_pi(dist, 1.0).item() == pytest.approx(0.5, abs=1e-12)

    def test_pi_limits(self, rng):
        dist = random_riemann(rng)
        assert acq_pi(dist, -1e6).item() == pytest.approx(1.0, abs=1e-12)
        assert acq_pi(dist, 1e6).item() == pytest.approx(0.0, abs=1e-12)

    def test_pi_is_survival(self, rng):
        for _ in range(100):
            dist = random_riemann(rng)
            b = dist.layout.borders
            f = rng.uniform(b[0] - 2, b[-1] + 2)
            assert abs(acq_pi(dist, f).item() - (1 - dist.cdf(f).item())) < 1e-9

    def test_ei_uniform(self):
        assert acq_ei(one_bucket(0.0, 1.0), 0.0).item() == pytest.approx(0.5)

    def test_ei_zero_above_support(self):
        assert acq_ei(one_bucket(0.0, 1.0), 5.0).item() == 0.0

    def test_ei_matches_monte_carlo(self, rng):
        z = []
        for _ in range(100):
            dist = random_riemann(rng)
            b = dist.layout.borders
            f = rng.uniform(b[0], b[-1])
            draws = sample_riemann(dist.layout, dist.probs.numpy(), 1_000_000, rng)
            imp = np.maximum(draws - f, 0.0)
            se = imp.std() / math.sqrt(imp.size)
            z.append((acq_ei(dist, f).item() - imp.mean()) / se)
        ok, n_exceed, allowed = z_scores_consistent(z)
        assert ok, (n_exceed, allowed, np.max(np.abs(z)))

    def test_ei_shape_properties(self, rng):
        for _ in range(20):
            dist = random_riemann(rng)
            b = dist.layout.borders
            fs = torch.linspace(b[0] - 3, b[-1] + 3, 400, dtype=torch.float64)
            ei = acq_ei(dist, fs)
            assert torch.all(torch.diff(ei) <= 1e-12)
            assert torch.all(torch.diff(ei, n=2) >= -1e-10)
            assert torch.all(ei >= dist.mean() - fs - 1e-12)

    def test_ucb_uniform(self):
        assert acq_ucb(one_bucket(0.0, 1.0), 0.95).item() == pytest.approx(0.95)

    def test_ucb_median_of_symmetric(self):
        layout = BucketLayout(np.array([-2.0, -1.0, 1.0, 2.0]))
        dist = RiemannDistribution(layout, torch.tensor([0.05, 0.2, 0.5, 0.2, 0.05], dtype=torch.float64))
        assert acq_ucb(dist, 0.5).item() == pytest.approx(dist.mean().item(), abs=1e-12)

    def test_ucb_matches_empirical_quantile(self, rng):
        dist = random_riemann(rng, 20)
        draws = sample_riemann(dist.layout, dist.probs.numpy(), 1_000_000, rng)
        width = np.max(dist.layout.widths)
        assert abs(acq_ucb(dist, 0.9).item() - np.quantile(draws, 0.9)) < 2 * width

    def test_on_mean(self):
        layout = BucketLayout(np.array([0.6, 0.8, 1.0]))
        dist = RiemannDistribution(layout, torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64))
        assert acq_on_mean(dist, 0.5).item() == pytest.approx(0.2)
        assert acq_on_mean(dist, 0.9).item() == 0.0

    def test_on_mean_narrow_limit(self):
        layout = BucketLayout(np.array([0.7 - 1e-4, 0.7 + 1e-4, 0.7 + 2e-4]))
        dist = RiemannDistribution(layout, torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64))
        assert abs(acq_on_mean(dist, 0.5).item() - acq_ei(dist, 0.5).item()) < 1e-3

    def test_ei_gradient_finite(self, rng):
        layout = BucketLayout(np.linspace(-2, 2, 11))
        logits = torch.randn(5, 12, dtype=torch.float64, requires_grad=True)
        dist = RiemannDistribution.from_logits(layout, logits)
        f = torch.tensor([-5.0, -1.0, 0.0, 1.5, 5.0], dtype=torch.float64)
        acq_ei(dist, f).sum().backward()
        assert torch.all(torch.isfinite(logits.grad))
