import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from pfnbo.pfn import PfnConfig, PfnModel
from pfnbo.riemann import build_borders
from pfnbo.transforms import (
    WarpParams,
    fit_output_transform,
    fit_warp,
    from_unit_cube,
    kumaraswamy,
    kumaraswamy_inverse,
    to_unit_cube,
    warp_objective,
)


class TestKumaraswamy:
    def test_identity(self, rng):
        x = rng.random(100)
        np.testing.assert_allclose(kumaraswamy(x, 1.0, 1.0), x, atol=1e-15)

    def test_example(self):
        assert kumaraswamy(0.5, 1.0, 2.0) == pytest.approx(0.75)

    def test_round_trip(self, rng):
        x = rng.random(10_000)
        a = np.exp(rng.uniform(-0.5, 0.5, 10_000))
        b = np.exp(rng.uniform(-0.5, 0.5, 10_000))
        np.testing.assert_allclose(kumaraswamy_inverse(kumaraswamy(x, a, b), a, b), x, atol=1e-12, rtol=0)

    def test_round_trip_wide_parameters(self, rng):
        # strongly curved warps are flat somewhere; there the error is the
        # rounding of w magnified by dx/dw, which no formula can avoid
        x = rng.random(10_000)
        a = np.exp(rng.uniform(-2, 2, 10_000))
        b = np.exp(rng.uniform(-2, 2, 10_000))
        w = kumaraswamy(x, a, b)
        with np.errstate(divide="ignore", invalid="ignore"):
            dw_dx = a * b * x ** (a - 1) * (1 - x**a) ** (b - 1)
            bound = 1e-12 + 8 * np.finfo(float).eps * np.maximum(w, 1 - w) / dw_dx
        err = np.abs(kumaraswamy_inverse(w, a, b) - x)
        assert np.all(err <= np.nan_to_num(bound, nan=np.inf))

    def test_monotone(self, rng):
        x = np.sort(rng.random(1000))
        for a, b in [(0.3, 2.0), (3.0, 0.5), (1.0, 1.0)]:
            assert np.all(np.diff(kumaraswamy(x, a, b)) >= 0)

    def test_domain(self):
        with pytest.raises(ValueError):
            kumaraswamy(1.5, 1.0, 1.0)
        with pytest.raises(ValueError):
            kumaraswamy_inverse(-0.1, 1.0, 1.0)

    def test_torch_matches_numpy(self, rng):
        x = rng.random(50)
        np.testing.assert_allclose(kumaraswamy(torch.as_tensor(x), 0.7, 1.8).numpy(), kumaraswamy(x, 0.7, 1.8), atol=1e-12)

    def test_params_identity(self):
        p = WarpParams.identity(3)
        assert p.is_identity
        np.testing.assert_array_equal(p.apply(np.array([[0.1, 0.2, 0.3]])), [[0.1, 0.2, 0.3]])


class TestOutputTransform:
    def test_standardised(self, rng):
        y = rng.lognormal(size=200)
        t = fit_output_transform(y)
        z = t.apply(y)
        assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6

    def test_round_trip(self, rng):
        for y in (rng.lognormal(size=100), -rng.lognormal(size=100), rng.standard_normal(100), rng.standard_t(2, 100)):
            t = fit_output_transform(y)
            np.testing.assert_allclose(t.invert(t.apply(y)), y, atol=1e-9)

    def test_lambda_one_is_affine(self, rng):
        t = fit_output_transform(rng.standard_normal(50))
        t1 = type(t)(1.0, t.shift, t.scale, t.y_min, t.y_max)
        y = np.linspace(-3, 3, 13)
        z = t1.apply(y)
        np.testing.assert_allclose(np.diff(z, 2), 0, atol=1e-12)

    def test_reduces_skew(self, rng):
        y = rng.lognormal(sigma=1.0, size=500)
        t = fit_output_transform(y)
        assert abs(stats.skew(t.apply(y))) < abs(stats.skew(y))

    def test_lambda_within_bounds(self, rng):
        t = fit_output_transform(rng.lognormal(sigma=3.0, size=100))
        assert -2 <= t.lmbda <= 2

    def test_constant_is_identity(self):
        t = fit_output_transform(np.full(5, 3.0))
        assert t.lmbda is None
        np.testing.assert_array_equal(t.invert(t.apply(np.array([3.0, 4.0]))), [3.0, 4.0])


class TestUnitCube:
    def test_corners_and_midpoint(self):
        lo, hi = np.array([-1.0, 10.0]), np.array([1.0, 20.0])
        np.testing.assert_array_equal(to_unit_cube(lo, hi, lo), [0.0, 0.0])
        np.testing.assert_array_equal(to_unit_cube(lo, hi, (lo + hi) / 2), [0.5, 0.5])

    def test_round_trip(self, rng):
        lo = rng.uniform(-100, 0, 4)
        hi = lo + rng.uniform(0.1, 100, 4)
        x = lo + rng.random((10_000, 4)) * (hi - lo)
        np.testing.assert_allclose(from_unit_cube(lo, hi, to_unit_cube(lo, hi, x)), x, atol=1e-12, rtol=0)

    def test_degenerate_dimension(self, caplog):
        u = to_unit_cube(np.array([0.0, 2.0]), np.array([1.0, 2.0]), np.array([0.25, 2.0]))
        np.testing.assert_array_equal(u, [0.25, 0.5])
        assert "degenerate" in caplog.text

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.floats(0, 1))
    def test_inverse_property(self, lo, width, u):
        x = from_unit_cube(lo, lo + width, u)
        assert to_unit_cube(lo, lo + width, x) == pytest.approx(u, abs=1e-9)


def random_model(seed=0):
    cfg = PfnConfig(emsize=32, nlayers=2, nhead=2, capacity=2, num_buckets=20)
    torch.manual_seed(seed)
    return PfnModel(cfg, build_borders(np.random.default_rng(seed).standard_normal(2000), 20))


class TestFitWarp:
    def test_identity_objective_is_reevaluation_likelihood(self, rng):
        model = random_model()
        X = rng.uniform(0.01, 0.99, (10, 2))
        y = rng.standard_normal(10)
        val = warp_objective(model, X, y, torch.zeros(1, 2, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.float64))
        direct = model.predict(X, y, X).log_prob(torch.as_tensor(y)).sum()
        assert val.item() == pytest.approx(direct.item(), abs=1e-6)

    def test_never_worse_than_identity_and_bounded(self, rng):
        model = random_model(1)
        X = rng.random((12, 2)) ** 4
        y = np.sin(10 * X[:, 0])
        fit = fit_warp(model, X, y, restarts=3, steps=10, rng=rng)
        assert fit.objective >= fit.identity_objective
        assert np.all(np.abs(np.log(fit.params.a)) <= 4 + 1e-9)
        assert np.all(np.abs(np.log(fit.params.b)) <= 4 + 1e-9)
