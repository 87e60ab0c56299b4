import numpy as np
import pytest

from conftest import central_diff_jacobian
from sqgmm.model import Dataset, linear_residual_model
from sqgmm.moments import (
    MomentContext,
    moment_contributions,
    moment_jacobian,
    smoothed_moments,
    smoothed_moments_and_jacobian,
    unsmoothed_moments,
)
from sqgmm.smoothing import smoothed_indicator, smoothed_indicator_deriv

INTERCEPT_ONLY = linear_residual_model(0, (), (0,))


def intercept_ctx(y_values, tau=0.5, h=0.1, z=None):
    y = np.asarray(y_values, dtype=float)[:, None]
    n = y.shape[0]
    x = np.ones((n, 1))
    zmat = x if z is None else np.column_stack([np.asarray(zi, float) for zi in z]).reshape(n, -1)
    mapping = (0,) if z is None else tuple()
    ds = Dataset(y, x, zmat, mapping if zmat.shape[1] >= x.shape[1] else ())
    return MomentContext(ds, INTERCEPT_ONLY, tau, h)


def two_col_ctx(n=40, tau=0.3, h=0.2, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=n)
    y = 1.0 + 0.5 * d + rng.normal(size=n)
    zcol = d + rng.normal(size=n)
    ds = Dataset(
        np.column_stack([y, d]),
        np.ones((n, 1)),
        np.column_stack([np.ones(n), zcol]),
        (0,),
    )
    model = linear_residual_model(0, (1,), (0,))
    return MomentContext(ds, model, tau, h)


class TestValidation:
    def test_tau_range(self):
        ds = Dataset(np.ones((3, 1)), np.ones((3, 1)), np.ones((3, 1)), (0,))
        with pytest.raises(ValueError):
            MomentContext(ds, INTERCEPT_ONLY, 0.0, 0.1)
        with pytest.raises(ValueError):
            MomentContext(ds, INTERCEPT_ONLY, 1.0, 0.1)

    def test_bandwidth_positive(self):
        ds = Dataset(np.ones((3, 1)), np.ones((3, 1)), np.ones((3, 1)), (0,))
        with pytest.raises(ValueError):
            MomentContext(ds, INTERCEPT_ONLY, 0.5, 0.0)
        with pytest.raises(ValueError):
            MomentContext(ds, INTERCEPT_ONLY, 0.5, -1.0)

    def test_tiny_bandwidth_clamped_with_warning(self):
        ds = Dataset(np.ones((3, 1)), np.ones((3, 1)), np.ones((3, 1)), (0,))
        with pytest.warns(RuntimeWarning):
            ctx = MomentContext(ds, INTERCEPT_ONLY, 0.5, 1e-15)
        assert ctx.bandwidth == 1e-12

    def test_more_parameters_than_instruments(self):
        ds = Dataset(np.ones((3, 2)), np.ones((3, 1)), np.ones((3, 1)), (0,))
        model = linear_residual_model(0, (1,), (0,))
        with pytest.raises(ValueError):
            MomentContext(ds, model, 0.5, 0.1)

    def test_beta_dimension_mismatch(self):
        ctx = two_col_ctx()
        with pytest.raises(ValueError):
            smoothed_moments(ctx, np.zeros(5))


class TestMomentValues:
    def test_all_residuals_deep_negative(self):
        # Residual y - beta = -2h everywhere puts the smoothed step on its
        # upper plateau, so the moment equals (1 - tau) * mean(Z).
        tau, h = 0.3, 0.05
        ctx = two_col_ctx(tau=tau, h=h)
        y0 = ctx.dataset.y[:, 0]
        d = ctx.dataset.y[:, 1]
        # Choose slope 0 and intercept so that residuals are exactly -2h.
        ds = Dataset(
            np.column_stack([np.full_like(y0, -2 * h), d]),
            ctx.dataset.x,
            ctx.dataset.z,
            (0,),
        )
        ctx2 = MomentContext(ds, ctx.model, tau, h)
        got = smoothed_moments(ctx2, np.array([0.0, 0.0]))
        expected = (1 - tau) * ctx.dataset.z.mean(axis=0)
        assert np.allclose(got, expected, rtol=1e-14)

    def test_all_residuals_deep_positive(self):
        tau, h = 0.3, 0.05
        ctx = two_col_ctx(tau=tau, h=h)
        d = ctx.dataset.y[:, 1]
        ds = Dataset(
            np.column_stack([np.full(ctx.dataset.n, 2 * h), d]),
            ctx.dataset.x,
            ctx.dataset.z,
            (0,),
        )
        ctx2 = MomentContext(ds, ctx.model, tau, h)
        got = smoothed_moments(ctx2, np.array([0.0, 0.0]))
        assert np.allclose(got, -tau * ctx.dataset.z.mean(axis=0), rtol=1e-14)

    def test_three_point_hand_computation(self):
        # One residual exactly at zero contributes the half step.
        tau, h = 0.25, 0.1
        ctx = intercept_ctx([0.0, -1.0, 1.0], tau=tau, h=h)
        got = smoothed_moments(ctx, np.array([0.0]))
        expected = ((0.5 - tau) + (1.0 - tau) + (0.0 - tau)) / 3.0
        assert got[0] == pytest.approx(expected, rel=1e-14)

    def test_unsmoothed_plateaus(self):
        tau = 0.4
        ctx = intercept_ctx([-3.0, -1.0, -0.5], tau=tau)
        assert unsmoothed_moments(ctx, np.array([0.0]))[0] == pytest.approx(1 - tau)
        ctx = intercept_ctx([3.0, 1.0, 0.5], tau=tau)
        assert unsmoothed_moments(ctx, np.array([0.0]))[0] == pytest.approx(-tau)

    def test_smoothed_equals_unsmoothed_outside_window(self):
        # When no residual lies within the bandwidth window the smoothing has
        # no effect at all.
        ctx = two_col_ctx(h=1e-6)
        beta = np.array([0.2, 0.1])
        resid = ctx.model.residuals(ctx.dataset, beta)
        assert np.all(np.abs(resid) > ctx.bandwidth)
        sm = smoothed_moments(ctx, beta)
        un = unsmoothed_moments(ctx, beta)
        assert np.array_equal(sm, un)

    def test_boundedness(self):
        ctx = two_col_ctx()
        rng = np.random.default_rng(1)
        zmax = np.abs(ctx.dataset.z).max(axis=0)
        for _ in range(20):
            beta = rng.uniform(-10, 10, 2)
            m = smoothed_moments(ctx, beta)
            assert np.all(np.isfinite(m))
            assert np.all(np.abs(m) <= (2 + ctx.tau) * zmax)

    def test_smoothing_perturbation_bound(self):
        # Smoothing only moves in-window observations, each by at most 3.
        ctx = two_col_ctx(h=0.4)
        rng = np.random.default_rng(4)
        for _ in range(25):
            beta = rng.uniform(-2, 2, 2)
            resid = ctx.model.residuals(ctx.dataset, beta)
            in_window = np.abs(resid) <= ctx.bandwidth
            bound = 3.0 / ctx.dataset.n * np.linalg.norm(
                ctx.dataset.z[in_window], axis=1
            ).sum()
            diff = np.linalg.norm(
                smoothed_moments(ctx, beta) - unsmoothed_moments(ctx, beta)
            )
            assert diff <= bound + 1e-12


class TestJacobian:
    def test_zero_outside_window(self):
        ctx = two_col_ctx(h=1e-8)
        beta = np.array([0.3, -0.4])
        resid = ctx.model.residuals(ctx.dataset, beta)
        assert np.all(np.abs(resid) > ctx.bandwidth)
        assert np.array_equal(moment_jacobian(ctx, beta), np.zeros((2, 2)))

    def test_two_point_hand_computation(self):
        # Intercept-only model, two observations: the single Jacobian entry
        # is the average kernel-derivative weight over the bandwidth.
        h = 0.5
        y = [0.1, -0.2]
        ctx = intercept_ctx(y, tau=0.5, h=h)
        beta = np.array([0.0])
        expected = (
            smoothed_indicator_deriv(-0.1 / h) * 1.0
            + smoothed_indicator_deriv(0.2 / h) * 1.0
        ) / (2 * h)
        got = moment_jacobian(ctx, beta)
        assert got.shape == (1, 1)
        # gradient of the residual in the intercept is -1, so the entry is
        # +average/h
        assert got[0, 0] == pytest.approx(expected, rel=1e-14)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        for trial in range(10):
            ctx = two_col_ctx(n=60, tau=0.4, h=rng.uniform(0.2, 0.8), seed=trial)
            beta = rng.uniform(-1, 1, 2)
            an = moment_jacobian(ctx, beta)
            fd = central_diff_jacobian(lambda b: smoothed_moments(ctx, b), beta)
            assert np.allclose(an, fd, rtol=1e-6, atol=1e-9)

    def test_single_pass_agrees(self):
        ctx = two_col_ctx()
        beta = np.array([0.1, 0.2])
        m, j = smoothed_moments_and_jacobian(ctx, beta)
        assert np.array_equal(m, smoothed_moments(ctx, beta))
        assert np.array_equal(j, moment_jacobian(ctx, beta))


class TestContinuity:
    def test_small_beta_perturbation(self):
        ctx = two_col_ctx(h=0.3)
        beta = np.array([0.5, -0.2])
        base = smoothed_moments(ctx, beta)
        for eps in (1e-4, 1e-6):
            moved = smoothed_moments(ctx, beta + eps)
            assert np.linalg.norm(moved - base) < 50 * eps


class TestContributions:
    def test_rows_average_to_moments(self):
        ctx = two_col_ctx()
        beta = np.array([0.7, 0.1])
        g = moment_contributions(ctx, beta)
        assert g.shape == (ctx.dataset.n, ctx.dataset.d_z)
        assert np.allclose(g.mean(axis=0), smoothed_moments(ctx, beta), rtol=1e-12)

    def test_half_step_at_zero_residual(self):
        ctx = intercept_ctx([0.0], tau=0.25)
        g = moment_contributions(ctx, np.array([0.0]))
        assert g[0, 0] == pytest.approx(smoothed_indicator(0.0) - 0.25)
