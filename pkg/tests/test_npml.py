import math

import numpy as np
import pytest

from smd_npml.auxiliary import (
    AuxiliaryModel,
    floor_collapse_threshold,
    grid_min,
    is_member,
    random_feasible,
)
from smd_npml.errors import GradientUndefinedError, IntervalMismatchError, PreconditionError
from smd_npml.npml import (
    NpmlOptions,
    Sample,
    empirical_loglik,
    fit_npml,
    kkt_residual,
    loglik_gradient,
    score_at_maximizer,
)
from smd_npml.sobolev import Interval, SpectralFunction, UNIT_INTERVAL, sobolev_norm, sup_norm


def beta_sample(rng, n, a=2.0, b=3.0, interval=UNIT_INTERVAL):
    u = rng.beta(a, b, n)
    return Sample(interval.a + interval.length * u, interval)


class TestSample:
    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Sample([], UNIT_INTERVAL)

    @pytest.mark.parametrize("x", [0.0, 1.0, -0.2, math.nan])
    def test_points_strictly_inside(self, x):
        with pytest.raises(ValueError):
            Sample([0.5, x], UNIT_INTERVAL)

    def test_weights(self):
        s = Sample([0.2, 0.4, 0.6], UNIT_INTERVAL, [2.0, 0.0, 1.0])
        assert s.n == 3.0
        np.testing.assert_array_equal(s.points, [0.2, 0.6])
        np.testing.assert_allclose(s.normalized_weights, [2 / 3, 1 / 3])

    @pytest.mark.parametrize("w", [[1.0, -1.0], [0.0, 0.0], [1.0], [1.0, math.inf]])
    def test_bad_weights(self, w):
        with pytest.raises(ValueError):
            Sample([0.2, 0.4], UNIT_INTERVAL, w)


class TestLoglik:
    def test_uniform(self, shifted, rng):
        p = SpectralFunction.uniform_density(shifted, 3)
        s = beta_sample(rng, 20, interval=shifted)
        assert empirical_loglik(p, s) == pytest.approx(math.log(1 / 3))

    def test_minus_infinity(self):
        p = SpectralFunction(UNIT_INTERVAL, [1.0, 2.0])       # negative near x = 1
        assert empirical_loglik(p, Sample([0.5, 0.99], UNIT_INTERVAL)) == -math.inf

    def test_hand_arithmetic(self):
        p = SpectralFunction(UNIT_INTERVAL, [1.0, 0.3])
        s = Sample([0.25, 0.75], UNIT_INTERVAL)
        assert empirical_loglik(p, s) == pytest.approx(0.5 * (math.log(1.3) + math.log(0.7)), rel=1e-13)
        assert empirical_loglik(p, s) == pytest.approx(-0.047155, abs=1e-6)

    def test_weighted_equals_repeated(self, rng):
        p = SpectralFunction(UNIT_INTERVAL, [1.0, 0.2, -0.1])
        pts = rng.uniform(0.01, 0.99, 5)
        rep = Sample(np.repeat(pts, [1, 2, 3, 1, 1]), UNIT_INTERVAL)
        wtd = Sample(pts, UNIT_INTERVAL, [1, 2, 3, 1, 1])
        assert empirical_loglik(p, rep) == pytest.approx(empirical_loglik(p, wtd), rel=1e-14)

    def test_interval_mismatch(self):
        with pytest.raises(IntervalMismatchError):
            empirical_loglik(SpectralFunction(Interval(0, 2), [0.5]), Sample([0.5], UNIT_INTERVAL))


class TestGradient:
    def test_uniform_component(self, rng):
        g = loglik_gradient(SpectralFunction.uniform_density(UNIT_INTERVAL, 4), beta_sample(rng, 10))
        assert g[0] == pytest.approx(1.0)

    def test_finite_differences(self, shifted, rng):
        for _ in range(10):
            c = np.concatenate([[1 / math.sqrt(3)], 0.02 * rng.standard_normal(8)])
            p = SpectralFunction(shifted, c)
            s = beta_sample(rng, 50, interval=shifted)
            g = loglik_gradient(p, s)
            h = 1e-6
            for j in range(c.size):
                e = np.zeros_like(c)
                e[j] = h
                fd = (empirical_loglik(SpectralFunction(shifted, c + e), s)
                      - empirical_loglik(SpectralFunction(shifted, c - e), s)) / (2 * h)
                assert abs(fd - g[j]) <= 1e-5 * max(1.0, abs(g[j]))

    def test_direction_two_paths(self, rng):
        p = SpectralFunction(UNIT_INTERVAL, [1.0, 0.1, 0.05])
        s = beta_sample(rng, 40)
        gfun = SpectralFunction(UNIT_INTERVAL, [0.0, 0.3, -0.7])
        direct = s.mean(gfun(s.points) / p(s.points))
        assert loglik_gradient(p, s) @ gfun.coeffs == pytest.approx(direct, rel=1e-13)

    def test_undefined(self):
        p = SpectralFunction(UNIT_INTERVAL, [1.0, 2.0])
        with pytest.raises(GradientUndefinedError):
            loglik_gradient(p, Sample([0.5, 0.99], UNIT_INTERVAL))


def _brute_force_tiny(m, s, step=1e-3):
    """Exhaustive search over the J=2 free-coefficient disc.

    The disc lives in the scaled coordinates ``z_j = w_j**0.5 * a_j`` where
    the Sobolev ball is round; a second pass scans its boundary circle.
    """
    sw = np.sqrt(m.weights[1:])
    R = m.free_radius
    B = np.column_stack([np.ones_like(s.points), math.sqrt(2) * np.cos(np.pi * s.points),
                         math.sqrt(2) * np.cos(2 * np.pi * s.points)])
    axis = np.arange(-R, R + step, step)

    def best(z):
        c = np.column_stack([np.full(len(z), m.a0), z / sw])
        vals = c @ B.T
        ok = (vals > 0).all(axis=1)
        ll = np.full(len(z), -np.inf)
        ll[ok] = np.log(vals[ok]).mean(axis=1)
        k = int(np.argmax(ll))
        return c[k], ll[k]

    top = (None, -np.inf)
    for z1 in axis:
        z2 = axis[z1**2 + axis**2 <= R**2]
        cand = best(np.column_stack([np.full(z2.size, z1), z2])) if z2.size else top
        if cand[1] > top[1]:
            top = cand
    phi = np.linspace(0, 2 * math.pi, 200_000, endpoint=False)
    ring = best(R * np.column_stack([np.cos(phi), np.sin(phi)]))
    return top, ring


class TestFitTinyOracle:
    @pytest.mark.parametrize("pts", [[0.1, 0.15, 0.8], [0.3, 0.5, 0.55], [0.05, 0.5, 0.95]])
    def test_matches_exhaustive_grid(self, pts):
        m = AuxiliaryModel(UNIT_INTERVAL, t=2.0, zeta=0.0, D=1.5, J=2)
        s = Sample(pts, UNIT_INTERVAL)
        fit = fit_npml(m, s)
        (grid_c, grid_ll), (ring_c, ring_ll) = _brute_force_tiny(m, s)
        np.testing.assert_allclose(fit.density.coeffs, grid_c, atol=2e-3)
        np.testing.assert_allclose(fit.density.coeffs, ring_c, atol=1e-4)
        assert fit.loglik >= max(grid_ll, ring_ll) - 1e-10


class TestFitProperties:
    def test_sphere_and_membership(self, model, rng):
        for _ in range(10):
            s = beta_sample(rng, 200)
            fit = fit_npml(model, s)
            assert fit.converged
            assert fit.sphere_residual / model.D < 1e-4
            assert is_member(model, fit.density, tol=1e-6)
            assert np.all(fit.density(s.points) > 0)
            assert fit.loglik >= empirical_loglik(model.uniform(), s)
            assert fit.kkt_residual < 1e-6

    def test_loglik_consistent(self, model, rng):
        s = beta_sample(rng, 100)
        fit = fit_npml(model, s)
        assert fit.loglik == pytest.approx(empirical_loglik(fit.density, s), rel=1e-12)

    def test_random_starts_agree(self, model, rng):
        s = beta_sample(rng, 200)
        ref = fit_npml(model, s)
        for _ in range(10):
            fit = fit_npml(model, s, NpmlOptions(start=random_feasible(model, rng)))
            assert sup_norm(fit.density - ref.density) < 1e-4

    def test_kkt_detects_non_optimal(self, model, rng):
        s = beta_sample(rng, 200)
        assert kkt_residual(model, s, model.uniform().coeffs) > 1e-3

    def test_floor_inactive_below_threshold(self, rng):
        m0 = AuxiliaryModel(UNIT_INTERVAL, t=2.0, zeta=0.0, D=1.1, J=12)
        thr = floor_collapse_threshold(m0)
        assert thr > 0
        s = beta_sample(rng, 150)
        a = fit_npml(m0, s)
        b = fit_npml(m0.with_(zeta=0.9 * thr), s)
        np.testing.assert_allclose(a.density.coeffs, b.density.coeffs, atol=1e-6)

    def test_weighted_sample_equals_repeated(self, model, rng):
        pts = rng.uniform(0.05, 0.95, 30)
        counts = rng.integers(1, 4, 30)
        a = fit_npml(model, Sample(np.repeat(pts, counts), UNIT_INTERVAL))
        b = fit_npml(model, Sample(pts, UNIT_INTERVAL, counts))
        np.testing.assert_allclose(a.density.coeffs, b.density.coeffs, atol=1e-8)

    def test_interval_mismatch(self, model):
        with pytest.raises(IntervalMismatchError):
            fit_npml(model, Sample([0.5], Interval(0, 2)))


class TestFloorBinding:
    """Data piled up at one end force the floor constraint to bind."""

    @pytest.fixture
    def setup(self, rng):
        m = AuxiliaryModel(UNIT_INTERVAL, t=2.0, zeta=0.5, D=6.0, J=12, M=128)
        s = Sample(rng.beta(1.0, 6.0, 150) * 0.999 + 0.0005, UNIT_INTERVAL)
        return m, s

    def test_floor_active_member(self, setup):
        m, s = setup
        fit = fit_npml(m, s)
        assert fit.floor_active
        assert grid_min(m, fit.density) == pytest.approx(m.zeta, abs=1e-6)
        assert is_member(m, fit.density, tol=1e-6)
        assert fit.kkt_residual < 1e-4

    def test_matches_conic_solver(self, setup):
        cp = pytest.importorskip("cvxpy")
        m, s = setup
        fit = fit_npml(m, s)
        from smd_npml.sobolev import cosine_basis
        B = cosine_basis(m.interval, s.points, m.J)
        x = cp.Variable(m.J + 1)
        prob = cp.Problem(cp.Maximize(cp.sum(cp.log(B @ x)) / s.points.size),
                          [x[0] == m.a0, cp.sum_squares(cp.multiply(np.sqrt(m.weights), x)) <= m.D**2,
                           m.grid_basis @ x >= m.zeta])
        prob.solve()
        ref = SpectralFunction(m.interval, x.value)
        assert fit.loglik >= empirical_loglik(ref, s) - 1e-6
        assert sup_norm(fit.density - ref) < 1e-2

    def test_pga_agrees_loosely(self, setup):
        m, s = setup
        newton = fit_npml(m, s)
        pga = fit_npml(m, s, NpmlOptions(method="pga", max_iter=3000))
        assert pga.loglik <= newton.loglik + 1e-9
        assert pga.loglik >= newton.loglik - 1e-3


class TestProjectedGradient:
    def test_monotone_in_budget(self, model, rng):
        s = beta_sample(rng, 80)
        values = [fit_npml(model, s, NpmlOptions(method="pga", max_iter=k)).loglik
                  for k in (1, 5, 25, 125)]
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
        assert values[0] >= empirical_loglik(model.uniform(), s)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            NpmlOptions(method="bfgs")


class TestScore:
    def test_zero_function(self, model, rng):
        s = beta_sample(rng, 100)
        fit = fit_npml(model, s)
        assert score_at_maximizer(fit, s, [SpectralFunction(UNIT_INTERVAL, [0.0])]) == 0.0

    def test_requires_mean_zero(self, model, rng):
        s = beta_sample(rng, 50)
        fit = fit_npml(model, s)
        with pytest.raises(PreconditionError):
            score_at_maximizer(fit, s, [SpectralFunction(UNIT_INTERVAL, [0.1, 1.0])])

    def test_two_paths(self, model, rng):
        s = beta_sample(rng, 120)
        fit = fit_npml(model, s)
        g = fit.density - model.uniform()
        grad = loglik_gradient(fit.density, s)
        assert score_at_maximizer(fit, s, [g]) == pytest.approx(abs(grad @ g.coeffs), rel=1e-12)

    def test_first_order_condition_shrinks_with_n(self, rng):
        tests = [SpectralFunction(UNIT_INTERVAL, np.eye(4)[j]) for j in (1, 2, 3)]
        med = []
        for n in (200, 3200):
            m = AuxiliaryModel(UNIT_INTERVAL, 2.0, 0.1, 8.0, 24)
            vals = []
            for _ in range(15):
                s = beta_sample(rng, n, 2.0, 2.0)
                vals.append(score_at_maximizer(fit_npml(m, s), s, tests))
            med.append(np.median(vals))
        assert med[1] < med[0]
