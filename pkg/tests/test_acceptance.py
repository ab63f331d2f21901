"""End-to-end acceptance criteria at their stated tolerances.

Each test prints one ``CRITERION <k>: PASS|FAIL`` line straight to the
terminal (bypassing capture) before asserting, so a ``pytest -v`` log
carries the verdicts.  The heavy Monte Carlo runs are module-scoped and
shared between criteria that read the same report.  Set
``SMD_NPML_THREADS`` to spread replications over several processes; the
rows do not depend on the worker count.
"""

import math
import os
import time

import numpy as np
import pytest

from smd_npml.auxiliary import AuxiliaryModel
from smd_npml.families import fisher_information, make_exp_tilt_family
from smd_npml.harness import ExperimentConfig, run_experiment
from smd_npml.npml import Sample, empirical_loglik, fit_npml, loglik_gradient
from smd_npml.smd import Q_n, Q_pop, ObjectiveContext, d2Q_n, dQ_n
from smd_npml.sobolev import (
    UNIT_INTERVAL,
    Interval,
    SpectralFunction,
    gauss_legendre,
    integrate,
    inner_product_weighted,
    sobolev_norm,
)
from test_npml import _brute_force_tiny

THREADS = int(os.environ.get("SMD_NPML_THREADS") or os.cpu_count() or 1)

TRUTH = {"coeffs": [1.0, 0.3, 0.1, 0.03]}
DESK_MODEL = {"t": 2.0, "zeta": 0.1, "D": 8.0}
N_LADDER = (200, 800, 3200)
K_400 = math.ceil(400**2 * math.log(400))


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} -- {detail}", flush=True)
    assert ok, detail


def timed(cfg):
    t0 = time.perf_counter()
    rep = run_experiment(cfg, THREADS)
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="module")
def sphere_report():
    return timed(ExperimentConfig("sphere", true_density=TRUTH, model=DESK_MODEL, n_list=(200,),
                                  replications=100, random_starts=10, master_seed=1001))


@pytest.fixture(scope="module")
def rates_report():
    return timed(ExperimentConfig("rates", true_density=TRUTH, model=DESK_MODEL, n_list=N_LADDER,
                                  replications=30, uniform_D=12.0, master_seed=1003))


@pytest.fixture(scope="module")
def donsker_report():
    return timed(ExperimentConfig("donsker", true_density=TRUTH, model=DESK_MODEL,
                                  n_list=N_LADDER, replications=50, master_seed=1005))


@pytest.fixture(scope="module")
def efficiency_report():
    return timed(ExperimentConfig("efficiency", family="exp_tilt", true_theta=(1.0, -0.5),
                                  model={"t": 2.0, "zeta": 0.1, "D": EFFICIENCY_D},
                                  n_list=(400,), k_mode="custom", k=K_400, replications=200,
                                  master_seed=1008))


@pytest.fixture(scope="module")
def misspec_report():
    return timed(ExperimentConfig("misspec", family="exp_tilt",
                                  true_density={"family": "mixture_misspec"},
                                  theta_box=((-5.0, 5.0), (-5.0, 5.0)),
                                  model={"t": 2.0, "zeta": 0.1, "D": MISSPEC_D},
                                  n_list=(400,), k_mode="custom", k=K_400, replications=200,
                                  sqrt_lemma=False, master_seed=1009))


EFFICIENCY_D = 16.0
MISSPEC_D = 24.0


class TestAcceptance:
    def test_criterion_01_sphere(self, sphere_report, capsys):
        rep, wall = sphere_report
        s, a = rep.summary, rep.summary["assertions"]
        ok = a["sphere_ratio"] and a["convergence_rate"] and wall < 60
        verdict(capsys, 1, ok, f"max sphere ratio {s['max_sphere_ratio']:.2e} < 1e-4, "
                f"converged {s['convergence_rate']:.0%} (>= 99%), {wall:.0f}s")

    def test_criterion_02_uniqueness(self, sphere_report, capsys):
        rep, wall = sphere_report
        s = rep.summary
        ok = s["random_starts"] == 10 and rep.summary["assertions"]["uniqueness"]
        verdict(capsys, 2, ok, f"{s['random_starts']} random starts agree to "
                f"{s['max_start_disagreement']:.1e} sup-norm (< 1e-4)")

    def test_criterion_03_l2_rate(self, rates_report, capsys):
        rep, wall = rates_report
        s, a = rep.summary, rep.summary["assertions"]
        slope = s["slope_l2"]["slope"]
        ok = a["l2_slope_in_window"] and -0.55 <= slope <= -0.25
        verdict(capsys, 3, ok, f"median L2 log-log slope {slope:.3f} in [-0.55, -0.25] "
                f"(target -0.4), rates+uniform {wall:.0f}s")

    def test_criterion_04_uniform_rate(self, rates_report, capsys):
        rep, wall = rates_report
        u, a = rep.summary["uniform"], rep.summary["assertions"]
        ok = a["uniform_decreasing"] and a["uniform_slope_in_window"] and a["uniform_t_error_bounded"]
        meds = ", ".join(f"{m:.4f}" for m in u["median_sup_l2"])
        verdict(capsys, 4, ok, f"median sup-theta L2 error [{meds}], slope {u['slope']['slope']:.3f}, "
                f"max t-norm error {u['max_t_error']:.2f} <= {u['t_error_bound']:.0f}")

    def test_criterion_05_donsker(self, donsker_report, capsys):
        rep, wall = donsker_report
        a = rep.summary["assertions"]
        gaps = [v["median_gap"] for v in rep.summary["per_n"].values()]
        ok = a["gap_medians_decreasing"] and a["moment_bands"] and wall < 300
        verdict(capsys, 5, ok, f"median gaps {', '.join(f'{g:.4f}' for g in gaps)} decreasing; "
                f"moment bands {'ok' if a['moment_bands'] else 'violated'}; {wall:.0f}s")

    def test_criterion_06_score(self, donsker_report, capsys):
        rep, wall = donsker_report
        a = rep.summary["assertions"]
        slope = rep.summary["score_slope"]["slope"]
        ok = a["score_slope"] and a["score_medians_decreasing"]
        verdict(capsys, 6, ok, f"median score log-log slope {slope:.3f} <= -0.3")

    def test_criterion_07_fisher(self, capsys):
        rep, wall = timed(ExperimentConfig("fisher-check", master_seed=1007))
        worst = rep.summary["max_relative_error"]
        ok = rep.summary["grid_points"] == 9 and worst < 1e-6 and wall < 10
        verdict(capsys, 7, ok, f"I = J = Fisher at 9 grid points, worst relative {worst:.1e}, "
                f"{wall:.2f}s")

    def test_criterion_08_efficiency(self, efficiency_report, capsys):
        rep, wall = efficiency_report
        s = rep.summary
        cov = s["coverage_per_coordinate"]
        ok = s["frobenius_relative"] <= 0.20 and all(0.90 <= c <= 0.99 for c in cov)
        verdict(capsys, 8, ok, f"Frobenius-relative {s['frobenius_relative']:.3f} <= 0.20 vs "
                f"inverse Fisher; coverage {cov} in [0.90, 0.99]; k={s['k']}, {wall / 60:.1f} min")

    def test_criterion_09_misspecified(self, misspec_report, capsys):
        rep, wall = misspec_report
        s = rep.summary
        val = s["standardized_frobenius"]
        ok = val <= 0.25
        verdict(capsys, 9, ok, f"standardized covariance Frobenius-relative {val:.3f} <= 0.25 vs "
                f"sandwich at theta* {np.round(s['theta_star'], 4).tolist()}, {wall / 60:.1f} min")

    def test_criterion_10_sqrt_lemma(self, efficiency_report, capsys):
        rep, wall = efficiency_report
        sq = rep.summary["sqrt_lemma"]
        ok = sq["certified"] > 0 and sq["violations"] == 0
        verdict(capsys, 10, ok, f"bound holds in {sq['certified'] - sq['violations']}/"
                f"{sq['certified']} certified replications ({sq['checked']} checked)")

    def test_criterion_11_oracles(self, capsys):
        t0 = time.perf_counter()
        rng = np.random.default_rng(1011)
        failures = []

        # tiny NPML instance against exhaustive search
        m = AuxiliaryModel(UNIT_INTERVAL, t=2.0, zeta=0.0, D=1.5, J=2)
        for pts in ([0.1, 0.15, 0.8], [0.3, 0.5, 0.55]):
            s = Sample(pts, UNIT_INTERVAL)
            fit = fit_npml(m, s)
            (grid_c, _), _ = _brute_force_tiny(m, s)
            if np.abs(fit.density.coeffs - grid_c).max() > 2e-3:
                failures.append(f"tiny oracle at {pts}")

        # log-likelihood gradient
        iv = Interval(-1.0, 2.0)
        c = np.concatenate([[1 / math.sqrt(3)], 0.02 * rng.standard_normal(8)])
        s = Sample(iv.a + iv.length * rng.beta(2, 3, 60), iv)
        g = loglik_gradient(SpectralFunction(iv, c), s)
        h = 1e-6
        for j in range(c.size):
            e = np.zeros_like(c)
            e[j] = h
            fd = (empirical_loglik(SpectralFunction(iv, c + e), s)
                  - empirical_loglik(SpectralFunction(iv, c - e), s)) / (2 * h)
            if abs(fd - g[j]) > 1e-5 * max(1.0, abs(g[j])):
                failures.append(f"loglik gradient {j}")

        # family and objective derivatives
        fam = make_exp_tilt_family()
        phat = SpectralFunction.from_callable(lambda x: 1 + 0.3 * np.cos(np.pi * x), UNIT_INTERVAL, 8)
        aux = AuxiliaryModel(UNIT_INTERVAL, 2.0, 0.1, 8.0, 8)

        class _Fit:
            density = phat
        ctx = ObjectiveContext(_Fit(), aux, n=100)
        for th in rng.uniform(-2.5, 2.5, (10, 2)):
            gd, H = dQ_n(ctx, th, fam), d2Q_n(ctx, th, fam)
            d1 = fam.dtheta(np.array([0.3]), th)[0]
            for i in range(2):
                e = np.zeros(2)
                e[i] = 1e-5
                fd = (Q_n(ctx, th + e, fam) - Q_n(ctx, th - e, fam)) / 2e-5
                fdH = (dQ_n(ctx, th + e, fam) - dQ_n(ctx, th - e, fam)) / 2e-5
                fdp = (fam.density(np.array([0.3]), th + e) - fam.density(np.array([0.3]), th - e))[0] / 2e-5
                if abs(fd - gd[i]) > 1e-5 * max(1.0, abs(gd[i])):
                    failures.append("dQ_n")
                if np.abs(fdH - H[:, i]).max() > 1e-5 * max(1.0, np.abs(H).max()):
                    failures.append("d2Q_n")
                if abs(fdp - d1[i]) > 1e-5 * max(1.0, abs(d1[i])):
                    failures.append("dtheta")

        # quadrature identities
        rule = gauss_legendre(iv, 64)
        for deg in range(0, 127, 9):
            exact = (2.0 ** (deg + 1) - (-1.0) ** (deg + 1)) / (deg + 1)
            if abs(rule(rule.nodes**deg) - exact) > 1e-10 * max(1.0, abs(exact)):
                failures.append(f"Gauss-Legendre degree {deg}")
        for _ in range(20):
            f = SpectralFunction(iv, rng.standard_normal(12))
            gfn = SpectralFunction(iv, rng.standard_normal(7))
            if abs(inner_product_weighted(f, gfn, 1.0, rule) - float(f.coeffs[:7] @ gfn.coeffs)) > 1e-12:
                failures.append("Parseval inner product")
            if abs(sobolev_norm(f, 0.0) ** 2 - float(f.coeffs @ f.coeffs)) > 1e-10:
                failures.append("Parseval norm")
            if abs(integrate(f) - f.coeffs[0] * math.sqrt(iv.length)) > 1e-12:
                failures.append("integrate")
        if abs(Q_pop(fam, lambda x: 1.0, [1.0, 0.0]) - ((math.e**2 - 1) / (2 * (math.e - 1) ** 2) - 1)) > 1e-12:
            failures.append("Q_pop closed form")
        F = fisher_information(fam, [0.0, 0.0])
        if np.abs(F - [[1 / 12, 1 / 12], [1 / 12, 4 / 45]]).max() > 1e-8:
            failures.append("Fisher at zero")

        wall = time.perf_counter() - t0
        ok = not failures and wall < 60
        verdict(capsys, 11, ok, f"tiny oracle, finite differences and quadrature identities "
                f"({'all match' if not failures else ', '.join(sorted(set(failures)))}), {wall:.0f}s")

    def test_efficiency_estimates_centred(self, efficiency_report):
        # mean of sqrt(n)(theta_hat - theta0) within 3 Monte Carlo standard errors
        s = efficiency_report[0].summary
        mean = np.asarray(s["mean_z"])
        se = np.sqrt(np.diag(s["mc_covariance"]) / s["replications"])
        assert np.all(np.abs(mean) <= 3.0 * se), (mean, se)
