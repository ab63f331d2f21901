import json

import numpy as np
import pytest

from smd_npml.errors import ConfigError, ReportError
from smd_npml.families import make_exp_tilt_family, mixture_density
from smd_npml.harness import (
    ROW_FIELDS,
    THREADS_ENV,
    ExperimentConfig,
    ReportRow,
    emit_report,
    frobenius_relative,
    load_config,
    loglog_slope,
    moment_bands,
    pseudo_true_theta,
    read_rows,
    recheck,
    relative_entry_error,
    resolve_threads,
    resolve_truth,
    rows_to_csv,
    run_experiment,
    strictly_decreasing,
)

TRUTH = {"coeffs": [1.0, 0.3, 0.1, 0.03]}


def sphere_cfg(**kw):
    base = dict(experiment="sphere", true_density=TRUTH, model={"D": 8.0}, n_list=(60,),
                replications=3, random_starts=3, master_seed=7)
    base.update(kw)
    return ExperimentConfig(**base)


def estimation_cfg(**kw):
    base = dict(experiment="efficiency", true_theta=(1.0, -0.5), model={"D": 8.0}, n_list=(80,),
                k_mode="custom", k=800, replications=3, grid_per_axis=5, master_seed=9,
                sqrt_lemma=False)
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_round_trip(self):
        cfg = estimation_cfg()
        again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
        assert again == cfg
        assert cfg.to_dict()["schema"] == 1

    def test_load(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(sphere_cfg().to_json())
        assert load_config(p) == sphere_cfg()
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(p)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.json")

    @pytest.mark.parametrize("bad", [
        {"schema": 2, "experiment": "sphere"},
        {"schema": 1},
        {"schema": 1, "experiment": "sphere", "true_density": TRUTH, "colour": "red"},
    ])
    def test_from_dict_rejects(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    @pytest.mark.parametrize("kw", [
        {"experiment": "bogus"},
        {"family": "gamma"},
        {"n_list": (200, 100)},
        {"n_list": ()},
        {"replications": 0},
        {"k_mode": "custom", "k": None},
        {"k_mode": "cubic"},
        {"true_density": {"family": "exp_tilt", "coeffs": [1]}},
        {"true_density": None},
        {"model": {"D": -1.0}},
        {"model": {"thickness": 2}},
    ])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            estimation_cfg(**kw) if "true_density" not in kw else sphere_cfg(**kw)

    def test_specification_rules(self):
        with pytest.raises(ConfigError):
            ExperimentConfig("misspec", true_theta=(0.0, 0.0))
        with pytest.raises(ConfigError):
            ExperimentConfig("efficiency", true_density={"family": "mixture_misspec"})
        with pytest.raises(ConfigError):
            ExperimentConfig("rates", true_theta=(0.0, 0.0), true_density=TRUTH)

    def test_defaults(self):
        assert estimation_cfg().cov_tolerance == 0.20
        assert ExperimentConfig("misspec", true_density={"family": "mixture_misspec"}).cov_tolerance == 0.25
        assert sphere_cfg().conv_floor == 0.99
        assert estimation_cfg().k_for(80) == 800


class TestTruth:
    def test_member(self):
        truth = resolve_truth(estimation_cfg())
        assert truth.member
        fam = make_exp_tilt_family()
        # the cosine representation converges slowly only at the endpoints
        x = np.linspace(0.05, 0.95, 7)
        np.testing.assert_allclose(truth.spectral(x), fam.density(x, [1.0, -0.5]), atol=1e-4)

    def test_outside_box(self):
        with pytest.raises(ConfigError):
            resolve_truth(estimation_cfg(true_theta=(5.0, 0.0)))

    def test_unnormalized(self):
        with pytest.raises(ConfigError):
            resolve_truth(sphere_cfg(true_density={"coeffs": [2.0]}))

    def test_draw_reproducible(self):
        truth = resolve_truth(sphere_cfg())
        a, b = truth.draw(1, 50, 2), truth.draw(1, 50, 2)
        np.testing.assert_array_equal(a.points, b.points)
        assert not np.array_equal(a.points, truth.draw(1, 50, 3).points)


class TestRows:
    def test_header_only(self):
        text = rows_to_csv([])
        assert text == ",".join(ROW_FIELDS) + "\r\n"

    def test_round_trip(self, tmp_path):
        row = ReportRow("sphere", 100, 0, 2, 7, 0, -1, [0.1, 1 / 3], err_l2=1 / 7,
                        converged=False, diagnostics={"b": np.float64(2.5), "a": [1, 2]})
        p = tmp_path / "r.csv"
        p.write_text(rows_to_csv([row]), newline="")
        back = read_rows(p)[0]
        assert back.err_l2 == 1 / 7 and back.err_h1 is None
        assert back.estimate == [0.1, 1 / 3]
        assert not back.converged
        assert back.diagnostics == {"a": [1, 2], "b": 2.5}

    def test_wrong_header(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ReportError):
            read_rows(p)


class TestHelpers:
    def test_loglog_slope(self):
        ns = np.array([100, 400, 1600])
        out = loglog_slope(ns, 3.0 * ns ** -0.4)
        assert out["slope"] == pytest.approx(-0.4)
        assert loglog_slope([1, 2], [1.0, -1.0])["slope"] is None

    def test_strictly_decreasing(self):
        assert strictly_decreasing([3, 2, 1])
        assert not strictly_decreasing([3, 3, 1])
        assert not strictly_decreasing([1])

    def test_relative_entry_error(self):
        assert relative_entry_error([[1.0, 2.0]], [[1.0, 4.0]]) == pytest.approx(0.5)
        assert relative_entry_error([[0.0]], [[0.0]]) == 0.0

    def test_frobenius(self):
        S = np.eye(2)
        assert frobenius_relative(1.1 * S, S) == pytest.approx(0.1)

    def test_moment_bands_normal(self):
        x = np.random.default_rng(0).standard_normal(200)
        assert moment_bands(x)["ok"]
        y = np.random.default_rng(0).exponential(size=200)
        assert not moment_bands(y)["ok"]

    def test_pseudo_true(self):
        fam = make_exp_tilt_family()
        th = pseudo_true_theta(fam, mixture_density())
        np.testing.assert_allclose(th, [-2.1696, 1.5787], atol=5e-4)


class TestThreads:
    def test_env_wins(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert resolve_threads(None) == 1
        assert resolve_threads(3) == 3
        monkeypatch.setenv(THREADS_ENV, "2")
        assert resolve_threads(5) == 2
        monkeypatch.setenv(THREADS_ENV, "many")
        with pytest.raises(ConfigError):
            resolve_threads(1)


class TestRuns:
    def test_sphere_and_recheck(self, tmp_path, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        cfg = sphere_cfg()
        rep = run_experiment(cfg)
        assert rep.passed
        assert len([r for r in rep.rows if r.experiment == "sphere"]) == 3
        paths = emit_report(rep, tmp_path)
        assert recheck(paths["csv"], cfg) == rep.summary
        doc = json.loads(open(paths["summary"]).read())
        assert doc["passed"] and "wall_time_seconds" in doc
        assert "wall" not in open(paths["csv"]).read()

    def test_byte_identical_across_threads(self, tmp_path, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        cfg = estimation_cfg()
        one = run_experiment(cfg, threads=1)
        two = run_experiment(cfg, threads=2)
        assert rows_to_csv(one.rows) == rows_to_csv(two.rows)
        again = run_experiment(cfg, threads=1)
        assert rows_to_csv(again.rows) == rows_to_csv(one.rows)
        assert {r.replication for r in one.rows} == {0, 1, 2}

    def test_seed_changes_output(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        a = run_experiment(sphere_cfg(random_starts=0, replications=1))
        b = run_experiment(sphere_cfg(random_starts=0, replications=1, master_seed=8))
        assert rows_to_csv(a.rows) != rows_to_csv(b.rows)

    def test_fisher_check(self):
        rep = run_experiment(ExperimentConfig("fisher-check"))
        assert rep.passed
        assert len(rep.rows) == 9
        assert max(r.err_sup for r in rep.rows) < 1e-6

    def test_estimation_rows(self):
        rep = run_experiment(estimation_cfg(replications=2))
        smd = [r for r in rep.rows if r.experiment == "efficiency"]
        assert len(smd) == 2
        for r in smd:
            assert len(r.estimate) == 2
            assert "md_estimate" in r.diagnostics
        assert set(rep.summary["assertions"]) >= {"covariance", "coverage"}

    def test_emit_unwritable(self, tmp_path):
        rep = run_experiment(ExperimentConfig("fisher-check", fisher_grid_per_axis=1))
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(ReportError):
            emit_report(rep, blocker / "sub")
