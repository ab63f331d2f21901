"""Monte Carlo experiments, configuration and report persistence.

Every experiment follows the same pattern:

1. an :class:`ExperimentConfig` (JSON, ``schema: 1``) fixes the truth, the
   auxiliary model, the sample-size ladder, the number of replications and
   the master seed;
2. independent replications are fanned out to a process pool.  Each task
   receives the serialised config plus ``(n, replication)`` and derives its
   own random streams from ``(master_seed, replication, stream_id)``, so the
   result does not depend on the number of workers;
3. the rows come back in task order and a per-experiment summariser turns
   them into aggregates and named boolean assertions.

The summarisers read nothing but the rows and the config, which is what
lets :func:`summarize` recompute the verdict from a CSV on disk.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.optimize import minimize

from .auxiliary import AuxiliaryModel, default_dimension, random_feasible
from .errors import ConfigError, ReportError
from .families import (
    DATA_STREAM,
    FAMILIES,
    SIM_STREAM,
    START_STREAM,
    FixedDensityFamily,
    ParametricFamily,
    SimulationMechanism,
    fisher_information,
    make_draws,
    make_family,
    simulate_sample,
    stream_generator,
)
from .npml import NpmlOptions, Sample, fit_npml, score_at_maximizer
from .smd import (
    BoundaryWarning,
    ObjectiveContext,
    I_matrix,
    J_matrix,
    Q_pop,
    SmdOptions,
    default_nodes,
    donsker_gap,
    k_schedule,
    minimize_md,
    minimize_smd,
    sqrt_lemma_check,
)
from .sobolev import (
    Interval,
    SpectralFunction,
    UNIT_INTERVAL,
    gauss_legendre,
    sobolev_norm,
    sup_norm,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXPERIMENTS = ("rates", "normality", "efficiency", "donsker", "sphere", "misspec", "fisher-check")
THREADS_ENV = "SMD_NPML_THREADS"
TRUTH_BASIS = 128            # basis size used to represent a non-spectral truth
CONVERGENCE_FLOOR = 0.95     # below this fraction of converged fits a report is flagged
BOUNDARY_CEILING = 0.01


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelSpec:
    """Auxiliary-model settings; ``J=None`` picks :func:`default_dimension`."""

    t: float = 2.0
    zeta: float = 0.1
    D: float = 8.0
    J: int | None = None
    M: int = 512

    def build(self, n: int, interval: Interval = UNIT_INTERVAL) -> AuxiliaryModel:
        J = self.J if self.J is not None else default_dimension(int(n), self.t)
        return AuxiliaryModel(interval, self.t, self.zeta, self.D, J, self.M)


@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte Carlo experiment.

    ``true_theta`` makes the truth a member of ``family``; ``true_density``
    instead names a fixed density, either ``{"family": name}`` for one of
    the parameter-free families or ``{"coeffs": [...]}`` for a cosine
    expansion on ``interval``.
    """

    experiment: str
    family: str = "exp_tilt"
    true_theta: tuple | None = None
    true_density: dict | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    n_list: tuple = (200, 800, 3200)
    k_mode: str = "n2"
    k_const: float = 1.0
    k: int | None = None
    replications: int = 30
    master_seed: int = 20261016
    quadrature_nodes: int = 200
    output: str | None = None
    interval: tuple = (0.0, 1.0)
    theta_box: tuple | None = None
    # estimation
    grid_per_axis: int = 15
    md_comparator: bool = True
    sqrt_lemma: bool = True
    k_ladder: tuple = ()
    ladder_replications: int = 10
    covariance_tolerance: float | None = None
    coverage_band: tuple = (0.90, 0.99)
    # rates
    uniform_variant: bool = True
    uniform_family: str = "cos_tilt"
    uniform_D: float | None = None
    theta_grid_per_axis: int = 5
    slope_window: float = 0.15
    # donsker
    n_test_functions: int = 5
    score_slope_max: float = -0.3
    moment_band_level: float = 0.01     # family-wise over all (n, f) pairs
    # sphere
    random_starts: int = 10
    sphere_tolerance: float = 1e-4
    uniqueness_tolerance: float = 1e-4
    convergence_floor: float | None = None
    # fisher-check
    fisher_grid_per_axis: int = 3
    fisher_tolerance: float = 1e-6

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.uniform_family not in FAMILIES:
            raise ConfigError(f"unknown family {self.uniform_family!r}")
        if isinstance(self.model, dict):
            try:
                object.__setattr__(self, "model", ModelSpec(**self.model))
            except TypeError as exc:
                raise ConfigError(f"bad model section: {exc}") from None
        for name in ("n_list", "interval", "coverage_band", "k_ladder"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.true_theta is not None:
            object.__setattr__(self, "true_theta", tuple(float(v) for v in self.true_theta))
        if self.theta_box is not None:
            object.__setattr__(self, "theta_box", tuple(tuple(map(float, r)) for r in self.theta_box))
        if not self.n_list or any(int(n) < 1 for n in self.n_list):
            raise ConfigError("n_list must hold positive sample sizes")
        if list(self.n_list) != sorted(set(self.n_list)):
            raise ConfigError("n_list must be strictly ascending")
        object.__setattr__(self, "n_list", tuple(int(n) for n in self.n_list))
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.k_mode not in ("n2", "n2_1t", "custom"):
            raise ConfigError(f"unknown k_mode {self.k_mode!r}")
        if self.k_mode == "custom" and self.k is None:
            raise ConfigError('k_mode "custom" needs an explicit k')
        if self.true_density is not None:
            td = self.true_density
            if not isinstance(td, dict) or len(set(td) & {"family", "coeffs"}) != 1:
                raise ConfigError('true_density must be {"family": name} or {"coeffs": [...]}')
            if "family" in td and td["family"] not in FAMILIES:
                raise ConfigError(f"unknown truth family {td['family']!r}")
        needs_truth = self.experiment not in ("fisher-check",)
        if needs_truth and (self.true_theta is None) == (self.true_density is None):
            raise ConfigError("give exactly one of true_theta and true_density")
        if self.experiment == "misspec" and self.true_density is None:
            raise ConfigError("the misspec experiment needs a true_density outside the family")
        if self.experiment in ("efficiency", "fisher-check") and self.true_density is not None:
            raise ConfigError(f"{self.experiment} assumes correct specification (use true_theta)")
        try:
            self.model.build(self.n_list[0], self.interval_obj)
        except ValueError as exc:
            raise ConfigError(f"invalid auxiliary model: {exc}") from None

    @property
    def interval_obj(self) -> Interval:
        return Interval(*self.interval)

    def k_for(self, n: int) -> int:
        return k_schedule(n, self.k_mode, self.model.t, self.k_const, self.k)

    @property
    def cov_tolerance(self) -> float:
        if self.covariance_tolerance is not None:
            return self.covariance_tolerance
        return 0.25 if self.experiment == "misspec" else 0.20

    @property
    def conv_floor(self) -> float:
        if self.convergence_floor is not None:
            return self.convergence_floor
        return 0.99 if self.experiment == "sphere" else CONVERGENCE_FLOOR

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = dataclasses.asdict(self.model)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = json.loads(json.dumps(value))
        return {"schema": SCHEMA_VERSION, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        schema = d.pop("schema", None)
        if schema != SCHEMA_VERSION:
            raise ConfigError(f"config schema must be {SCHEMA_VERSION}, got {schema!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "experiment" not in d:
            raise ConfigError("config needs an 'experiment' field")
        return cls(**d)

    def with_(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# truth and shared per-process state


@dataclass(frozen=True, eq=False)
class Truth:
    """Data-generating density with a mechanism that samples from it."""

    density: object                  # callable or SpectralFunction
    spectral: SpectralFunction       # cosine representation used for norms
    mechanism: SimulationMechanism
    theta: np.ndarray                # argument passed to the mechanism
    member: bool                     # does the truth belong to the estimation family?

    def draw(self, seed: int, n: int, replication: int) -> Sample:
        return simulate_sample(self.mechanism, make_draws(seed, DATA_STREAM, n, replication),
                               self.theta)


def _family(cfg: ExperimentConfig) -> ParametricFamily:
    return make_family(cfg.family, cfg.interval_obj, cfg.theta_box)


def resolve_truth(cfg: ExperimentConfig) -> Truth:
    iv = cfg.interval_obj
    if cfg.true_theta is not None:
        fam = _family(cfg)
        theta = np.asarray(cfg.true_theta, dtype=float)
        if theta.size != fam.dim or not fam.in_box(theta):
            raise ConfigError(f"true_theta {cfg.true_theta} is not inside the {fam.name} box")
        spectral = fam.as_spectral(theta, TRUTH_BASIS)
        return Truth(lambda x: fam.density(x, theta), spectral, SimulationMechanism(fam),
                     theta, True)
    td = cfg.true_density
    if "coeffs" in td:
        spectral = SpectralFunction(iv, np.asarray(td["coeffs"], dtype=float))
        fam = FixedDensityFamily("truth", iv, np.zeros(1), np.zeros(1), spectral=spectral)
    else:
        fam = make_family(td["family"], iv)
        spectral = getattr(fam, "spectral", None) or fam.as_spectral(np.zeros(fam.dim), TRUTH_BASIS)
    if abs(spectral.coeffs[0] * math.sqrt(iv.length) - 1.0) > 1e-8:
        raise ConfigError("true_density does not integrate to one")
    return Truth(spectral, spectral, SimulationMechanism(fam), np.zeros(fam.dim), False)


@dataclass(eq=False)
class _Env:
    cfg: ExperimentConfig
    truth: Truth | None
    family: ParametricFamily
    mechanism: SimulationMechanism


@lru_cache(maxsize=8)
def _env(cfg_json: str) -> _Env:
    # families hold closures that do not pickle, so every worker rebuilds
    # them from the JSON config and keeps them for the life of the process
    cfg = ExperimentConfig.from_dict(json.loads(cfg_json))
    truth = None if cfg.experiment == "fisher-check" else resolve_truth(cfg)
    fam = _family(cfg)
    return _Env(cfg, truth, fam, SimulationMechanism(fam))


# --------------------------------------------------------------------------
# report rows


ROW_FIELDS = ("experiment", "n", "k", "replication", "master_seed", "stream_id", "theta_index",
              "estimate", "err_l2", "err_h1", "err_sup", "err_t", "objective",
              "sphere_residual", "kkt_residual", "score", "donsker_gap", "converged",
              "diagnostics")
_FLOAT_FIELDS = ("err_l2", "err_h1", "err_sup", "err_t", "objective", "sphere_residual",
                 "kkt_residual", "score", "donsker_gap")
_INT_FIELDS = ("n", "k", "replication", "master_seed", "stream_id", "theta_index")


@dataclass
class ReportRow:
    experiment: str
    n: int
    k: int = 0
    replication: int = 0
    master_seed: int = 0
    stream_id: int = DATA_STREAM
    theta_index: int = -1
    estimate: list = field(default_factory=list)
    err_l2: float | None = None
    err_h1: float | None = None
    err_sup: float | None = None
    err_t: float | None = None
    objective: float | None = None
    sphere_residual: float | None = None
    kkt_residual: float | None = None
    score: float | None = None
    donsker_gap: float | None = None
    converged: bool = True
    diagnostics: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {}
        for name in ROW_FIELDS:
            value = getattr(self, name)
            if name in _FLOAT_FIELDS:
                rec[name] = "" if value is None else repr(float(value))
            elif name == "estimate":
                rec[name] = json.dumps([float(v) for v in value])
            elif name == "diagnostics":
                rec[name] = json.dumps(_jsonable(value), sort_keys=True)
            elif name == "converged":
                rec[name] = "1" if value else "0"
            else:
                rec[name] = str(value)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ReportRow":
        kw = {"experiment": rec["experiment"]}
        for name in _INT_FIELDS:
            kw[name] = int(rec[name])
        for name in _FLOAT_FIELDS:
            kw[name] = None if rec[name] == "" else float(rec[name])
        kw["estimate"] = json.loads(rec["estimate"])
        kw["diagnostics"] = json.loads(rec["diagnostics"])
        kw["converged"] = rec["converged"] == "1"
        return cls(**kw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\r\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.to_record())
    return buf.getvalue()


def read_rows(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ROW_FIELDS:
            raise ReportError(f"{path} does not carry the report header")
        return [ReportRow.from_record(rec) for rec in reader]


@dataclass
class Report:
    experiment: str
    config: ExperimentConfig
    rows: list
    summary: dict
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.summary.get("passed", False))


# --------------------------------------------------------------------------
# worker plumbing


def resolve_threads(threads: int | None = None) -> int:
    """Worker count; the environment variable wins over the argument."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            threads = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return max(1, int(threads or 1))


def _call(task):
    fn, cfg_json, args = task
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryWarning)
        return _TASKS[fn](_env(cfg_json), *args)


def _fan_out(fn: str, cfg: ExperimentConfig, arg_list, threads: int) -> list:
    """Run ``fn`` over ``arg_list``; results come back in input order."""
    cfg_json = cfg.to_json()
    tasks = [(fn, cfg_json, tuple(args)) for args in arg_list]
    if threads <= 1 or len(tasks) <= 1:
        return [_call(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
        return list(pool.map(_call, tasks, chunksize=1))


def _flatten(results) -> list:
    out = []
    for r in results:
        out.extend(r if isinstance(r, list) else [r])
    return out


# --------------------------------------------------------------------------
# replication tasks


def _rates_task(env: _Env, n: int, rep: int) -> ReportRow:
    cfg, truth = env.cfg, env.truth
    m = cfg.model.build(n, cfg.interval_obj)
    sample = truth.draw(cfg.master_seed, n, rep)
    fit = fit_npml(m, sample)
    diff = fit.density - truth.spectral
    return ReportRow("rates", n, 0, rep, cfg.master_seed, DATA_STREAM,
                     err_l2=sobolev_norm(diff, 0.0), err_h1=sobolev_norm(diff, 1.0),
                     err_sup=sup_norm(diff), err_t=sobolev_norm(diff, m.t),
                     objective=fit.loglik, sphere_residual=fit.sphere_residual,
                     kkt_residual=fit.kkt_residual, converged=fit.converged,
                     diagnostics={"J": m.J, "floor_active": fit.floor_active})


@lru_cache(maxsize=8)
def _uniform_setup(cfg_json: str):
    env = _env(cfg_json)
    cfg = env.cfg
    fam = make_family(cfg.uniform_family, cfg.interval_obj)
    grid = fam.grid(cfg.theta_grid_per_axis)
    truths = [fam.as_spectral(th, TRUTH_BASIS) for th in grid]
    return fam, SimulationMechanism(fam), grid, truths


def _uniform_task(env: _Env, k: int, rep: int) -> ReportRow:
    """One common-random-number batch of size k, fitted at every grid theta."""
    cfg = env.cfg
    fam, mech, grid, truths = _uniform_setup(cfg.to_json())
    D = cfg.uniform_D if cfg.uniform_D is not None else cfg.model.D
    m = dataclasses.replace(cfg.model, D=D).build(k, cfg.interval_obj)
    rule = gauss_legendre(cfg.interval_obj, default_nodes(TRUTH_BASIS, cfg.quadrature_nodes))
    draws = make_draws(cfg.master_seed, SIM_STREAM, k, rep)
    l2, tn, bad = [], [], 0
    for th, ptrue in zip(grid, truths):
        fit = fit_npml(m, simulate_sample(mech, draws, th))
        bad += int(not fit.converged)
        resid = fit.density(rule.nodes) - fam.density(rule.nodes, th)
        l2.append(math.sqrt(rule(resid * resid)))
        tn.append(sobolev_norm(fit.density - ptrue, m.t))
    worst = int(np.argmax(l2))
    return ReportRow("rates-uniform", k, k, rep, cfg.master_seed, SIM_STREAM,
                     theta_index=worst, estimate=grid[worst].tolist(),
                     err_l2=max(l2), err_t=max(tn), converged=bad == 0,
                     diagnostics={"J": m.J, "D": D, "nonconverged": bad, "grid_points": len(grid)})


def _test_functions(iv: Interval, count: int) -> list:
    """Mean-zero cosine test functions e_1 .. e_count."""
    return [SpectralFunction(iv, np.eye(count + 1)[j]) for j in range(1, count + 1)]


def _fixed_functions(iv: Interval) -> list:
    """Three fixed directions for the finite-dimensional normality check."""
    e = np.eye(4)
    return [SpectralFunction(iv, e[1]), SpectralFunction(iv, e[2]),
            SpectralFunction(iv, (e[1] + e[3]) / math.sqrt(2.0))]


def _donsker_task(env: _Env, n: int, rep: int) -> ReportRow:
    cfg, truth = env.cfg, env.truth
    iv = cfg.interval_obj
    m = cfg.model.build(n, iv)
    sample = truth.draw(cfg.master_seed, n, rep)
    fit = fit_npml(m, sample)
    tests = _test_functions(iv, cfg.n_test_functions)
    rule = gauss_legendre(iv, default_nodes(max(m.J, truth.spectral.J), cfg.quadrature_nodes))
    gap = donsker_gap(fit, sample, truth.spectral, tests, rule)
    score = score_at_maximizer(fit, sample, tests)
    diff = fit.density - truth.spectral
    fd = []
    for f in _fixed_functions(iv):
        J = max(diff.J, f.J)
        fd.append(math.sqrt(n) * float(diff.padded(J).coeffs @ f.padded(J).coeffs))
    return ReportRow("donsker", n, 0, rep, cfg.master_seed, DATA_STREAM, estimate=fd,
                     err_l2=sobolev_norm(diff, 0.0), sphere_residual=fit.sphere_residual,
                     kkt_residual=fit.kkt_residual, score=score, donsker_gap=gap,
                     converged=fit.converged, diagnostics={"J": m.J})


def _sphere_task(env: _Env, n: int, rep: int) -> ReportRow:
    cfg, truth = env.cfg, env.truth
    m = cfg.model.build(n, cfg.interval_obj)
    fit = fit_npml(m, truth.draw(cfg.master_seed, n, rep))
    return ReportRow("sphere", n, 0, rep, cfg.master_seed, DATA_STREAM,
                     sphere_residual=fit.sphere_residual, kkt_residual=fit.kkt_residual,
                     objective=fit.loglik, converged=fit.converged,
                     diagnostics={"J": m.J, "D": m.D, "iterations": fit.iterations,
                                  "floor_active": fit.floor_active})


def _uniqueness_task(env: _Env, n: int, rep: int) -> list:
    """Random-start fits on one sample, compared in sup-norm with the default start."""
    cfg, truth = env.cfg, env.truth
    m = cfg.model.build(n, cfg.interval_obj)
    sample = truth.draw(cfg.master_seed, n, rep)
    ref = fit_npml(m, sample)
    rng = stream_generator(cfg.master_seed, START_STREAM, rep)
    rows = []
    for i in range(cfg.random_starts):
        start = random_feasible(m, rng)
        fit = fit_npml(m, sample, NpmlOptions(start=start))
        rows.append(ReportRow("sphere-uniqueness", n, 0, rep, cfg.master_seed, START_STREAM,
                              theta_index=i, err_sup=sup_norm(fit.density - ref.density),
                              objective=fit.loglik, sphere_residual=fit.sphere_residual,
                              kkt_residual=fit.kkt_residual, converged=fit.converged,
                              diagnostics={"loglik_gap": fit.loglik - ref.loglik}))
    return rows


def _estimation_task(env: _Env, n: int, rep: int) -> list:
    cfg, truth, fam = env.cfg, env.truth, env.family
    m = cfg.model.build(n, cfg.interval_obj)
    sample = truth.draw(cfg.master_seed, n, rep)
    phat = fit_npml(m, sample)
    k = cfg.k_for(n)
    opts = SmdOptions(grid_per_axis=cfg.grid_per_axis)
    ctx = ObjectiveContext(phat, m, mech=env.mechanism,
                           draws=make_draws(cfg.master_seed, SIM_STREAM, k, rep), n=n)
    res = minimize_smd(ctx, opts)
    diag = {"covariance": res.covariance, "boundary": res.diagnostics["boundary"],
            "inner_fits": res.diagnostics["inner_fits"],
            "inner_nonconverged": res.diagnostics["inner_nonconverged"],
            "sphere_residual_sim": res.diagnostics["sphere_residual_sim"],
            "phat_converged": phat.converged}
    md = None
    if cfg.md_comparator or cfg.sqrt_lemma:
        md = minimize_md(ctx, fam, opts)
        diag["md_estimate"] = md.theta_hat
        diag["md_boundary"] = md.diagnostics["boundary"]
    if cfg.sqrt_lemma:
        chk = sqrt_lemma_check(ctx, fam, res.theta_hat, md.theta_hat)
        diag["sqrt_lemma"] = {"distance": chk.distance, "bound": chk.bound, "K": chk.K,
                              "sup_gap": chk.sup_gap, "certified": chk.certified,
                              "holds": chk.holds}
    converged = phat.converged and res.diagnostics["inner_nonconverged"] == 0
    rows = [ReportRow(cfg.experiment, n, k, rep, cfg.master_seed, SIM_STREAM,
                      estimate=res.theta_hat.tolist(), objective=res.objective_value,
                      sphere_residual=phat.sphere_residual, kkt_residual=phat.kkt_residual,
                      converged=converged, diagnostics=diag)]
    if rep < cfg.ladder_replications:
        for kk in cfg.k_ladder:
            lctx = ObjectiveContext(phat, m, mech=env.mechanism,
                                    draws=make_draws(cfg.master_seed, SIM_STREAM, int(kk), rep), n=n)
            lres = minimize_smd(lctx, opts)
            gap = float(np.linalg.norm(lres.theta_hat - md.theta_hat)) if md is not None else None
            rows.append(ReportRow(f"{cfg.experiment}-ladder", n, int(kk), rep, cfg.master_seed,
                                  SIM_STREAM, estimate=lres.theta_hat.tolist(),
                                  objective=lres.objective_value, err_l2=gap,
                                  converged=lres.diagnostics["inner_nonconverged"] == 0))
    return rows


def _fisher_task(env: _Env, index: int) -> ReportRow:
    cfg, fam = env.cfg, env.family
    theta = fam.grid(cfg.fisher_grid_per_axis)[index]
    rule = gauss_legendre(cfg.interval_obj, cfg.quadrature_nodes)
    p_true = lambda x: fam.density(x, theta)   # noqa: E731 - correct specification
    I = I_matrix(fam, p_true, theta, rule)
    J = J_matrix(fam, p_true, theta, rule)
    F = fisher_information(fam, theta, rule)
    errs = {"I_vs_J": relative_entry_error(I, J), "I_vs_F": relative_entry_error(I, F),
            "J_vs_F": relative_entry_error(J, F)}
    closed = getattr(fam, "fisher_closed_form", None)
    if closed is not None:
        errs["F_vs_closed_form"] = relative_entry_error(F, closed(theta))
    return ReportRow("fisher-check", 0, 0, 0, cfg.master_seed, DATA_STREAM, theta_index=index,
                     estimate=theta.tolist(), err_sup=max(errs.values()),
                     diagnostics={**errs, "I": I, "J": J, "fisher": F})


_TASKS = {"rates": _rates_task, "uniform": _uniform_task, "donsker": _donsker_task,
          "sphere": _sphere_task, "uniqueness": _uniqueness_task,
          "estimation": _estimation_task, "fisher": _fisher_task}


def relative_entry_error(A, B) -> float:
    """``max |A - B|`` relative to the largest entry of ``B``."""
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    scale = float(np.abs(B).max())
    return float(np.abs(A - B).max() / scale) if scale > 0 else float(np.abs(A).max())


# --------------------------------------------------------------------------
# aggregation helpers


def loglog_slope(ns, values) -> dict:
    """Least-squares slope of log(values) on log(ns) with its standard error."""
    ns = np.asarray(ns, dtype=float)
    v = np.asarray(values, dtype=float)
    if ns.size < 2 or np.any(v <= 0) or not np.all(np.isfinite(v)):
        return {"slope": None, "stderr": None}
    fit = stats.linregress(np.log(ns), np.log(v))
    se = float(fit.stderr) if ns.size > 2 else None
    return {"slope": float(fit.slope), "stderr": se}


def strictly_decreasing(values) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(v.size >= 2 and np.all(np.diff(v) < 0))


@lru_cache(maxsize=32)
def _null_moment_quantiles(R: int, alpha: float, draws: int = 20000) -> tuple:
    """Two-sided ``alpha`` quantiles of sample skewness / excess kurtosis under normality."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(R)))
    z = gen.standard_normal((draws, R))
    sk = stats.skew(z, axis=1, bias=False)
    ku = stats.kurtosis(z, axis=1, bias=False)
    q = [alpha / 2.0, 1.0 - alpha / 2.0]
    return tuple(np.quantile(sk, q)), tuple(np.quantile(ku, q))


def moment_bands(x, alpha: float = 0.01) -> dict:
    """Sample skewness and excess kurtosis against their exact normal-null bands.

    The bands are simulated quantiles for samples of the same size, so the
    heavy right tail of the kurtosis statistic at small R is respected.
    """
    x = np.asarray(x, dtype=float)
    R = x.size
    if R < 8:
        return {"skew": None, "kurtosis": None, "ok": True}
    (s_lo, s_hi), (k_lo, k_hi) = _null_moment_quantiles(R, float(alpha))
    sk = float(stats.skew(x, bias=False))
    ku = float(stats.kurtosis(x, bias=False))
    ok = s_lo <= sk <= s_hi and k_lo <= ku <= k_hi
    return {"skew": sk, "kurtosis": ku, "skew_band": [float(s_lo), float(s_hi)],
            "kurtosis_band": [float(k_lo), float(k_hi)], "ok": bool(ok)}


def frobenius_relative(C, S) -> float:
    C, S = np.asarray(C, dtype=float), np.asarray(S, dtype=float)
    return float(np.linalg.norm(C - S) / np.linalg.norm(S))


def _inv_sqrt(S):
    w, V = np.linalg.eigh(S)
    return (V / np.sqrt(w)) @ V.T


def pseudo_true_theta(fam: ParametricFamily, p_true, rule=None, per_axis: int = 41) -> np.ndarray:
    """Minimiser of the population distance: fine grid, then Nelder-Mead."""
    rule = rule or gauss_legendre(fam.interval)
    grid = fam.grid(per_axis)
    vals = np.array([Q_pop(fam, p_true, th, rule) for th in grid])
    start = grid[int(np.argmin(vals))]
    lo, hi = fam.theta_lo, fam.theta_hi
    res = minimize(lambda th: Q_pop(fam, p_true, np.clip(th, lo, hi), rule), start,
                   method="Nelder-Mead", bounds=list(zip(lo, hi)),
                   options={"xatol": 1e-12, "fatol": 1e-18, "maxiter": 10000, "maxfev": 20000})
    return np.clip(res.x, lo, hi)


def _by_n(rows, experiment):
    out = {}
    for r in rows:
        if r.experiment == experiment:
            out.setdefault(r.n, []).append(r)
    return out


def _conv_rate(rows) -> float:
    return float(np.mean([r.converged for r in rows])) if rows else 1.0


def _median(values):
    v = [x for x in values if x is not None]
    return float(np.median(v)) if v else None


# --------------------------------------------------------------------------
# summarisers (rows + config only)


def _summarize_rates(cfg: ExperimentConfig, rows) -> dict:
    t = cfg.model.t
    groups = _by_n(rows, "rates")
    target0 = -t / (2.0 * t + 1.0)
    target1 = -(t - 1.0) / (2.0 * t + 1.0)
    ns = sorted(groups)
    per_n = {str(n): {"median_l2": _median(r.err_l2 for r in groups[n]),
                      "median_h1": _median(r.err_h1 for r in groups[n]),
                      "median_sup": _median(r.err_sup for r in groups[n]),
                      "max_t_error": max(r.err_t for r in groups[n]),
                      "convergence_rate": _conv_rate(groups[n])} for n in ns}
    s0 = loglog_slope(ns, [per_n[str(n)]["median_l2"] for n in ns])
    s1 = loglog_slope(ns, [per_n[str(n)]["median_h1"] for n in ns])
    bound = 2.0 * cfg.model.D
    assertions = {}
    if rows:
        assertions["l2_slope_in_window"] = s0["slope"] is not None and \
            abs(s0["slope"] - target0) <= cfg.slope_window
        assertions["t_error_bounded"] = all(r.err_t <= bound for g in groups.values() for r in g)
        assertions["convergence_rate"] = all(v["convergence_rate"] >= cfg.conv_floor
                                             for v in per_n.values())
    summary = {"per_n": per_n, "slope_l2": {**s0, "target": target0},
               "slope_h1": {**s1, "target": target1}, "t_error_bound": bound}
    ugroups = _by_n(rows, "rates-uniform")
    if ugroups:
        ks = sorted(ugroups)
        D = cfg.uniform_D if cfg.uniform_D is not None else cfg.model.D
        med = [_median(r.err_l2 for r in ugroups[k]) for k in ks]
        su = loglog_slope(ks, med)
        summary["uniform"] = {"k": ks, "median_sup_l2": med, "slope": {**su, "target": target0},
                              "max_t_error": max(r.err_t for g in ugroups.values() for r in g),
                              "t_error_bound": 2.0 * D,
                              "convergence_rate": _conv_rate([r for g in ugroups.values() for r in g])}
        assertions["uniform_decreasing"] = strictly_decreasing(med)
        assertions["uniform_slope_in_window"] = su["slope"] is not None and \
            abs(su["slope"] - target0) <= cfg.slope_window
        assertions["uniform_t_error_bounded"] = summary["uniform"]["max_t_error"] <= 2.0 * D
    summary["assertions"] = assertions
    return summary


def _summarize_donsker(cfg: ExperimentConfig, rows) -> dict:
    groups = _by_n(rows, "donsker")
    ns = sorted(groups)
    per_n, bands_ok = {}, True
    n_tests = max(1, len(ns) * len(_fixed_functions(cfg.interval_obj)))
    alpha = cfg.moment_band_level / n_tests
    for n in ns:
        g = groups[n]
        fd = np.array([r.estimate for r in g])
        bands = [moment_bands(fd[:, j], alpha) for j in range(fd.shape[1])]
        bands_ok &= all(b["ok"] for b in bands)
        per_n[str(n)] = {"median_gap": _median(r.donsker_gap for r in g),
                         "median_score": _median(r.score for r in g),
                         "median_l2": _median(r.err_l2 for r in g),
                         "fd_mean": fd.mean(axis=0).tolist(), "fd_sd": fd.std(axis=0, ddof=1).tolist()
                         if len(g) > 1 else None,
                         "moment_bands": bands, "convergence_rate": _conv_rate(g)}
    gaps = [per_n[str(n)]["median_gap"] for n in ns]
    scores = [per_n[str(n)]["median_score"] for n in ns]
    ss = loglog_slope(ns, scores)
    assertions = {}
    if rows:
        assertions = {
            "gap_medians_decreasing": strictly_decreasing(gaps),
            "score_slope": ss["slope"] is not None and ss["slope"] <= cfg.score_slope_max,
            "score_medians_decreasing": strictly_decreasing(scores),
            "moment_bands": bool(bands_ok),
            "convergence_rate": all(v["convergence_rate"] >= cfg.conv_floor for v in per_n.values()),
        }
    return {"per_n": per_n, "score_slope": {**ss, "max": cfg.score_slope_max},
            "assertions": assertions}


def _summarize_sphere(cfg: ExperimentConfig, rows) -> dict:
    fits = [r for r in rows if r.experiment == "sphere"]
    starts = [r for r in rows if r.experiment == "sphere-uniqueness"]
    D = cfg.model.D
    conv = [r for r in fits if r.converged]
    ratios = [r.sphere_residual / D for r in conv]
    summary = {"fits": len(fits), "converged": len(conv), "convergence_rate": _conv_rate(fits),
               "max_sphere_ratio": max(ratios) if ratios else None,
               "max_kkt_residual": max((r.kkt_residual for r in conv), default=None),
               "random_starts": len(starts),
               "max_start_disagreement": max((r.err_sup for r in starts), default=None)}
    assertions = {}
    if fits:
        assertions["sphere_ratio"] = all(x < cfg.sphere_tolerance for x in ratios)
        assertions["convergence_rate"] = summary["convergence_rate"] >= cfg.conv_floor
    if starts:
        assertions["uniqueness"] = summary["max_start_disagreement"] < cfg.uniqueness_tolerance
    summary["assertions"] = assertions
    return summary


def _theory_covariance(cfg: ExperimentConfig) -> tuple:
    """``(theta_star, S)`` with S the limit covariance of sqrt(n)(theta_hat - theta_star)."""
    env = _env(cfg.to_json())
    fam, truth = env.family, env.truth
    rule = gauss_legendre(cfg.interval_obj, cfg.quadrature_nodes)
    if cfg.experiment == "efficiency":
        theta = np.asarray(cfg.true_theta, dtype=float)
        return theta, np.linalg.inv(fisher_information(fam, theta, rule))
    theta = (np.asarray(cfg.true_theta, dtype=float) if truth.member
             else pseudo_true_theta(fam, truth.density, rule))
    J = J_matrix(fam, truth.density, theta, rule)
    I = I_matrix(fam, truth.density, theta, rule)
    Jinv = np.linalg.inv(J)
    S = Jinv @ I @ Jinv
    return theta, 0.5 * (S + S.T)


def _summarize_estimation(cfg: ExperimentConfig, rows) -> dict:
    main = [r for r in rows if r.experiment == cfg.experiment]
    theta_star, S = _theory_covariance(cfg)
    summary = {"theta_star": theta_star.tolist(), "theory_covariance": S.tolist(),
               "replications": len(main)}
    assertions = {}
    if main:
        n = main[0].n
        est = np.array([r.estimate for r in main])
        Z = math.sqrt(n) * (est - theta_star)
        C = np.cov(Z.T, ddof=1) if len(main) > 1 else np.zeros_like(S)
        W = _inv_sqrt(S)
        Cstd = W @ C @ W
        d = S.shape[0]
        crit = stats.chi2.ppf(0.95, d)
        zq = stats.norm.ppf(0.975)
        cover_coord, cover_ell = [], []
        for r in main:
            cov = r.diagnostics.get("covariance")
            if cov is None:
                continue
            cov = np.asarray(cov, dtype=float)
            dev = np.asarray(r.estimate) - theta_star
            cover_coord.append(np.abs(dev) <= zq * np.sqrt(np.maximum(np.diag(cov), 0.0)))
            try:
                cover_ell.append(float(dev @ np.linalg.solve(cov, dev)) <= crit)
            except np.linalg.LinAlgError:
                cover_ell.append(False)
        coverage = np.mean(cover_coord, axis=0).tolist() if cover_coord else None
        boundary = float(np.mean([r.diagnostics.get("boundary", False) for r in main]))
        summary.update({
            "n": n, "k": main[0].k, "mean_z": Z.mean(axis=0).tolist(), "mc_covariance": C.tolist(),
            "standardized_covariance": Cstd.tolist(),
            "frobenius_relative": frobenius_relative(C, S),
            "standardized_frobenius": float(np.linalg.norm(Cstd - np.eye(d)) / math.sqrt(d)),
            "coverage_per_coordinate": coverage,
            "coverage_ellipsoid": float(np.mean(cover_ell)) if cover_ell else None,
            "boundary_fraction": boundary, "convergence_rate": _conv_rate(main)})
        lo, hi = cfg.coverage_band
        metric = "frobenius_relative" if cfg.experiment == "efficiency" else "standardized_frobenius"
        summary["covariance_metric"] = metric
        assertions["covariance"] = summary[metric] <= cfg.cov_tolerance
        if cfg.experiment == "efficiency":
            assertions["coverage"] = coverage is not None and all(lo <= c <= hi for c in coverage)
        assertions["boundary_fraction"] = boundary <= BOUNDARY_CEILING
        checks = [r.diagnostics["sqrt_lemma"] for r in main if "sqrt_lemma" in r.diagnostics]
        if checks:
            cert = [c for c in checks if c["certified"]]
            summary["sqrt_lemma"] = {"checked": len(checks), "certified": len(cert),
                                     "violations": sum(not c["holds"] for c in cert),
                                     "max_ratio": max((c["distance"] / c["bound"] for c in cert
                                                       if c["bound"] > 0), default=None)}
            assertions["sqrt_lemma"] = summary["sqrt_lemma"]["violations"] == 0
        md = [r.diagnostics["md_estimate"] for r in main if "md_estimate" in r.diagnostics]
        if md:
            gaps = [float(np.linalg.norm(np.asarray(r.estimate) - np.asarray(r.diagnostics["md_estimate"])))
                    for r in main if "md_estimate" in r.diagnostics]
            Zmd = math.sqrt(n) * (np.asarray(md) - theta_star)
            summary["md"] = {"median_gap": float(np.median(gaps)),
                             "mc_covariance": np.cov(Zmd.T, ddof=1).tolist() if len(md) > 1 else None}
    ladder = _by_n([r for r in rows if r.experiment == f"{cfg.experiment}-ladder"],
                   f"{cfg.experiment}-ladder")
    if ladder:
        lrows = [r for g in ladder.values() for r in g]
        ks = sorted({r.k for r in lrows})
        meds = [_median(r.err_l2 for r in lrows if r.k == k) for k in ks]
        summary["ladder"] = {"k": ks, "median_gap_to_md": meds}
        assertions["ladder_decreasing"] = strictly_decreasing(meds)
    summary["assertions"] = assertions
    return summary


def _summarize_fisher(cfg: ExperimentConfig, rows) -> dict:
    fr = [r for r in rows if r.experiment == "fisher-check"]
    worst = max((r.err_sup for r in fr), default=None)
    summary = {"grid_points": len(fr), "max_relative_error": worst}
    summary["assertions"] = {"fisher_identity": worst < cfg.fisher_tolerance} if fr else {}
    return summary


_SUMMARIZERS = {"rates": _summarize_rates, "donsker": _summarize_donsker,
                "sphere": _summarize_sphere, "normality": _summarize_estimation,
                "misspec": _summarize_estimation, "efficiency": _summarize_estimation,
                "fisher-check": _summarize_fisher}


def summarize(cfg: ExperimentConfig, rows) -> dict:
    """Aggregates and pass/fail flags computed from the rows alone."""
    summary = _SUMMARIZERS[cfg.experiment](cfg, rows)
    summary = _jsonable(summary)
    summary["experiment"] = cfg.experiment
    summary["rows"] = len(rows)
    summary["passed"] = all(summary["assertions"].values())
    return summary


# --------------------------------------------------------------------------
# experiment drivers


def _run(cfg: ExperimentConfig, parts, threads: int | None) -> Report:
    threads = resolve_threads(threads)
    t0 = time.perf_counter()
    rows = []
    for fn, args in parts:
        rows.extend(_flatten(_fan_out(fn, cfg, args, threads)))
    summary = summarize(cfg, rows)
    wall = time.perf_counter() - t0
    log.info("%s: %d rows in %.1fs, passed=%s", cfg.experiment, len(rows), wall, summary["passed"])
    return Report(cfg.experiment, cfg, rows, summary, wall)


def _reps(cfg, ns):
    return [(n, r) for n in ns for r in range(cfg.replications)]


def run_rates(cfg: ExperimentConfig, threads: int | None = None) -> Report:
    parts = [("rates", _reps(cfg, cfg.n_list))]
    if cfg.uniform_variant:
        parts.append(("uniform", _reps(cfg, cfg.n_list)))
    return _run(cfg, parts, threads)


def run_donsker(cfg: ExperimentConfig, threads: int | None = None) -> Report:
    return _run(cfg, [("donsker", _reps(cfg, cfg.n_list))], threads)


def run_sphere(cfg: ExperimentConfig, threads: int | None = None) -> Report:
    n = cfg.n_list[0]
    parts = [("sphere", _reps(cfg, [n]))]
    if cfg.random_starts > 0:
        parts.append(("uniqueness", [(n, 0)]))
    return _run(cfg, parts, threads)


def run_normality(cfg: ExperimentConfig, threads: int | None = None) -> Report:
    """Used for both the "normality" and the "misspec" experiments (first n only)."""
    return _run(cfg, [("estimation", _reps(cfg, cfg.n_list[:1]))], threads)


def run_efficiency(cfg: ExperimentConfig, threads: int | None = None) -> Report:
    return _run(cfg, [("estimation", _reps(cfg, cfg.n_list[:1]))], threads)


def run_fisher_check(cfg: ExperimentConfig, threads: int | None = None) -> Report:
    count = cfg.fisher_grid_per_axis ** _family(cfg).dim
    return _run(cfg, [("fisher", [(i,) for i in range(count)])], threads)


RUNNERS = {"rates": run_rates, "donsker": run_donsker, "sphere": run_sphere,
           "normality": run_normality, "misspec": run_normality,
           "efficiency": run_efficiency, "fisher-check": run_fisher_check}


def run_experiment(cfg: ExperimentConfig, threads: int | None = None) -> Report:
    return RUNNERS[cfg.experiment](cfg, threads)


# --------------------------------------------------------------------------
# persistence


def emit_report(report: Report, path) -> dict:
    """Write ``<experiment>.csv`` and ``<experiment>_summary.json`` into ``path``.

    The CSV carries no timing information so that reruns are byte-identical;
    wall time lives in the JSON summary only.
    """
    out = Path(path)
    stem = report.experiment
    csv_path = out / f"{stem}.csv"
    json_path = out / f"{stem}_summary.json"
    doc = {"summary": report.summary, "config": report.config.to_dict(),
           "wall_time_seconds": round(report.wall_time, 3), "passed": report.passed}
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path.write_bytes(rows_to_csv(report.rows).encode("utf-8"))
        json_path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc}") from exc
    return {"csv": str(csv_path), "summary": str(json_path)}


def recheck(csv_path, cfg: ExperimentConfig) -> dict:
    """Recompute a summary from a CSV written by :func:`emit_report`."""
    return summarize(cfg, read_rows(csv_path))


__all__ = [
    "EXPERIMENTS", "SCHEMA_VERSION", "ModelSpec", "ExperimentConfig", "ReportRow", "Report",
    "Truth", "load_config", "resolve_truth", "resolve_threads", "run_experiment", "run_rates",
    "run_normality", "run_efficiency", "run_donsker", "run_sphere", "run_fisher_check",
    "summarize", "emit_report", "read_rows", "recheck", "rows_to_csv", "loglog_slope",
    "moment_bands", "frobenius_relative", "pseudo_true_theta", "relative_entry_error",
    "strictly_decreasing",
]
