"""Minimum-distance and simulated minimum-distance estimation.

Both estimators compare the data-side NPML density ``p_hat`` with a
model-side density in the Fisher-type metric

    Q(theta) = integral (p_hat - q_theta)**2 / p_hat.

For the infeasible MD estimator ``q_theta = p_theta`` is the parametric
density itself; for the SMD (indirect inference) estimator ``q_theta`` is
the NPML fit to a sample simulated at theta from one fixed batch of
uniforms.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .auxiliary import AuxiliaryModel, grid_min
from .errors import GuardError, NumericError, PreconditionError, ScheduleError
from .families import (
    ParametricFamily,
    SimulationMechanism,
    UniformDraws,
    simulate_binned,
    simulate_sample,
)
from .npml import NpmlFit, NpmlOptions, Sample, fit_npml, with_start
from .sobolev import (
    QuadratureRule,
    SpectralFunction,
    cosine_basis,
    gauss_legendre,
    sobolev_norm,
)

log = logging.getLogger(__name__)

K_CAP = 10**8
BINNING_THRESHOLD = 20000
DEFAULT_BINS = 2048


class BoundaryWarning(UserWarning):
    """The estimate sits on the boundary of the parameter box."""


def default_nodes(J: int, nodes: int = 200) -> int:
    """Gauss-Legendre node count, enlarged for high-dimensional bases."""
    return max(nodes, 2 * J + 64)


@dataclass(eq=False)
class ObjectiveContext:
    """Everything the objectives need for one data set.

    ``chi`` is the positivity guard: ``p_hat`` must exceed it on the
    positivity grid and on the quadrature nodes.  With ``bins=None`` the
    simulated sample is binned automatically once ``k`` exceeds
    :data:`BINNING_THRESHOLD`; ``bins=0`` forces the exact sample.
    """

    phat: NpmlFit
    model: AuxiliaryModel
    mech: SimulationMechanism | None = None
    draws: UniformDraws | None = None
    rule: QuadratureRule | None = None
    npml_opts: NpmlOptions = field(default_factory=NpmlOptions)
    n: float | None = None
    chi: float = 0.0
    bins: int | None = None
    warm_start: bool = True

    def __post_init__(self):
        iv = self.model.interval
        if self.rule is None:
            self.rule = gauss_legendre(iv, default_nodes(self.model.J))
        p = self.phat.density
        floor = max(self.chi, 0.0)
        gmin = grid_min(self.model, p)
        self.phat_nodes = p(self.rule.nodes)
        low = min(gmin, float(self.phat_nodes.min()))
        if not low > floor:
            raise GuardError(f"data-side density has minimum {low:.3g} <= guard {floor:.3g}")
        self._basis = cosine_basis(iv, self.rule.nodes, self.model.J)
        self._wq = self.rule.weights / self.phat_nodes
        if self.warm_start:
            self._sim_opts = with_start(self.npml_opts, p.coeffs)
        else:
            self._sim_opts = self.npml_opts

    @property
    def family(self) -> ParametricFamily:
        return self.mech.family

    @property
    def k(self) -> int:
        return 0 if self.draws is None else self.draws.k

    @property
    def use_bins(self) -> int:
        if self.bins is not None:
            return self.bins
        return DEFAULT_BINS if self.k > BINNING_THRESHOLD else 0

    def simulated_sample(self, theta) -> Sample:
        if self.mech is None or self.draws is None:
            raise PreconditionError("context has no simulation mechanism / draws")
        if self.use_bins:
            return simulate_binned(self.mech, self.draws, theta, self.use_bins)
        return simulate_sample(self.mech, self.draws, theta)

    def simulated_fit(self, theta) -> NpmlFit:
        """``p_tilde_k(theta)``: NPML fit to the sample simulated at theta."""
        return fit_npml(self.model, self.simulated_sample(theta), self._sim_opts)

    def distance(self, values: np.ndarray) -> float:
        """``integral (p_hat - q)**2 / p_hat`` for q given on the nodes."""
        d = self.phat_nodes - values
        return float(np.dot(self._wq, d * d))


def Q_nk(ctx: ObjectiveContext, theta, return_fit: bool = False):
    fit = ctx.simulated_fit(theta)
    value = ctx.distance(ctx._basis[:, : fit.density.J + 1] @ fit.density.coeffs)
    return (value, fit) if return_fit else value


def Q_n(ctx: ObjectiveContext, theta, fam: ParametricFamily) -> float:
    return ctx.distance(fam.density(ctx.rule.nodes, theta))


def _true_values(p_true, nodes) -> np.ndarray:
    if isinstance(p_true, SpectralFunction):
        vals = p_true(nodes)
    else:
        vals = np.asarray(p_true(nodes), dtype=float) * np.ones_like(nodes)
    bad = np.flatnonzero(~(vals > 0))
    if bad.size:
        raise NumericError("true density is not positive", index=int(bad[0]))
    return vals


def Q_pop(fam: ParametricFamily, p_true, theta, rule: QuadratureRule | None = None) -> float:
    rule = rule or gauss_legendre(fam.interval)
    pt = _true_values(p_true, rule.nodes)
    d = pt - fam.density(rule.nodes, theta)
    return float(np.dot(rule.weights / pt, d * d))


def dQ_n(ctx: ObjectiveContext, theta, fam: ParametricFamily) -> np.ndarray:
    nodes = ctx.rule.nodes
    resid = ctx.phat_nodes - fam.density(nodes, theta)
    return -2.0 * fam.dtheta(nodes, theta).T @ (ctx._wq * resid)


def d2Q_n(ctx: ObjectiveContext, theta, fam: ParametricFamily) -> np.ndarray:
    nodes = ctx.rule.nodes
    d1 = fam.dtheta(nodes, theta)
    d2 = fam.d2theta(nodes, theta)
    p = fam.density(nodes, theta)
    # the second-derivative term is weighted by (p_theta - p_hat), which
    # vanishes at zero residual
    H = (d1 * ctx._wq[:, None]).T @ d1 + np.einsum("nij,n->ij", d2, ctx._wq * (p - ctx.phat_nodes))
    H = 2.0 * H
    return 0.5 * (H + H.T)


def J_matrix(fam: ParametricFamily, p_true, theta, rule: QuadratureRule | None = None) -> np.ndarray:
    """Half the Hessian of the population objective."""
    rule = rule or gauss_legendre(fam.interval)
    nodes = rule.nodes
    pt = _true_values(p_true, nodes)
    w = rule.weights / pt
    d1 = fam.dtheta(nodes, theta)
    d2 = fam.d2theta(nodes, theta)
    p = fam.density(nodes, theta)
    J = (d1 * w[:, None]).T @ d1 + np.einsum("nij,n->ij", d2, w * (p - pt))
    return 0.5 * (J + J.T)


def I_matrix(fam: ParametricFamily, p_true, theta, rule: QuadratureRule | None = None) -> np.ndarray:
    """Variance matrix of the linearised objective score."""
    rule = rule or gauss_legendre(fam.interval)
    nodes = rule.nodes
    pt = _true_values(p_true, nodes)
    d1 = fam.dtheta(nodes, theta)
    p = fam.density(nodes, theta)
    g = d1 * (p / pt)[:, None]              # score-type function dp * p / p_true
    first = (g * (rule.weights / pt)[:, None]).T @ g
    mean = g.T @ rule.weights
    I = first - np.outer(mean, mean)
    return 0.5 * (I + I.T)


# --------------------------------------------------------------------------
# estimation


@dataclass(frozen=True)
class SmdOptions:
    grid_per_axis: int = 15
    xtol: float = 1e-6
    ftol: float = 1e-12
    max_iter: int = 500


@dataclass
class EstimationResult:
    theta_hat: np.ndarray
    objective_value: float
    covariance: np.ndarray | None
    I_hat: np.ndarray
    J_hat: np.ndarray
    n: float
    k: int
    optimizer_trace: list
    diagnostics: dict

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float).tolist()

        return {"theta_hat": arr(self.theta_hat), "objective_value": self.objective_value,
                "covariance": arr(self.covariance), "I_hat": arr(self.I_hat),
                "J_hat": arr(self.J_hat), "n": self.n, "k": self.k,
                "optimizer_trace": [[list(map(float, t)), float(v)] for t, v in self.optimizer_trace],
                "diagnostics": self.diagnostics}


def _grid_then_refine(objective, fam: ParametricFamily, opts: SmdOptions, trace: list):
    lo, hi = fam.theta_lo, fam.theta_hi

    def f(theta):
        th = np.clip(np.asarray(theta, dtype=float), lo, hi)
        v = float(objective(th))
        trace.append((th.copy(), v))
        return v

    grid = fam.grid(opts.grid_per_axis)
    values = np.array([f(th) for th in grid])
    # ties: smallest objective, then lexicographically smallest theta
    order = np.lexsort(tuple(grid[:, j] for j in range(grid.shape[1] - 1, -1, -1)) + (values,))
    start = grid[order[0]]
    if np.all(hi > lo):
        step = (hi - lo) / max(opts.grid_per_axis - 1, 1)
        simplex = [start.copy()]
        for j in range(fam.dim):
            vert = start.copy()
            vert[j] += step[j] if vert[j] + step[j] <= hi[j] else -step[j]
            simplex.append(vert)
        res = minimize(f, start, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                       options={"xatol": opts.xtol, "fatol": opts.ftol, "maxiter": opts.max_iter,
                                "maxfev": 4 * opts.max_iter, "initial_simplex": np.array(simplex)})
        theta, value, nit = np.clip(res.x, lo, hi), float(res.fun), int(res.nit)
        if values[order[0]] < value:  # never return worse than the grid
            theta, value = start, float(values[order[0]])
    else:
        theta, value, nit = start, float(values[order[0]]), 0
    return theta, value, {"grid_points": int(len(grid)), "refinement_steps": nit,
                          "grid_spacing": ((hi - lo) / max(opts.grid_per_axis - 1, 1)).tolist()}


def _sandwich(ctx: ObjectiveContext, fam: ParametricFamily, theta, n):
    p_hat = ctx.phat.density
    J = J_matrix(fam, p_hat, theta, ctx.rule)
    I = I_matrix(fam, p_hat, theta, ctx.rule)
    flag = False
    cov = None
    try:
        if np.linalg.cond(J) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned J")
        Jinv = np.linalg.inv(J)
        cov = Jinv @ I @ Jinv / n
        cov = 0.5 * (cov + cov.T)
    except np.linalg.LinAlgError:
        flag = True
    return cov, I, J, flag


def _finish(ctx, fam, theta, value, trace, info, extra) -> EstimationResult:
    n = ctx.n
    if n is None:
        raise PreconditionError("context needs the data sample size n")
    cov, I, J, flag = _sandwich(ctx, fam, theta, n)
    boundary = fam.on_boundary(theta)
    if boundary:
        warnings.warn(f"estimate {theta} lies on the parameter-box boundary", BoundaryWarning,
                      stacklevel=3)
    diag = {"sphere_residual_data": ctx.phat.sphere_residual, "boundary": boundary,
            "covariance_unavailable": flag, **info, **extra}
    return EstimationResult(np.asarray(theta, dtype=float), value, cov, I, J, n, ctx.k,
                            trace, diag)


def minimize_md(ctx: ObjectiveContext, fam: ParametricFamily,
                opts: SmdOptions | None = None) -> EstimationResult:
    """Infeasible MD estimator (exact parametric density)."""
    opts = opts or SmdOptions()
    trace: list = []
    theta, value, info = _grid_then_refine(lambda th: Q_n(ctx, th, fam), fam, opts, trace)
    return _finish(ctx, fam, theta, value, trace, info, {})


def minimize_smd(ctx: ObjectiveContext, opts: SmdOptions | None = None) -> EstimationResult:
    """Simulated MD (indirect inference) estimator."""
    opts = opts or SmdOptions()
    fam = ctx.family
    trace: list = []
    stats = {"inner_fits": 0, "inner_nonconverged": 0}

    def objective(th):
        value, fit = Q_nk(ctx, th, return_fit=True)
        stats["inner_fits"] += 1
        stats["inner_nonconverged"] += int(not fit.converged)
        return value

    theta, value, info = _grid_then_refine(objective, fam, opts, trace)
    sim_fit = ctx.simulated_fit(theta)
    extra = dict(stats, sphere_residual_sim=sim_fit.sphere_residual,
                 binned=int(ctx.use_bins))
    return _finish(ctx, fam, theta, value, trace, info, extra)


def k_schedule(n: int, mode: str = "n2", t: float = 2.0, c: float = 1.0, k: int | None = None) -> int:
    """Simulation size ``k(n)``; ``mode="custom"`` passes ``k`` (or ``c``) through."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if mode == "n2":
        value = c * n**2 * math.log(n + 1)
    elif mode == "n2_1t":
        value = c * n ** (2.0 + 1.0 / t) * math.log(n + 1)
    elif mode == "custom":
        value = k if k is not None else c
    else:
        raise ValueError(f"unknown k schedule {mode!r}")
    if not math.isfinite(value) or value > K_CAP:
        raise ScheduleError(f"k = {value:.3g} exceeds the cap of {K_CAP:.0e} simulated points; "
                            "use a smaller n")
    return max(1, int(math.ceil(value)))


def donsker_gap(fit: NpmlFit, sample: Sample, p_true, test_fns, rule: QuadratureRule | None = None,
                s: float = 1.0) -> float:
    """``max_f sqrt(n) |int (p_hat - p) f - (P_n f - int f p)|``.

    Test functions are rescaled to order-``s`` norm at most one.
    """
    p_hat = fit.density
    rule = rule or gauss_legendre(p_hat.interval, default_nodes(p_hat.J))
    pt = _true_values(p_true, rule.nodes)
    ph = p_hat(rule.nodes)
    root_n = math.sqrt(sample.n)
    best = 0.0
    for f in test_fns:
        norm = sobolev_norm(f, s)
        if norm > 1.0:
            f = f * (1.0 / norm)
        fv = f(rule.nodes)
        lin = float(np.dot(rule.weights, (ph - pt) * fv))
        emp = sample.mean(f(sample.points)) - float(np.dot(rule.weights, pt * fv))
        best = max(best, root_n * abs(lin - emp))
    return best


@dataclass
class SqrtLemmaCheck:
    distance: float
    bound: float
    K: float
    sup_gap: float
    certified: bool

    @property
    def holds(self) -> bool:
        return self.distance <= self.bound * (1 + 1e-9) + 1e-12


def sqrt_lemma_check(ctx: ObjectiveContext, fam: ParametricFamily, theta_smd, theta_md,
                     per_axis: int = 5, pad: float = 0.05, segment_points: int = 11) -> SqrtLemmaCheck:
    """Compare ``||u - v||`` with ``2 K^{-1/2} sup_U |Q_nk - Q_n|^{1/2}``.

    ``U`` is the box centred at the MD estimate with half-width twice the
    gap plus ``pad`` (clipped to the parameter box); the supremum is taken
    over a grid in ``U`` together with both estimates, and ``K`` is the
    smallest Hessian eigenvalue of ``Q_n`` over the grid and the segment.
    """
    u = np.asarray(theta_smd, dtype=float)
    v = np.asarray(theta_md, dtype=float)
    half = 2.0 * np.abs(u - v).max() + pad
    lo = np.maximum(v - half, fam.theta_lo)
    hi = np.minimum(v + half, fam.theta_hi)
    axes = [np.linspace(l, h, per_axis) for l, h in zip(lo, hi)]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    points = np.vstack([grid, u, v])
    gaps = [abs(Q_nk(ctx, th) - Q_n(ctx, th, fam)) for th in points]
    seg = [v + s * (u - v) for s in np.linspace(0.0, 1.0, segment_points)]
    K = min(float(np.linalg.eigvalsh(d2Q_n(ctx, th, fam))[0]) for th in list(grid) + seg)
    sup_gap = float(max(gaps))
    dist = float(np.linalg.norm(u - v))
    if K <= 0:
        return SqrtLemmaCheck(dist, math.inf, K, sup_gap, False)
    return SqrtLemmaCheck(dist, 2.0 * math.sqrt(sup_gap / K), K, sup_gap, True)
