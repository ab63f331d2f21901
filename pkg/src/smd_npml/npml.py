"""Non-parametric maximum likelihood over the auxiliary model.

The estimator maximises the (weighted) empirical log-likelihood

    L_n(p) = sum_i w_i log p(X_i) / sum_i w_i

over the feasible set of an :class:`~smd_npml.auxiliary.AuxiliaryModel`.
Only the free coefficients ``a_1..a_J`` move; ``a_0`` is pinned by the
unit-mass constraint.

Two solvers are provided.

``newton`` (default)
    Trust-region Newton ascent where the trust region *is* the Sobolev
    ball: each step maximises the local quadratic model exactly over the
    ball (eigendecomposition plus a scalar secular equation), followed by
    Armijo backtracking.  If the resulting density dips below the floor
    on the positivity grid, the floor is re-imposed with a log-barrier
    whose weight is driven to ~1e-12.
``pga``
    Projected gradient ascent in the weighted metric with Armijo
    backtracking and the exact feasible-set projection.  Much slower; kept
    as a reference implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import lsq_linear

from .auxiliary import AuxiliaryModel, MEMBERSHIP_TOL, project, weighted_norm
from .errors import (
    GradientUndefinedError,
    IntervalMismatchError,
    OptimizerError,
    PreconditionError,
)
from .sobolev import Interval, SpectralFunction, cosine_basis, sobolev_norm


@dataclass(frozen=True, eq=False)
class Sample:
    """Observations strictly inside an interval, optionally with weights.

    Weighted samples represent binned data: ``points`` are bin
    representatives and ``weights`` the (possibly fractional) counts.
    """

    points: np.ndarray
    interval: Interval
    weights: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.points, dtype=float).ravel()
        if x.size == 0:
            raise ValueError("a sample needs at least one point")
        iv = self.interval
        if not np.all((x > iv.a) & (x < iv.b)):
            raise ValueError(f"sample points must lie strictly inside ({iv.a}, {iv.b})")
        x.flags.writeable = False
        object.__setattr__(self, "points", x)
        if self.weights is not None:
            w = np.array(self.weights, dtype=float).ravel()
            if w.shape != x.shape or np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
                raise ValueError("weights must be finite, non-negative, one per point, "
                                 "with positive total")
            keep = w > 0
            x = x[keep]
            w = w[keep]
            x.flags.writeable = False
            w.flags.writeable = False
            object.__setattr__(self, "points", x)
            object.__setattr__(self, "weights", w)

    @property
    def n(self) -> float:
        """Sample size (total weight for binned samples)."""
        return float(self.points.size if self.weights is None else self.weights.sum())

    @property
    def normalized_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.points.size, 1.0 / self.points.size)
        return self.weights / self.weights.sum()

    def mean(self, values) -> float:
        """Empirical mean ``P_n f`` of per-point values."""
        return float(np.dot(self.normalized_weights, values))


@dataclass(frozen=True)
class NpmlOptions:
    method: str = "newton"
    max_iter: int | None = None     # default 5000 for pga, 200 per Newton stage
    rel_tol: float = 1e-9
    patience: int = 5
    step0: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4
    active_tol: float = MEMBERSHIP_TOL
    barrier_start: float = 1e-2
    barrier_end: float = 1e-12
    barrier_factor: float = 0.01
    start: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.method not in ("newton", "pga"):
            raise ValueError(f"unknown NPML method {self.method!r}")


@dataclass(frozen=True, eq=False)
class NpmlFit:
    density: SpectralFunction
    loglik: float
    sphere_residual: float
    kkt_residual: float
    iterations: int
    converged: bool
    floor_active: bool = False
    method: str = "newton"

    def to_dict(self) -> dict:
        return {"density": self.density.to_dict(), "loglik": self.loglik,
                "sphere_residual": self.sphere_residual, "kkt_residual": self.kkt_residual,
                "iterations": self.iterations, "converged": self.converged,
                "floor_active": self.floor_active, "method": self.method}


def _check_interval(p: SpectralFunction, s: Sample):
    if p.interval != s.interval:
        raise IntervalMismatchError("density and sample live on different intervals")


def empirical_loglik(p: SpectralFunction, s: Sample) -> float:
    """Average log-likelihood; ``-inf`` if ``p`` is not positive at every point."""
    _check_interval(p, s)
    vals = cosine_basis(p.interval, s.points, p.J) @ p.coeffs
    if np.any(vals <= 0):
        return -math.inf
    return s.mean(np.log(vals))


def loglik_gradient(p: SpectralFunction, s: Sample) -> np.ndarray:
    """Coefficient gradient: component j is ``P_n(e_j / p)``."""
    _check_interval(p, s)
    B = cosine_basis(p.interval, s.points, p.J)
    vals = B @ p.coeffs
    if np.any(vals <= 0):
        bad = int(np.flatnonzero(vals <= 0)[0])
        raise GradientUndefinedError(f"density is {vals[bad]:.3g} <= 0 at sample point "
                                     f"{s.points[bad]!r}")
    return B.T @ (s.normalized_weights / vals)


def score_at_maximizer(fit: NpmlFit, s: Sample, test_fns) -> float:
    """``max_g |P_n(g / p_hat)|`` over mean-zero test functions ``g``."""
    p = fit.density
    _check_interval(p, s)
    vals = p(s.points)
    best = 0.0
    for g in test_fns:
        if g.interval != p.interval:
            raise IntervalMismatchError("test function lives on a different interval")
        if abs(g.coeffs[0]) > 1e-10 * max(1.0, float(np.abs(g.coeffs).max())):
            raise PreconditionError("test functions must integrate to zero")
        best = max(best, abs(s.mean(g(s.points) / vals)))
    return best


# --------------------------------------------------------------------------
# solver internals


class _Problem:
    """Log-likelihood (plus optional floor barrier) in free coordinates."""

    def __init__(self, m: AuxiliaryModel, s: Sample):
        self.m = m
        B = cosine_basis(m.interval, s.points, m.J)
        self.offset = B[:, 0] * m.a0
        self.B = np.ascontiguousarray(B[:, 1:])
        self.w = s.normalized_weights
        self.omega = m.weights[1:]
        self.R = m.free_radius
        self.Bg = np.ascontiguousarray(m.grid_basis[:, 1:])
        self.grid_offset = m.grid_basis[:, 0] * m.a0
        self.tau = 0.0

    def full(self, c):
        return np.concatenate([[self.m.a0], c])

    def data_values(self, c):
        return self.offset + self.B @ c

    def grid_values(self, c):
        return self.grid_offset + self.Bg @ c

    def value(self, c):
        p = self.data_values(c)
        if np.any(p <= 0):
            return -math.inf
        f = float(np.dot(self.w, np.log(p)))
        if self.tau:
            gap = self.grid_values(c) - self.m.zeta
            if np.any(gap <= 0):
                return -math.inf
            f += self.tau * float(np.mean(np.log(gap)))
        return f

    def derivatives(self, c):
        p = self.data_values(c)
        r = self.w / p
        g = self.B.T @ r
        H = -(self.B.T * (r / p)) @ self.B
        if self.tau:
            gap = self.grid_values(c) - self.m.zeta
            q = (self.tau / gap.size) / gap
            g = g + self.Bg.T @ q
            H -= (self.Bg.T * (q / gap)) @ self.Bg
        return g, H


def _secular_root(beta, sig, R, lo, hi):
    """Root of ``||beta / (sig + lam)|| = R`` in ``[lo, hi]``.

    Newton's method on ``1/R - 1/||y(lam)||`` (concave and increasing, so
    the iterates approach the root monotonically from the left), with a
    bisection safeguard.
    """
    beta2 = beta * beta
    lam = lo
    for _ in range(100):
        d = sig + lam
        with np.errstate(over="ignore", divide="ignore"):
            q2 = float(np.sum(beta2 / (d * d)))
            q3 = float(np.sum(beta2 / (d * d * d)))
        if not (math.isfinite(q2) and math.isfinite(q3)) or q3 == 0.0:
            lam = 0.5 * (lam + hi) if lam > 0 else math.sqrt(max(lo, 1e-300) * hi)
            continue
        ny = math.sqrt(q2)
        if ny < R:
            hi = lam
        new = lam + (ny / R - 1.0) * q2 / q3
        if not lo <= new <= hi:
            new = 0.5 * (lam + hi)
        if abs(new - lam) <= 1e-15 * max(new, 1e-300):
            return new
        lam = new
    return lam


def _ball_step(g, H, c, omega, R):
    """Maximiser of the quadratic model over ``sum omega c^2 <= R^2``."""
    si = 1.0 / np.sqrt(omega)
    A = -(H * si[:, None]) * si[None, :]
    A = 0.5 * (A + A.T)
    yc = c * np.sqrt(omega)
    b = si * g + A @ yc
    sig, V = np.linalg.eigh(A)
    sig = np.maximum(sig, 0.0)
    beta = V.T @ b
    if R == 0.0:
        return np.zeros_like(c)
    floor_sig = 1e-13 * max(float(sig[-1]), 1e-300)

    def norm_at(lam):
        with np.errstate(over="ignore", divide="ignore"):
            return math.sqrt(float(np.sum((beta / (sig + lam)) ** 2)))

    if sig[0] > floor_sig and norm_at(0.0) <= R:
        return V @ (beta / sig) * si
    hi = float(np.linalg.norm(b)) / R
    if hi <= 0.0:
        return c.copy()
    while norm_at(hi) > R:  # rounding guard
        hi *= 2.0
    lo = 0.0 if sig[0] > floor_sig else 1e-16 * (float(sig[-1]) + hi)
    if norm_at(lo) < R:
        # "hard case": the model is flat along its null space and the
        # regularised solution stays inside the ball; pad along a null
        # direction to reach the sphere (any such point is a maximiser)
        null = sig <= floor_sig
        inv = np.where(null, 0.0, 1.0 / np.where(null, 1.0, sig))
        y = V @ (beta * inv)
        ny = float(np.linalg.norm(y))
        v0 = V[:, int(np.flatnonzero(null)[0])]
        y = y + math.sqrt(max(R * R - ny * ny, 0.0)) * v0
        return y * si
    lam = _secular_root(beta, sig, R, lo, hi)
    y = V @ (beta / (sig + lam))
    ny = float(np.linalg.norm(y))
    if ny > R:
        y *= R / ny
    return y * si


def _newton_stage(prob: _Problem, c, opts: NpmlOptions, max_iter: int):
    f = prob.value(c)
    if not math.isfinite(f):
        raise OptimizerError("Newton stage started at an infeasible point")
    calm = 0
    for it in range(1, max_iter + 1):
        g, H = prob.derivatives(c)
        target = _ball_step(g, H, c, prob.omega, prob.R)
        d = target - c
        predicted = float(g @ d + 0.5 * d @ H @ d)
        if not math.isfinite(predicted):
            raise OptimizerError("non-finite quadratic model")
        if predicted <= 1e-15 * max(1.0, abs(f)):
            return c, f, it, True
        alpha = opts.step0
        while True:
            trial = c + alpha * d
            ft = prob.value(trial)
            if math.isfinite(ft) and ft >= f + opts.armijo * alpha * predicted:
                break
            alpha *= opts.shrink
            if alpha < 1e-12:
                return c, f, it, predicted < 1e-10
        change = abs(ft - f) / max(1.0, abs(f))
        c, f = trial, ft
        calm = calm + 1 if change < opts.rel_tol else 0
        if calm >= opts.patience or (alpha == opts.step0 and predicted < 1e-13):
            return c, f, it, True
    return c, f, max_iter, False


def _free_start(m: AuxiliaryModel, opts: NpmlOptions) -> np.ndarray:
    if opts.start is None:
        return np.zeros(m.J)
    start = np.asarray(opts.start, dtype=float)
    if start.size != m.J + 1:
        padded = np.zeros(m.J + 1)
        padded[: min(start.size, m.J + 1)] = start[: m.J + 1]
        start = padded
    return project(m, start)[1:]


def _interior_pull(prob: _Problem, c: np.ndarray, margin: float = 0.0) -> np.ndarray:
    # shrink toward the uniform density (strictly inside every constraint
    # under the standing assumption) until the floor holds strictly
    for _ in range(60):
        if np.min(prob.grid_values(c)) > prob.m.zeta + margin and \
                np.all(prob.data_values(c) > 0):
            return c
        c = 0.5 * c
    return np.zeros_like(c)


def _fit_newton(m: AuxiliaryModel, s: Sample, opts: NpmlOptions):
    prob = _Problem(m, s)
    max_iter = opts.max_iter or 200
    c = _free_start(m, opts)
    if not np.all(prob.data_values(c) > 0):
        c = _interior_pull(prob, c)
    c, f, iters, ok = _newton_stage(prob, c, opts, max_iter)
    floor_active = False
    if np.min(prob.grid_values(c)) < m.zeta:
        floor_active = True
        c = _free_start(m, opts)
        c = _interior_pull(prob, c)
        tau = opts.barrier_start
        while True:
            prob.tau = tau
            c, _, more, ok = _newton_stage(prob, c, opts, max_iter)
            iters += more
            if tau <= opts.barrier_end:
                break
            tau = max(tau * opts.barrier_factor, opts.barrier_end)
        prob.tau = 0.0
        f = prob.value(c)
    return prob, c, f, iters, ok, floor_active


def _fit_pga(m: AuxiliaryModel, s: Sample, opts: NpmlOptions):
    prob = _Problem(m, s)
    max_iter = opts.max_iter or 5000
    a = prob.full(_free_start(m, opts))
    if not np.all(prob.data_values(a[1:]) > 0):
        a = prob.full(_interior_pull(prob, a[1:]))
    f = prob.value(a[1:])
    winv = 1.0 / m.weights
    calm = 0
    it = 0
    ok = False
    while it < max_iter:
        it += 1
        p = prob.data_values(a[1:])
        g = np.concatenate([[np.dot(prob.w / p, prob.offset) / m.a0], prob.B.T @ (prob.w / p)])
        eta = opts.step0
        while True:
            trial = project(m, a + eta * winv * g)
            ft = prob.value(trial[1:])
            if math.isfinite(ft) and ft >= f + opts.armijo * float(g @ (trial - a)):
                break
            eta *= opts.shrink
            if eta < 1e-14:
                ft = None
                break
        if ft is None:
            ok = True  # no ascent direction left at machine precision
            break
        change = abs(ft - f) / max(1.0, abs(f))
        a, f = trial, ft
        calm = calm + 1 if change < opts.rel_tol else 0
        if calm >= opts.patience:
            ok = True
            break
    floor_active = bool(np.min(prob.grid_values(a[1:])) <= m.zeta + opts.active_tol)
    return prob, a[1:], f, it, ok, floor_active


def kkt_residual(m: AuxiliaryModel, s: Sample, coeffs, active_tol: float = MEMBERSHIP_TOL) -> float:
    """Distance (weighted metric) from the gradient to the normal cone.

    The cone is generated by the unit-mass equality, the ball (if the
    norm is within ``active_tol`` of ``D``) and the grid floor points
    within ``active_tol`` of ``zeta``.
    """
    a = np.asarray(coeffs, dtype=float)
    p = SpectralFunction(m.interval, a)
    g = loglik_gradient(p, s)
    winv = 1.0 / m.weights
    target = winv * g                       # Riesz representer in the W-metric
    gens = [np.eye(a.size)[0] * winv[0], -np.eye(a.size)[0] * winv[0]]
    free = a.copy()
    free[0] = 0.0
    if abs(weighted_norm(m, free) - m.free_radius) <= active_tol:
        gens.append(free)
    vals = m.grid_basis @ a
    for k in np.flatnonzero(vals <= m.zeta + active_tol):
        gens.append(-winv * m.grid_basis[k])
    sw = np.sqrt(m.weights)
    N = np.array(gens).T * sw[:, None]
    sol = lsq_linear(N, target * sw, bounds=(0.0, np.inf), method="bvls", tol=1e-14)
    return float(np.linalg.norm(N @ sol.x - target * sw))


def fit_npml(m: AuxiliaryModel, s: Sample, opts: NpmlOptions | None = None) -> NpmlFit:
    """Maximise the empirical log-likelihood over the auxiliary model."""
    opts = opts or NpmlOptions()
    if s.interval != m.interval:
        raise IntervalMismatchError("sample and model live on different intervals")
    with np.errstate(over="raise", invalid="raise"):
        try:
            if opts.method == "newton":
                prob, c, f, iters, ok, floor_active = _fit_newton(m, s, opts)
            else:
                prob, c, f, iters, ok, floor_active = _fit_pga(m, s, opts)
        except FloatingPointError as exc:
            raise OptimizerError(f"numeric overflow in NPML iteration: {exc}") from exc
    a = prob.full(c)
    density = SpectralFunction(m.interval, a)
    sphere = abs(sobolev_norm(density, m.t) - m.D)
    kkt = kkt_residual(m, s, a, opts.active_tol)
    return NpmlFit(density=density, loglik=f, sphere_residual=sphere, kkt_residual=kkt,
                   iterations=iters, converged=bool(ok), floor_active=floor_active,
                   method=opts.method)


def with_start(opts: NpmlOptions, coeffs) -> NpmlOptions:
    return replace(opts, start=None if coeffs is None else np.asarray(coeffs, dtype=float))
