"""The constraint set of unit-mass densities with a floor and a Sobolev radius.

A density is feasible for an :class:`AuxiliaryModel` when

* it integrates to one (``a_0 = L**-0.5``),
* it is at least ``zeta`` on the positivity grid, and
* its order-``t`` spectral norm is at most ``D``.

All distances between coefficient vectors use the weighted metric
``<u, v>_W = sum_j (1 + (j*pi/L)**2)**t * u_j * v_j`` in which the
Sobolev ball is a round ball.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import brentq

from .errors import IntervalMismatchError, ProjectionError
from .sobolev import (
    Interval,
    SpectralFunction,
    cosine_basis,
    embedding_constant,
    integrate,
    sobolev_norm,
    sobolev_weights,
)

DEFAULT_GRID_POINTS = 512
MEMBERSHIP_TOL = 1e-7


def default_dimension(n: int, t: float) -> int:
    """Basis dimension ``ceil(8 * n**(1/(2t+1)))`` clamped to [16, 256]."""
    J = math.ceil(8.0 * n ** (1.0 / (2.0 * t + 1.0)))
    return int(min(max(J, 16), 256))


@dataclass(frozen=True, eq=False)
class AuxiliaryModel:
    interval: Interval
    t: float
    zeta: float
    D: float
    J: int
    M: int = DEFAULT_GRID_POINTS
    positivity_grid: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        L = self.interval.length
        if not self.t > 0.5:
            raise ValueError(f"smoothness order must exceed 1/2, got {self.t}")
        if self.zeta < 0 or self.D <= 0:
            raise ValueError("need zeta >= 0 and D > 0")
        # boundary cases (singleton model) are allowed; the standing
        # assumption zeta < 1/L < D**2 is reported by `is_standing`
        if not self.zeta <= 1.0 / L * (1 + 1e-12) or not 1.0 / L <= self.D**2 * (1 + 1e-12):
            raise ValueError(f"empty model: need zeta <= 1/L <= D^2 (zeta={self.zeta}, "
                             f"1/L={1 / L}, D^2={self.D ** 2})")
        if int(self.J) < 0:
            raise ValueError("J must be non-negative")
        object.__setattr__(self, "J", int(self.J))
        grid = self.positivity_grid
        if grid is None:
            if self.M < 2:
                raise ValueError("positivity grid needs at least two points")
            grid = self.interval.grid(self.M)
        grid = np.array(grid, dtype=float)
        if grid.size < 2 or np.any(np.diff(grid) < 0) or grid[0] < self.interval.a \
                or grid[-1] > self.interval.b:
            raise ValueError("positivity grid must be sorted, inside [a, b], size >= 2")
        grid.flags.writeable = False
        object.__setattr__(self, "positivity_grid", grid)
        object.__setattr__(self, "M", int(grid.size))

    @property
    def is_standing(self) -> bool:
        L = self.interval.length
        return self.zeta < 1.0 / L < self.D**2

    @property
    def a0(self) -> float:
        return 1.0 / math.sqrt(self.interval.length)

    @property
    def free_radius(self) -> float:
        """Radius of the ball for the non-constant coefficients."""
        return math.sqrt(max(self.D**2 - 1.0 / self.interval.length, 0.0))

    @cached_property
    def weights(self) -> np.ndarray:
        w = sobolev_weights(self.interval, self.J, self.t)
        w.flags.writeable = False
        return w

    @cached_property
    def grid_basis(self) -> np.ndarray:
        B = cosine_basis(self.interval, self.positivity_grid, self.J)
        B.flags.writeable = False
        return B

    def uniform(self) -> SpectralFunction:
        return SpectralFunction.uniform_density(self.interval, self.J)

    def with_(self, **changes) -> "AuxiliaryModel":
        kw = dict(interval=self.interval, t=self.t, zeta=self.zeta, D=self.D, J=self.J, M=self.M)
        kw.update(changes)
        return AuxiliaryModel(**kw)

    def to_dict(self) -> dict:
        return {"a": self.interval.a, "b": self.interval.b, "t": self.t, "zeta": self.zeta,
                "D": self.D, "J": self.J, "M": self.M}

    @classmethod
    def from_dict(cls, d: dict) -> "AuxiliaryModel":
        return cls(Interval(d["a"], d["b"]), t=float(d["t"]), zeta=float(d["zeta"]),
                   D=float(d["D"]), J=int(d["J"]), M=int(d.get("M", DEFAULT_GRID_POINTS)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class Membership:
    """Outcome of :func:`is_member`; truthy iff no constraint is violated."""

    member: bool
    violations: dict

    def __bool__(self):
        return self.member


def _coeffs_for(m: AuxiliaryModel, p: SpectralFunction) -> np.ndarray:
    if p.interval != m.interval:
        raise IntervalMismatchError("density and model live on different intervals")
    if p.J > m.J:
        raise ValueError(f"density has dimension {p.J} > model dimension {m.J}")
    return p.padded(m.J).coeffs


def grid_min(m: AuxiliaryModel, p: SpectralFunction) -> float:
    return float((m.grid_basis @ _coeffs_for(m, p)).min())


def is_member(m: AuxiliaryModel, p: SpectralFunction, tol: float = MEMBERSHIP_TOL) -> Membership:
    c = _coeffs_for(m, p)
    violations = {}
    mass_gap = abs(integrate(p) - 1.0)
    if mass_gap > tol:
        violations["unit_mass"] = mass_gap
    low = float((m.grid_basis @ c).min())
    if low < m.zeta - tol:
        violations["floor"] = m.zeta - low
    norm = sobolev_norm(p, m.t)
    if norm > m.D + tol:
        violations["sobolev_ball"] = norm - m.D
    return Membership(not violations, violations)


def is_interior(m: AuxiliaryModel, p: SpectralFunction, margin: float) -> bool:
    if margin <= 0:
        raise ValueError("margin must be positive")
    return sobolev_norm(p, m.t) <= m.D - margin and grid_min(m, p) >= m.zeta + margin


def floor_collapse_threshold(m: AuxiliaryModel) -> float:
    """Largest floor below which the pointwise constraint can never bind."""
    L = m.interval.length
    spread = math.sqrt(max(m.D**2 - 1.0 / L, 0.0))
    if spread == 0.0:
        return 1.0 / L
    return max(0.0, 1.0 / L - embedding_constant(m.t, m.interval) * spread)


def floor_can_bind(m: AuxiliaryModel) -> bool:
    return not m.zeta < floor_collapse_threshold(m)


def _project_mass_ball(m: AuxiliaryModel, y: np.ndarray) -> np.ndarray:
    x = y.copy()
    x[0] = m.a0
    R = m.free_radius
    r = math.sqrt(float(np.dot(m.weights[1:], x[1:] ** 2)))
    if r > R:
        x[1:] *= R / r if r > 0 else 0.0
    return x


def weighted_norm(m: AuxiliaryModel, v: np.ndarray) -> float:
    return math.sqrt(float(np.dot(m.weights, v * v)))


def _project_floor(G: np.ndarray, h: np.ndarray, c: np.ndarray, tol: float = 1e-13,
                   max_iter: int = 2000) -> np.ndarray:
    """Euclidean projection of ``c`` onto the polyhedron ``{z : G @ z >= h}``.

    Dual active-set method (Goldfarb & Idnani) specialised to an identity
    Hessian: start from the unconstrained minimiser ``c``, add the most
    violated constraint, and drop constraints whose multiplier would turn
    negative.  Exact up to rounding, unlike interior-point solvers.
    """
    z = c.astype(float).copy()
    scale = tol * max(1.0, float(np.max(np.abs(h))))
    active: list[int] = []
    u = np.zeros(0)
    it = 0
    while True:
        slack = G @ z - h
        p = int(np.argmin(slack))
        if slack[p] >= -scale:
            return z
        u_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                raise ProjectionError("active-set projection did not converge", float(-slack[p]))
            n_p = G[p]
            if active:
                N = G[active].T
                r, *_ = np.linalg.lstsq(N, n_p, rcond=None)
                d = n_p - N @ r
            else:
                r = np.zeros(0)
                d = n_p
            # dual (partial) step length
            t1, k = np.inf, -1
            pos = np.flatnonzero(r > 1e-14)
            if pos.size:
                ratios = u[pos] / r[pos]
                j = int(np.argmin(ratios))
                t1, k = float(ratios[j]), int(pos[j])
            dn = float(d @ n_p)
            viol = float(h[p] - n_p @ z)
            t2 = viol / dn if dn > 1e-14 * float(n_p @ n_p) else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                raise ProjectionError("floor constraints are infeasible", viol)
            if np.isfinite(t2):
                z = z + t * d
            u = u - t * r
            u_p += t
            if t == t2:
                active.append(p)
                u = np.append(u, u_p)
                break
            del active[k]
            u = np.delete(u, k)


def _floor_block(m: AuxiliaryModel):
    """Floor constraints on the free coefficients in ``z = W^{1/2} x`` form."""
    sw = np.sqrt(m.weights[1:])
    G = m.grid_basis[:, 1:] / sw
    h = m.zeta - m.grid_basis[:, 0] * m.a0
    return sw, G, h


def _project_exact(m: AuxiliaryModel, q: np.ndarray, tol: float) -> np.ndarray:
    # KKT: the free part is the floor-polyhedron projection of y/(1 + nu),
    # with nu >= 0 the ball multiplier; its norm is non-increasing in nu.
    sw, G, h = _floor_block(m)
    zy = q[1:] * sw
    R = m.free_radius

    def solve(nu):
        return _project_floor(G, h, zy / (1.0 + nu))

    z = solve(0.0)
    if np.linalg.norm(z) > R:
        excess = lambda s: np.linalg.norm(solve(np.expm1(s))) - R
        hi = 1.0
        while excess(hi) > 0:
            hi *= 2.0
            if hi > 700:
                raise ProjectionError("ball multiplier search diverged", excess(hi))
        s = brentq(excess, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        z = solve(np.expm1(s))
        nz = np.linalg.norm(z)
        if nz > R:
            z *= R / nz
    x = np.empty_like(q)
    x[0] = m.a0
    x[1:] = z / sw
    return x


def _project_dykstra(m: AuxiliaryModel, q: np.ndarray, tol: float, max_sweeps: int) -> np.ndarray:
    # one block per grid halfspace; the halfspace projections are closed
    # form in the weighted metric and only active ones are visited
    Bg = m.grid_basis
    dirs = Bg / m.weights                  # rows: W^{-1} b_g
    nrm = np.einsum("ij,ij->i", Bg, dirs)  # b_g' W^{-1} b_g
    gram = Bg @ dirs.T
    beta = np.zeros(m.M)                   # halfspace increments are -beta_g W^{-1} b_g
    incr_a = np.zeros_like(q)
    x = q
    last = np.inf
    for _ in range(max_sweeps):
        start = x
        y = x + incr_a
        x = _project_mass_ball(m, y)
        incr_a = y - x
        dots = Bg @ x
        g = 0
        while g < m.M:
            active = np.flatnonzero((beta[g:] > 0) | (dots[g:] < m.zeta))
            if active.size == 0:
                break
            g += int(active[0])
            new_beta = max(0.0, m.zeta - dots[g] + beta[g] * nrm[g]) / nrm[g]
            delta = new_beta - beta[g]
            if delta != 0.0:
                x = x + delta * dirs[g]
                dots = dots + delta * gram[:, g]
            beta[g] = new_beta
            g += 1
        last = weighted_norm(m, x - start)
        if last < tol:
            return x
    raise ProjectionError("Dykstra projection did not converge", last)


def project(m: AuxiliaryModel, q, tol: float = 1e-10, max_sweeps: int = 10000,
            method: str = "exact") -> np.ndarray:
    """Nearest feasible coefficient vector to ``q`` in the weighted metric.

    The mass constraint and the ball are handled in closed form (reset
    ``a_0``, rescale radially).  When the floor can bind, ``method="exact"``
    (default) searches the ball multiplier with Brent's method and projects
    onto the floor polyhedron as a least-distance programme;
    ``method="dykstra"`` runs Dykstra's alternating projections over the
    mass/ball block and the ``M`` halfspaces, which is exact in the limit
    but converges slowly when many grid halfspaces are active.
    """
    if method not in ("exact", "dykstra"):
        raise ValueError(f"unknown projection method {method!r}")
    q = np.asarray(q, dtype=float)
    if q.size > m.J + 1:
        raise ValueError(f"vector has dimension {q.size - 1} > model dimension {m.J}")
    if q.size < m.J + 1:
        q = np.concatenate([q, np.zeros(m.J + 1 - q.size)])
    x = _project_mass_ball(m, q)
    if not floor_can_bind(m) or (m.grid_basis @ x).min() >= m.zeta:
        return x
    if m.free_radius == 0.0:
        return x
    if method == "exact":
        return _project_exact(m, q, tol)
    return _project_dykstra(m, q, tol, max_sweeps)


def random_feasible(m: AuxiliaryModel, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """A random feasible coefficient vector (used for random restarts)."""
    raw = rng.standard_normal(m.J + 1) * scale / np.sqrt(m.weights)
    raw[0] = m.a0
    R = m.free_radius
    r = weighted_norm(m, np.concatenate([[0.0], raw[1:]]))
    if r > 0:
        raw[1:] *= rng.uniform(0.2, 1.0) * R / r
    return project(m, raw)
