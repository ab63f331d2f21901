"""Parametric families, uniform draws and the inverse-CDF simulation mechanism.

A simulation mechanism turns one fixed batch of uniforms ``V_1..V_k`` into
a sample from ``p_theta`` for *every* theta via ``rho(v, theta) =
F_theta^{-1}(v)``.  Reusing the batch across theta (common random
numbers) makes every simulated statistic a deterministic, continuous
function of theta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import MechanismError, NumericError
from .npml import Sample
from .sobolev import (
    Interval,
    QuadratureRule,
    SpectralFunction,
    UNIT_INTERVAL,
    gauss_legendre,
)

# stream identifiers inside one replication
DATA_STREAM = 0
SIM_STREAM = 1
START_STREAM = 2

_TWO53 = float(2**53)


# --------------------------------------------------------------------------
# families


@dataclass(frozen=True, eq=False)
class ParametricFamily:
    """Base class: densities ``p(x, theta)`` on ``interval`` for theta in a box.

    Subclasses implement :meth:`density`, :meth:`dtheta` and :meth:`d2theta`,
    all vectorised over ``x`` (any shape); the derivative arrays append one
    (resp. two) trailing axes of length ``dim``.
    """

    name: str
    interval: Interval
    theta_lo: np.ndarray
    theta_hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.theta_lo, dtype=float).ravel()
        hi = np.array(self.theta_hi, dtype=float).ravel()
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("invalid parameter box")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "theta_lo", lo)
        object.__setattr__(self, "theta_hi", hi)

    @property
    def dim(self) -> int:
        return self.theta_lo.size

    def density(self, x, theta) -> np.ndarray:
        raise NotImplementedError

    def dtheta(self, x, theta) -> np.ndarray:
        raise NotImplementedError

    def d2theta(self, x, theta) -> np.ndarray:
        raise NotImplementedError

    def in_box(self, theta, tol: float = 0.0) -> bool:
        th = np.asarray(theta, dtype=float)
        return bool(np.all(th >= self.theta_lo - tol) and np.all(th <= self.theta_hi + tol))

    def on_boundary(self, theta, tol: float = 1e-6) -> bool:
        th = np.asarray(theta, dtype=float)
        span = np.maximum(self.theta_hi - self.theta_lo, 1e-300)
        return bool(np.any(np.abs(th - self.theta_lo) <= tol * span)
                    or np.any(np.abs(th - self.theta_hi) <= tol * span))

    def grid(self, per_axis: int) -> np.ndarray:
        """Cartesian grid over the box, shape ``(per_axis**dim, dim)``."""
        axes = [np.linspace(l, h, per_axis) for l, h in zip(self.theta_lo, self.theta_hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def as_spectral(self, theta, J: int) -> SpectralFunction:
        return SpectralFunction.from_callable(lambda x: self.density(x, theta), self.interval, J)

    def cdf(self, x, theta) -> np.ndarray | None:
        """Closed-form CDF if available, else ``None`` (quadrature is used)."""
        return None


@dataclass(frozen=True, eq=False)
class ExponentialFamily(ParametricFamily):
    """``p(x, theta) = exp(theta . T(x) - psi(theta))`` with statistics ``T``."""

    statistics: Callable = None
    quad_nodes: int = 200

    def _stats(self, x) -> np.ndarray:
        return np.asarray(self.statistics(np.asarray(x, dtype=float)))

    @cached_property
    def _rule(self) -> QuadratureRule:
        return gauss_legendre(self.interval, self.quad_nodes)

    @cached_property
    def _rule_stats(self) -> np.ndarray:
        return self._stats(self._rule.nodes)          # (dim, nodes)

    def _moments(self, theta):
        th = np.asarray(theta, dtype=float)
        T = self._rule_stats
        expo = th @ T
        shift = expo.max()
        w = self._rule.weights * np.exp(expo - shift)
        Z = w.sum()
        psi = shift + math.log(Z)
        pw = w / Z
        mean = T @ pw
        Tc = T - mean[:, None]
        cov = (Tc * pw) @ Tc.T
        return psi, mean, cov

    def log_normalizer(self, theta) -> float:
        return self._moments(theta)[0]

    def mean_statistic(self, theta) -> np.ndarray:
        return self._moments(theta)[1]

    def density(self, x, theta):
        psi = self._moments(theta)[0]
        T = self._stats(x)
        return np.exp(np.tensordot(np.asarray(theta, dtype=float), T, axes=1) - psi)

    def dtheta(self, x, theta):
        psi, mean, _ = self._moments(theta)
        T = self._stats(x)
        p = np.exp(np.tensordot(np.asarray(theta, dtype=float), T, axes=1) - psi)
        Tc = np.moveaxis(T, 0, -1) - mean
        return Tc * p[..., None]

    def d2theta(self, x, theta):
        psi, mean, cov = self._moments(theta)
        T = self._stats(x)
        p = np.exp(np.tensordot(np.asarray(theta, dtype=float), T, axes=1) - psi)
        Tc = np.moveaxis(T, 0, -1) - mean
        outer = Tc[..., :, None] * Tc[..., None, :]
        return (outer - cov) * p[..., None, None]

    def fisher_closed_form(self, theta) -> np.ndarray:
        """Covariance of the sufficient statistic (equals the Fisher information)."""
        return self._moments(theta)[2]


@dataclass(frozen=True, eq=False)
class FixedDensityFamily(ParametricFamily):
    """A single density that ignores theta (derivatives vanish)."""

    spectral: SpectralFunction = None

    def density(self, x, theta):
        x = np.asarray(x, dtype=float)
        return self.spectral(x.ravel()).reshape(x.shape) if x.ndim else \
            np.asarray(self.spectral(float(x)))

    def dtheta(self, x, theta):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.dim,))

    def d2theta(self, x, theta):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.dim, self.dim))

    def cdf(self, x, theta):
        x = np.asarray(x, dtype=float)
        return self.spectral.cdf(x.ravel()).reshape(x.shape)


def make_exp_tilt_family(interval: Interval = UNIT_INTERVAL,
                         theta_box=((-3.0, 3.0), (-3.0, 3.0))) -> ExponentialFamily:
    """``p(x, theta) = exp(theta_1 x + theta_2 x^2 - psi(theta))``."""
    box = np.asarray(theta_box, dtype=float)
    return ExponentialFamily("exp_tilt", interval, box[:, 0], box[:, 1],
                             statistics=lambda x: np.stack([x, x * x]))


def make_cos_tilt_family(interval: Interval = UNIT_INTERVAL,
                         theta_box=((-0.5, 0.5), (-0.25, 0.25))) -> ExponentialFamily:
    """``p(x, theta) = exp(theta_1 cos(pi u) + theta_2 cos(2 pi u) - psi)``, u = (x-a)/L.

    Every odd derivative of these densities vanishes at the endpoints, so
    their cosine coefficients decay fast and the order-2 spectral norm
    stays bounded as the basis grows.
    """
    box = np.asarray(theta_box, dtype=float)
    a, L = interval.a, interval.length

    def stats(x):
        u = np.pi * (x - a) / L
        return np.stack([np.cos(u), np.cos(2.0 * u)])

    return ExponentialFamily("cos_tilt", interval, box[:, 0], box[:, 1], statistics=stats)


def make_uniform_family(interval: Interval = UNIT_INTERVAL) -> FixedDensityFamily:
    return FixedDensityFamily("uniform", interval, np.zeros(1), np.zeros(1),
                              spectral=SpectralFunction.uniform_density(interval))


MIXTURE_WEIGHTS = (0.65, 0.35)


def mixture_density(interval: Interval = UNIT_INTERVAL) -> SpectralFunction:
    """Two-bump mixture ``0.65 q_1 + 0.35 q_2`` as an exact cosine polynomial.

    ``q_1 = 1 + 0.9 cos(pi u) + 0.2 cos(2 pi u)`` has its mode at the left
    end, ``q_2`` (the mirror image) at the right end; both are positive
    densities on the unit scale.
    """
    L = interval.length
    w1, w2 = MIXTURE_WEIGHTS
    c1 = 0.9 * (w1 - w2)          # cos(pi u) amplitude
    c2 = 0.2                      # cos(2 pi u) amplitude (shared)
    coeffs = np.array([1.0, c1, c2]) / L
    # convert amplitudes of cos(j pi u)/L to basis coefficients
    coeffs[0] *= math.sqrt(L)
    coeffs[1:] *= math.sqrt(L / 2.0)
    return SpectralFunction(interval, coeffs)


def make_mixture_family(interval: Interval = UNIT_INTERVAL) -> FixedDensityFamily:
    return FixedDensityFamily("mixture_misspec", interval, np.zeros(1), np.zeros(1),
                              spectral=mixture_density(interval))


FAMILIES = {
    "exp_tilt": make_exp_tilt_family,
    "cos_tilt": make_cos_tilt_family,
    "uniform": make_uniform_family,
    "mixture_misspec": make_mixture_family,
}


def make_family(name: str, interval: Interval = UNIT_INTERVAL, theta_box=None) -> ParametricFamily:
    try:
        factory = FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}") from None
    if theta_box is not None:
        return factory(interval, theta_box)
    return factory(interval)


def fisher_information(fam: ParametricFamily, theta, rule: QuadratureRule | None = None) -> np.ndarray:
    """``integral dp dp' / p`` by quadrature."""
    rule = rule or gauss_legendre(fam.interval)
    p = fam.density(rule.nodes, theta)
    if np.any(p < 1e-12):
        k = int(np.flatnonzero(p < 1e-12)[0])
        raise NumericError("density below 1e-12", index=k)
    d = fam.dtheta(rule.nodes, theta)
    I = (d * (rule.weights / p)[:, None]).T @ d
    return 0.5 * (I + I.T)


# --------------------------------------------------------------------------
# uniform draws


@dataclass(frozen=True, eq=False)
class UniformDraws:
    values: np.ndarray
    seed: int
    stream_id: int
    replication: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def k(self) -> int:
        return self.values.size

    @cached_property
    def ecdf_knots(self):
        """Knots of the piecewise-linear empirical CDF of the draws."""
        s = np.sort(self.values)
        k = s.size
        xs = np.concatenate([[0.0], s, [1.0]])
        ys = np.concatenate([[0.0], (np.arange(1, k + 1) - 0.5) / k, [1.0]])
        xs.flags.writeable = False
        ys.flags.writeable = False
        return xs, ys


def stream_generator(seed: int, stream_id: int, replication: int = 0) -> np.random.Generator:
    """Counter-based Philox generator keyed by (seed, replication, stream)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replication), int(stream_id)))
    return np.random.Generator(np.random.Philox(ss))


def open_uniforms(gen: np.random.Generator, k: int) -> np.ndarray:
    """``k`` uniforms in the open interval (0, 1)."""
    u = gen.random(int(k))
    return (np.floor(u * _TWO53) + 0.5) / _TWO53


def make_draws(seed: int, stream_id: int, k: int, replication: int = 0) -> UniformDraws:
    if k < 0:
        raise ValueError("k must be non-negative")
    gen = stream_generator(seed, stream_id, replication)
    return UniformDraws(open_uniforms(gen, k), int(seed), int(stream_id), int(replication))


# --------------------------------------------------------------------------
# simulation mechanism


@dataclass(frozen=True, eq=False)
class _CdfTable:
    edges: np.ndarray      # panel edges
    cum: np.ndarray        # normalised CDF at the edges
    total: float           # raw mass (≈ 1)


@dataclass(frozen=True, eq=False)
class SimulationMechanism:
    """Inverse-CDF mechanism ``rho(v, theta) = F_theta^{-1}(v)``."""

    family: ParametricFamily
    gamma: float = 1.0
    inverse_cdf_tol: float = 1e-10
    bisection_steps: int = 30
    panels: int = 128
    panel_nodes: int = 10
    max_newton: int = 20

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    @cached_property
    def _panel_rule(self):
        return np.polynomial.legendre.leggauss(self.panel_nodes)

    def _partial(self, lo, hi, theta):
        """``integral_lo^hi p(., theta)`` panel-wise (lo, hi inside one panel)."""
        xg, wg = self._panel_rule
        half = 0.5 * (hi - lo)
        nodes = (lo + half)[..., None] + half[..., None] * xg
        vals = self.family.density(nodes, theta)
        if np.any(vals <= 0):
            raise MechanismError("density is not positive; the CDF is not strictly increasing")
        return half * (vals @ wg)

    def table(self, theta) -> _CdfTable:
        iv = self.family.interval
        edges = np.linspace(iv.a, iv.b, self.panels + 1)
        masses = self._partial(edges[:-1], edges[1:], theta)
        cum = np.concatenate([[0.0], np.cumsum(masses)])
        total = float(cum[-1])
        return _CdfTable(edges, cum / total, total)

    def cdf(self, x, theta, table: _CdfTable | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        closed = self.family.cdf(x, theta)
        if closed is not None:
            return closed
        tab = table or self.table(theta)
        k = np.clip(np.searchsorted(tab.edges, x, side="right") - 1, 0, self.panels - 1)
        base = tab.edges[k]
        return tab.cum[k] + self._partial(base, x, theta) / tab.total

    def inverse_cdf(self, v, theta) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if np.any((v <= 0) | (v >= 1)):
            raise ValueError("uniform draws must lie in the open interval (0, 1)")
        tab = self.table(theta)
        k = np.clip(np.searchsorted(tab.cum, v, side="right") - 1, 0, self.panels - 1)
        lo = tab.edges[k].copy()
        hi = tab.edges[k + 1].copy()
        for _ in range(self.bisection_steps):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid, theta, tab) < v
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        x = 0.5 * (lo + hi)
        for it in range(self.max_newton):
            resid = self.cdf(x, theta, tab) - v
            # always take one Newton step: it is exact when the CDF is linear
            if it and np.all(np.abs(resid) <= self.inverse_cdf_tol):
                break
            dens = self.family.density(x, theta) / tab.total
            x = np.clip(x - resid / dens, lo, hi)
        else:
            raise MechanismError("Newton polish did not reach the inverse-CDF tolerance")
        return x

    @cached_property
    def R_bound(self) -> float:
        return estimate_R_bound(self)


def rho(mech: SimulationMechanism, v, theta):
    """Simulated point(s) ``F_theta^{-1}(v)``; scalar in, scalar out."""
    scalar = np.ndim(v) == 0
    x = mech.inverse_cdf(np.atleast_1d(v), theta)
    return float(x[0]) if scalar else x


def _clip_inside(x: np.ndarray, iv: Interval) -> np.ndarray:
    # inverse-CDF values are in the closed interval; nudge exact endpoints in
    eps = 1e-12 * iv.length
    return np.clip(x, iv.a + eps, iv.b - eps)


def simulate_sample(mech: SimulationMechanism, draws: UniformDraws, theta) -> Sample:
    x = mech.inverse_cdf(draws.values, theta)
    return Sample(_clip_inside(x, mech.family.interval), mech.family.interval)




def simulate_binned(mech: SimulationMechanism, draws: UniformDraws, theta, bins: int = 2048) -> Sample:
    """Binned simulated sample with counts continuous in theta.

    The count of bin ``[e_b, e_{b+1})`` is ``k * (G(F(e_{b+1})) - G(F(e_b)))``
    where ``G`` is the piecewise-linear empirical CDF of the draws; each
    bin is represented by its midpoint.  For large ``k`` this is a
    faithful, much cheaper stand-in for the exact sample.
    """
    iv = mech.family.interval
    edges = np.linspace(iv.a, iv.b, bins + 1)
    tab = mech.table(theta)
    F = mech.cdf(edges, theta, tab)
    F[0], F[-1] = 0.0, 1.0
    xs, ys = draws.ecdf_knots
    # piecewise-linear interpolation (np.interp re-validates the 1e6 knots)
    j = np.clip(np.searchsorted(xs, F, side="right") - 1, 0, xs.size - 2)
    width = xs[j + 1] - xs[j]
    G = ys[j] + (ys[j + 1] - ys[j]) * np.where(width > 0, (F - xs[j]) / np.where(width > 0, width, 1.0), 0.0)
    counts = draws.k * np.diff(G)
    counts = np.maximum(counts, 0.0)
    centres = 0.5 * (edges[:-1] + edges[1:])
    return Sample(centres, iv, counts)


def dtheta_rho(mech: SimulationMechanism, v, theta, rule_nodes: int = 64) -> np.ndarray:
    """Gradient of ``rho(v, .)`` at theta by implicit differentiation.

    ``d rho / d theta = - (d F_theta / d theta)(x) / p_theta(x)``, x = rho(v, theta).
    """
    fam = mech.family
    x = np.atleast_1d(mech.inverse_cdf(np.atleast_1d(v), theta))
    xg, wg = np.polynomial.legendre.leggauss(rule_nodes)
    a = fam.interval.a
    half = 0.5 * (x - a)
    nodes = (a + half)[:, None] + half[:, None] * xg
    dF = np.einsum("nqm,q->nm", fam.dtheta(nodes, theta), wg) * half[:, None]
    return -dF / fam.density(x, theta)[:, None]


def estimate_R_bound(mech: SimulationMechanism, theta_per_axis: int = 5, n_v: int = 65,
                     safety: float = 1.25) -> float:
    """Grid estimate of ``sup ||d rho / d theta||`` with a safety factor."""
    fam = mech.family
    v = (np.arange(n_v) + 0.5) / n_v
    best = 0.0
    for th in fam.grid(theta_per_axis):
        best = max(best, float(np.linalg.norm(dtheta_rho(mech, v, th), axis=1).max()))
    return safety * best
