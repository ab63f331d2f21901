"""Cosine-basis function spaces on a bounded interval.

Functions on ``(a, b)`` are stored as coefficients on the orthonormal basis

    e_0(x) = L**-0.5,   e_j(x) = (2/L)**0.5 * cos(j*pi*(x - a)/L),  j >= 1,

with ``L = b - a``.  The Sobolev norm of order ``s`` used throughout the
package is the diagonal spectral norm

    ||f||_s = ( sum_j (1 + (j*pi/L)**2)**s * a_j**2 )**0.5,

which reduces to the L2 norm for ``s = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError, IntervalMismatchError, InvalidOrderError, NumericError

DEFAULT_QUADRATURE_NODES = 200
DEFAULT_SUP_GRID = 4096


@dataclass(frozen=True)
class Interval:
    """Bounded open interval ``(a, b)``."""

    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        a, b = float(self.a), float(self.b)
        if not (math.isfinite(a) and math.isfinite(b)) or not a < b:
            raise ValueError(f"invalid interval ({a}, {b})")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def length(self) -> float:
        return self.b - self.a

    def grid(self, size: int) -> np.ndarray:
        """``size`` equally spaced points on the closed interval."""
        return np.linspace(self.a, self.b, int(size))

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b}


UNIT_INTERVAL = Interval(0.0, 1.0)


def cosine_basis(interval: Interval, x, J: int) -> np.ndarray:
    """Basis matrix with shape ``(len(x), J + 1)``; column j holds e_j(x)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    L = interval.length
    j = np.arange(J + 1)
    out = np.cos(np.multiply.outer(x - interval.a, j * (np.pi / L)))
    out *= math.sqrt(2.0 / L)
    out[:, 0] = 1.0 / math.sqrt(L)
    return out


def sobolev_weights(interval: Interval, J: int, s: float) -> np.ndarray:
    """Diagonal weights ``(1 + (j*pi/L)**2)**s`` for j = 0..J."""
    j = np.arange(J + 1)
    return (1.0 + (j * np.pi / interval.length) ** 2) ** s


@dataclass(frozen=True, eq=False)
class SpectralFunction:
    """A real function on ``interval`` given by cosine coefficients."""

    interval: Interval
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).ravel()
        if c.size == 0:
            raise ValueError("a SpectralFunction needs at least one coefficient")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def constant(cls, interval: Interval, value: float, J: int = 0) -> "SpectralFunction":
        c = np.zeros(J + 1)
        c[0] = value * math.sqrt(interval.length)
        return cls(interval, c)

    @classmethod
    def uniform_density(cls, interval: Interval, J: int = 0) -> "SpectralFunction":
        return cls.constant(interval, 1.0 / interval.length, J)

    @classmethod
    def from_callable(cls, fn, interval: Interval, J: int,
                      rule: "QuadratureRule | None" = None) -> "SpectralFunction":
        """L2 projection of ``fn`` onto the first J + 1 basis functions."""
        if rule is None:
            rule = gauss_legendre(interval, max(DEFAULT_QUADRATURE_NODES, 2 * J + 64))
        vals = np.asarray(fn(rule.nodes), dtype=float)
        B = cosine_basis(interval, rule.nodes, J)
        return cls(interval, B.T @ (rule.weights * vals))

    @property
    def J(self) -> int:
        return self.coeffs.size - 1

    def __call__(self, x):
        return evaluate(self, x)

    def padded(self, J: int) -> "SpectralFunction":
        """Same function with coefficient vector zero-padded to length J + 1."""
        if J < self.J:
            raise ValueError("cannot pad to a smaller dimension")
        c = np.zeros(J + 1)
        c[: self.coeffs.size] = self.coeffs
        return SpectralFunction(self.interval, c)

    def _aligned(self, other):
        if not isinstance(other, SpectralFunction):
            return NotImplemented
        if other.interval != self.interval:
            raise IntervalMismatchError("functions live on different intervals")
        J = max(self.J, other.J)
        return self.padded(J).coeffs, other.padded(J).coeffs

    def __add__(self, other):
        pair = self._aligned(other)
        if pair is NotImplemented:
            return pair
        return SpectralFunction(self.interval, pair[0] + pair[1])

    def __sub__(self, other):
        pair = self._aligned(other)
        if pair is NotImplemented:
            return pair
        return SpectralFunction(self.interval, pair[0] - pair[1])

    def __mul__(self, scalar):
        if isinstance(scalar, SpectralFunction):
            return NotImplemented
        return SpectralFunction(self.interval, float(scalar) * self.coeffs)

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralFunction(self.interval, -self.coeffs)

    def derivative_bound(self) -> float:
        """Upper bound on sup |f'| from the coefficients (Bernstein-type)."""
        L = self.interval.length
        j = np.arange(1, self.J + 1)
        return float(math.sqrt(2.0 / L) * np.sum(np.abs(self.coeffs[1:]) * j * np.pi / L))

    def cdf(self, x) -> np.ndarray:
        """Closed-form ``integral_a^x f``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        iv = self.interval
        L = iv.length
        u = np.clip(x, iv.a, iv.b) - iv.a
        out = self.coeffs[0] / math.sqrt(L) * u
        if self.J:
            j = np.arange(1, self.J + 1)
            s = np.sin(np.multiply.outer(u, j * np.pi / L))
            out = out + math.sqrt(2.0 / L) * s @ (self.coeffs[1:] * L / (j * np.pi))
        return out

    def to_dict(self) -> dict:
        return {"a": self.interval.a, "b": self.interval.b,
                "coeffs": [float(c) for c in self.coeffs]}

    @classmethod
    def from_dict(cls, d: dict) -> "SpectralFunction":
        return cls(Interval(d["a"], d["b"]), np.asarray(d["coeffs"], dtype=float))


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        for name in ("nodes", "weights"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.nodes.shape != self.weights.shape:
            raise ValueError("nodes and weights differ in shape")
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")

    def __call__(self, values) -> float:
        return float(np.dot(self.weights, values))


@lru_cache(maxsize=64)
def _leggauss(n: int):
    return np.polynomial.legendre.leggauss(n)


def gauss_legendre(interval: Interval, n: int = DEFAULT_QUADRATURE_NODES) -> QuadratureRule:
    """Gauss-Legendre rule with ``n`` nodes mapped to ``interval``."""
    x, w = _leggauss(int(n))
    half = 0.5 * interval.length
    return QuadratureRule(interval.a + half * (x + 1.0), half * w)


def evaluate(f: SpectralFunction, x):
    """Pointwise values of ``f``; scalar in, scalar out."""
    scalar = np.ndim(x) == 0
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    iv = f.interval
    bad = (xa < iv.a) | (xa > iv.b) | ~np.isfinite(xa)
    if np.any(bad):
        raise DomainError(f"point {xa[bad][0]!r} outside [{iv.a}, {iv.b}]")
    vals = cosine_basis(iv, xa, f.J) @ f.coeffs
    return float(vals[0]) if scalar else vals


def sobolev_norm(f: SpectralFunction, s: float) -> float:
    if not math.isfinite(s) or s < 0:
        raise InvalidOrderError(f"Sobolev order must be finite and >= 0, got {s}")
    w = sobolev_weights(f.interval, f.J, s)
    return float(math.sqrt(np.dot(w, f.coeffs**2)))


def sup_norm_with_bound(f: SpectralFunction, grid_size: int = DEFAULT_SUP_GRID):
    """Grid maximum of |f| and an upper bound on the true sup-norm.

    The grid value is a lower bound; the true supremum exceeds it by at
    most half the grid spacing times the derivative bound.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    iv = f.interval
    vals = np.abs(evaluate(f, iv.grid(grid_size)))
    lower = float(vals.max())
    h = iv.length / (grid_size - 1)
    return lower, lower + 0.5 * h * f.derivative_bound()


def sup_norm(f: SpectralFunction, grid_size: int = DEFAULT_SUP_GRID) -> float:
    return sup_norm_with_bound(f, grid_size)[0]


def integrate(f: SpectralFunction) -> float:
    return float(f.coeffs[0] * math.sqrt(f.interval.length))


def _values_on(fn, nodes, interval):
    if isinstance(fn, SpectralFunction):
        if fn.interval != interval:
            raise IntervalMismatchError("weight function lives on a different interval")
        return evaluate(fn, nodes)
    if callable(fn):
        return np.asarray(fn(nodes), dtype=float) * np.ones_like(nodes)
    return np.full_like(nodes, float(fn))


def inner_product_weighted(f: SpectralFunction, g: SpectralFunction, w,
                           rule: QuadratureRule) -> float:
    """Quadrature of ``f * g * w``; ``w`` may be a SpectralFunction, callable or scalar."""
    if f.interval != g.interval:
        raise IntervalMismatchError("f and g live on different intervals")
    terms = evaluate(f, rule.nodes) * evaluate(g, rule.nodes) * _values_on(w, rule.nodes, f.interval)
    terms = rule.weights * terms
    bad = np.flatnonzero(~np.isfinite(terms))
    if bad.size:
        raise NumericError("non-finite integrand", index=int(bad[0]))
    return float(terms.sum())


@lru_cache(maxsize=256)
def _embedding_constant(t: float, L: float) -> float:
    head_terms = 20000
    j = np.arange(1, head_terms + 1)
    head = np.sum((1.0 + (j * np.pi / L) ** 2) ** (-t))
    # monotone decreasing summand: the tail sum is bounded by the integral
    # from head_terms to infinity, which in turn is bounded in closed form
    # by dropping the 1 inside the bracket
    tail = (L / np.pi) ** (2.0 * t) * head_terms ** (1.0 - 2.0 * t) / (2.0 * t - 1.0)
    return math.sqrt((2.0 / L) * (head + tail) + 1.0 / L)


def embedding_constant(t: float, interval: Interval = UNIT_INTERVAL) -> float:
    """Constant C_t with ``sup|f| <= C_t * ||f||_t`` for every SpectralFunction.

    Obtained by Cauchy-Schwarz over the basis, so it is valid at every
    truncation level.
    """
    if not t > 0.5:
        raise InvalidOrderError(f"embedding needs t > 1/2, got {t}")
    return _embedding_constant(float(t), interval.length)
