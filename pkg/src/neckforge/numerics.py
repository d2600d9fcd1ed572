"""Shared numerical substrate: root finding, quadrature, cutoffs, stencils, grids."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import GridTooCoarse, NoConvergence, NoSignChange, ToleranceNotMet

# ---------------------------------------------------------------- grids


@dataclass(frozen=True)
class Grid1D:
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("Grid1D requires lo < hi")
        if self.n < 2:
            raise ValueError("Grid1D requires n >= 2")

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def shape(self):
        return (self.n,)

    @property
    def spacings(self):
        return (self.spacing,)

    def mesh(self):
        return (self.nodes,)


@dataclass(frozen=True)
class BoxGrid:
    """Tensor grid with uniform spacing along each axis."""

    axes: tuple

    @classmethod
    def from_bounds(cls, bounds: Sequence[tuple], counts: Sequence[int]) -> "BoxGrid":
        return cls(tuple(Grid1D(lo, hi, n) for (lo, hi), n in zip(bounds, counts)))

    @property
    def shape(self):
        return tuple(a.n for a in self.axes)

    @property
    def spacings(self):
        return tuple(a.spacing for a in self.axes)

    @property
    def ndim(self):
        return len(self.axes)

    def mesh(self):
        return np.meshgrid(*(a.nodes for a in self.axes), indexing="ij")

    def points(self) -> np.ndarray:
        """Node coordinates as an array of shape ``shape + (ndim,)``."""
        return np.stack(self.mesh(), axis=-1)


@dataclass(frozen=True)
class AnnulusGrid:
    """Polar sampling of the annulus B_s minus B_r in R^m.

    For m=2 the angular directions are a uniform angle grid; for m>2 they are a
    latitude/longitude product on the unit (m-1)-sphere (m=3 only).
    """

    inner_radius: float
    outer_radius: float
    n_r: int
    n_ang: int
    m: int = 2

    def __post_init__(self):
        if not 0 <= self.inner_radius < self.outer_radius:
            raise ValueError("AnnulusGrid requires 0 <= inner < outer")
        if self.n_r < 2 or self.n_ang < 2:
            raise ValueError("AnnulusGrid requires n_r, n_ang >= 2")
        if self.m not in (2, 3):
            raise ValueError("AnnulusGrid supports m in {2, 3}")

    @property
    def radii(self) -> np.ndarray:
        return np.linspace(self.inner_radius, self.outer_radius, self.n_r)

    def directions(self) -> np.ndarray:
        if self.m == 2:
            t = 2 * np.pi * np.arange(self.n_ang) / self.n_ang
            return np.stack([np.cos(t), np.sin(t)], axis=-1)
        n_pol = max(self.n_ang // 2, 2)
        pol = (np.arange(n_pol) + 0.5) * np.pi / n_pol
        az = 2 * np.pi * np.arange(self.n_ang) / self.n_ang
        P, A = np.meshgrid(pol, az, indexing="ij")
        d = np.stack([np.sin(P) * np.cos(A), np.sin(P) * np.sin(A), np.cos(P)], axis=-1)
        return d.reshape(-1, 3)

    def points(self) -> np.ndarray:
        """Array of shape (n_r, n_dirs, m)."""
        return self.radii[:, None, None] * self.directions()[None, :, :]

    @property
    def n_dirs(self) -> int:
        return self.n_ang if self.m == 2 else max(self.n_ang // 2, 2) * self.n_ang

    @property
    def shape(self):
        return (self.n_r, self.n_dirs)

    @property
    def spacings(self):
        return ((self.outer_radius - self.inner_radius) / (self.n_r - 1), 2 * np.pi / self.n_ang)

    def mesh(self):
        p = self.points()
        return tuple(p[..., i] for i in range(self.m))


@dataclass
class GridFunction:
    grid: object
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != tuple(self.grid.shape):
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("GridFunction values must be finite")

    @classmethod
    def sample(cls, grid, func: Callable) -> "GridFunction":
        if isinstance(grid, Grid1D):
            return cls(grid, func(grid.nodes))
        return cls(grid, func(*grid.mesh()))


# ---------------------------------------------------------------- root finding


def find_root_bracketed(
    f: Callable[[float], float],
    a: float,
    b: float,
    tol: float = 1e-12,
    df: Callable[[float], float] | None = None,
    max_iter: int = 300,
) -> float:
    """Root of ``f`` in [a, b] by safeguarded Newton.

    Newton steps (with ``df`` or a finite-difference slope) are accepted only if
    they land strictly inside the current bracket and shrink it by at least half
    of what bisection would; otherwise the step is a bisection.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    fa, fb = f(a), f(b)
    if fa == 0.0:
        return float(a)
    if fb == 0.0:
        return float(b)
    if fa * fb > 0 or not (np.isfinite(fa) and np.isfinite(fb)):
        raise NoSignChange(f"f(a)={fa!r} and f(b)={fb!r} do not bracket a root")
    lo, hi, flo = (a, b, fa) if a < b else (b, a, fb)
    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        if hi - lo <= tol:
            return float(0.5 * (lo + hi))
        fx = f(x)
        if fx == 0.0:
            return float(x)
        if (fx < 0) == (flo < 0):
            lo, flo = x, fx
        else:
            hi = x
        if df is not None:
            slope = df(x)
        else:
            eps = 1e-7 * max(abs(x), hi - lo)
            slope = (f(x + eps) - f(x - eps)) / (2 * eps)
        width = hi - lo
        x_new = x - fx / slope if slope != 0 and np.isfinite(slope) else np.nan
        if not (lo < x_new < hi) or min(x_new - lo, hi - x_new) < 1e-3 * width and width > 4 * tol:
            x_new = 0.5 * (lo + hi)
        elif abs(x_new - x) < 0.5 * tol:
            # Newton has converged; close the bracket around it
            s = 0.5 * tol
            lo2, hi2 = max(lo, x_new - s), min(hi, x_new + s)
            f_lo2, f_hi2 = f(lo2), f(hi2)
            if (f_lo2 < 0) != (f_hi2 < 0) or f_lo2 == 0 or f_hi2 == 0:
                return float(x_new)
        x = x_new
    raise NoConvergence(f"no convergence within {max_iter} iterations; bracket [{lo}, {hi}]")


def golden_section_max(f: Callable[[float], float], a: float, b: float, tol: float = 1e-12, max_iter: int = 400):
    """Maximizer and maximum of a unimodal ``f`` on [a, b]."""
    invphi = (math.sqrt(5) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


# ---------------------------------------------------------------- quadrature


@lru_cache(maxsize=None)
def gauss_legendre(n: int):
    """Nodes and weights on [-1, 1] (read-only)."""
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_legendre_interval(n: int, a, b):
    """Nodes/weights mapped to [a, b]; ``a``/``b`` may be arrays (broadcast on a new last axis)."""
    x, w = gauss_legendre(n)
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def _adaptive_gl(g, a, b, tol, depth, max_depth, n=10):
    x, w = gauss_legendre_interval(n, a, b)
    coarse = float(np.dot(w, g(x)))
    mid = 0.5 * (a + b)
    x1, w1 = gauss_legendre_interval(n, a, mid)
    x2, w2 = gauss_legendre_interval(n, mid, b)
    left, right = float(np.dot(w1, g(x1))), float(np.dot(w2, g(x2)))
    fine = left + right
    if abs(fine - coarse) <= tol or abs(b - a) < 1e-15:
        return fine, abs(fine - coarse)
    if depth >= max_depth:
        raise ToleranceNotMet(f"adaptive quadrature reached depth {max_depth} on [{a}, {b}]")
    l_val, l_err = _adaptive_gl(g, a, mid, 0.5 * tol, depth + 1, max_depth, n)
    r_val, r_err = _adaptive_gl(g, mid, b, 0.5 * tol, depth + 1, max_depth, n)
    return l_val + r_val, l_err + r_err


def integrate_singular(
    f: Callable,
    a: float,
    b: float,
    singular_at_a: bool = False,
    tol: float = 1e-12,
    singular_at_b: bool = False,
    max_depth: int = 50,
) -> float:
    """Integral of ``f`` over [a, b] with optional inverse-square-root endpoint singularities.

    An endpoint singularity ``C/sqrt(s-a)`` is removed with ``s = a + t**2``;
    the smooth remainder goes to adaptive Gauss-Legendre. ``f`` must accept arrays.
    """
    if a == b:
        return 0.0
    if b < a:
        return -integrate_singular(f, b, a, singular_at_b, tol, singular_at_a, max_depth)
    if singular_at_a and singular_at_b:
        mid = 0.5 * (a + b)
        return integrate_singular(f, a, mid, True, 0.5 * tol, False, max_depth) + integrate_singular(
            f, mid, b, False, 0.5 * tol, True, max_depth
        )
    if singular_at_a:
        def g(t):
            return 2.0 * t * f(a + t * t)
        lo, hi = 0.0, math.sqrt(b - a)
    elif singular_at_b:
        def g(t):
            return 2.0 * t * f(b - t * t)
        lo, hi = 0.0, math.sqrt(b - a)
    else:
        g, lo, hi = f, a, b
    value, _ = _adaptive_gl(g, lo, hi, tol, 0, max_depth)
    return value


# ---------------------------------------------------------------- cutoffs


def _logit_arg(s):
    # L(s) = 1/(1-s) - 1/s ; Theta(s) = expit(L(s)) = q(s) / (q(s) + q(1-s))
    with np.errstate(divide="ignore"):
        return 1.0 / (1.0 - s) - 1.0 / s


def smooth_cutoff(t):
    """Smooth step: 0 for t <= 1/3, 1 for t >= 2/3, exact symmetry theta(t)+theta(1-t)=1."""
    t = np.asarray(t, dtype=float)
    s = np.clip(3.0 * t - 1.0, 0.0, 1.0)
    inside = (s > 0) & (s < 1)
    out = np.where(s >= 1.0, 1.0, 0.0)
    si = s[inside]
    out[inside] = expit(_logit_arg(si))
    return out if out.ndim else float(out)


def smooth_cutoff_derivative(t, order: int = 1):
    """First or second derivative of :func:`smooth_cutoff` (closed form)."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    t = np.asarray(t, dtype=float)
    s = np.clip(3.0 * t - 1.0, 0.0, 1.0)
    inside = (s > 0) & (s < 1)
    out = np.zeros_like(s)
    si = s[inside]
    L = _logit_arg(si)
    sig = expit(L)
    d1 = sig * (1.0 - sig)
    Lp = 1.0 / (1.0 - si) ** 2 + 1.0 / si**2
    if order == 1:
        out[inside] = 3.0 * d1 * Lp
    else:
        Lpp = 2.0 / (1.0 - si) ** 3 - 2.0 / si**3
        out[inside] = 9.0 * (d1 * (1.0 - 2.0 * sig) * Lp**2 + d1 * Lpp)
    return out if out.ndim else float(out)


def shifted_cutoff(t, k: float):
    """theta_k(t) = theta(t - k)."""
    return smooth_cutoff(np.asarray(t, dtype=float) - k)


def step_down(t, start: float, end: float):
    """Smooth function equal to 1 for t <= start and 0 for t >= end."""
    u = (np.asarray(t, dtype=float) - start) / (end - start)
    return 1.0 - smooth_cutoff(1.0 / 3.0 + u / 3.0)


def step_down_derivative(t, start: float, end: float):
    u = (np.asarray(t, dtype=float) - start) / (end - start)
    return -smooth_cutoff_derivative(1.0 / 3.0 + u / 3.0) / (3.0 * (end - start))


def bump(t):
    """Symmetric bump supported in (-1, 1), identically 1 on [-1/2, 1/2]."""
    a = np.abs(np.asarray(t, dtype=float))
    return step_down(a, 0.5, 1.0)


# ---------------------------------------------------------------- finite differences


def _d1(values, h, axis):
    return np.gradient(values, h, axis=axis, edge_order=2)


def _d2(values, h, axis):
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h**2
    out[0] = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / h**2
    out[-1] = (2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]) / h**2
    return np.moveaxis(out, 0, axis)


def fd_partial(f: GridFunction, direction: int = 0, order: int = 1) -> GridFunction:
    """Second-order accurate partial derivative of ``f`` along an axis.

    Central stencils inside, one-sided second-order stencils at the boundary;
    orders above 2 are compositions of the first/second-order operators.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    n = f.grid.shape[direction]
    if n < order + 3:
        raise GridTooCoarse(f"axis {direction} has {n} nodes; order {order} needs {order + 3}")
    h = f.grid.spacings[direction]
    values = f.values
    remaining = order
    while remaining >= 2:
        values = _d2(values, h, direction)
        remaining -= 2
    if remaining:
        values = _d1(values, h, direction)
    return GridFunction(f.grid, values)


def _all_partials(f: GridFunction, j: int):
    if j == 0:
        return [f.values]
    ndim = len(f.grid.shape)
    out = []
    for combo in itertools.combinations_with_replacement(range(ndim), j):
        g = f
        for axis in sorted(set(combo)):
            g = fd_partial(g, axis, combo.count(axis))
        out.append(g.values)
    return out


def holder_quotient(values: np.ndarray, spacings, alpha: float, window: int = 10, coarse_stride: int | None = None) -> float:
    """Windowed discrete Hölder quotient max |f(x)-f(y)| / |x-y|**alpha.

    Pairs within ``window`` nodes along every offset of the window box are
    scanned, plus all pairs of a strided coarse sample.
    """
    values = np.asarray(values, dtype=float)
    spacings = tuple(float(h) for h in spacings)
    if values.ndim == 1:
        best = kernels.holder_window_max(values, spacings[0], alpha, window)
    else:
        best = 0.0
        ranges = [range(-window, window + 1)] * values.ndim
        for off in itertools.product(*ranges):
            if off <= (0,) * values.ndim:
                continue  # each unordered pair once
            if max(abs(o) for o in off) == 0:
                continue
            sl_a, sl_b = [], []
            ok = True
            for o, n in zip(off, values.shape):
                if abs(o) >= n:
                    ok = False
                    break
                sl_a.append(slice(max(o, 0), n + min(o, 0)))
                sl_b.append(slice(max(-o, 0), n - max(o, 0)))
            if not ok:
                continue
            dist = math.sqrt(sum((o * h) ** 2 for o, h in zip(off, spacings)))
            diff = np.abs(values[tuple(sl_a)] - values[tuple(sl_b)])
            best = max(best, float(diff.max()) / dist**alpha)
    if coarse_stride is None:
        coarse_stride = max(1, int(round(max(values.shape) / 64)))
    if coarse_stride > 1 or values.size <= 4096:
        sub = values[tuple(slice(None, None, coarse_stride) for _ in range(values.ndim))]
        coords = np.stack(
            np.meshgrid(*(np.arange(n) * coarse_stride * h for n, h in zip(sub.shape, spacings)), indexing="ij"),
            axis=-1,
        ).reshape(-1, values.ndim)
        fv = sub.reshape(-1)
        if fv.size <= 4096:
            d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            best = max(best, float((np.abs(fv[:, None] - fv[None, :]) / d**alpha).max()))
    return best


def discrete_holder_seminorm(f: GridFunction, j: int = 0, alpha: float = 0.0, window: int = 10) -> float:
    """max |D^j f| plus (alpha > 0) the windowed Hölder quotient of D^j f."""
    if j < 0 or not 0 <= alpha < 1:
        raise ValueError("need j >= 0 and alpha in [0, 1)")
    parts = _all_partials(f, j)
    total = max(float(np.abs(p).max()) for p in parts)
    if alpha > 0:
        total += max(holder_quotient(p, f.grid.spacings, alpha, window) for p in parts)
    return total


def fit_slope(xs, ys) -> float:
    """Least-squares slope of log(ys) against log(xs)."""
    lx, ly = np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])
