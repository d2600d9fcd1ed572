"""Conformal factor lambda = comass^(1/m) near the glued graph, its reflection and smoothing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .calibration import CalibrationAssembly, NormalChart
from .errors import FormUndefined, WidthCollapse
from .numerics import bump, gauss_legendre, step_down

# lambda interpolates to 1 on DIST_INNER < dist < DIST_OUTER
DIST_INNER, DIST_OUTER = 2.0, 3.0
N_SMOOTH = 48  # Gauss-Legendre nodes per kernel piece


def distance_to_graph(y, graph, m: int | None = None, chart: NormalChart | None = None):
    """Euclidean distance from y to the graph of ``graph`` (Newton closest point).

    Raises ProjectionAmbiguous when y lies beyond the focal radius of its footpoint.
    """
    y = np.asarray(y, dtype=float)
    if chart is None:
        chart = NormalChart(graph, y.shape[-1] - 1 if m is None else m)
    _, tau = chart.project(y)
    return np.abs(tau)


@dataclass
class ConformalFactorField:
    """lambda(y) on R^(m+1), evaluated on demand (the evaluator is the source of truth).

    ``defect`` returns lambda - 1, which is the quantity stored and compared: at deep
    stages it is far below the rounding unit of lambda itself.
    """

    defect: Callable
    H: float
    m: int
    support: tuple = (8.0, 11.0)
    meta: dict = field(default_factory=dict)

    def __call__(self, y):
        return 1.0 + np.asarray(self.defect(np.asarray(y, dtype=float)), dtype=float)

    def _column(self, x, t):
        t = np.asarray(t, dtype=float)
        return np.concatenate([np.broadcast_to(np.asarray(x, dtype=float), t.shape + (self.m,)), t[..., None]], axis=-1)

    def on_column(self, x, t):
        """lambda at (x, t_i) for one horizontal point x and heights t."""
        return self(self._column(x, t))

    def defect_on_column(self, x, t):
        return np.asarray(self.defect(self._column(x, t)), dtype=float)


def unit_factor(m: int, H: float = 1.0) -> ConformalFactorField:
    """lambda = 1 everywhere."""
    return ConformalFactorField(lambda y: np.zeros(np.shape(y)[:-1]), H, m, (0.0, 0.0))


def conformal_factor(omega, chart: NormalChart | None = None, H: float | None = None) -> ConformalFactorField:
    """lambda = 1 + theta(dist) (comass(omega)^(1/m) - 1), theta = 1 on [0, 2] and 0 on [3, inf).

    ``omega`` is a CalibrationAssembly (chart taken from it) or an AmbientForm with a chart
    of the graph it calibrates.  With the m-th root, the comass of omega in lambda^2
    (Euclidean) is exactly 1 on {dist < 2}.  For an assembly, footpoints outside
    8 < |x| < 11 see omega_u1 or omega_u2 (comass 1), so lambda = 1 there without evaluating omega.
    """
    if isinstance(omega, CalibrationAssembly):
        chart = omega.chart
        H = float(omega.glued.H) if H is None else H
        window = (8.0, 11.0)

        def excess_at(x, tau):
            return omega.comass_excess(x, tau)
    else:
        if chart is None:
            raise ValueError("an ambient form needs the chart of its graph")
        window = (-math.inf, math.inf)

        def excess_at(x, tau):
            W = omega(chart.phi(x, tau))
            n2 = np.sum(W * W, axis=-1)
            return (n2 - 1.0) / (np.sqrt(n2) + 1.0)
    m = chart.m
    H = 1.0 if H is None else H

    def lam(y):
        y = np.asarray(y, dtype=float)
        shape = y.shape[:-1]
        yf = y.reshape(-1, m + 1)
        out = np.zeros(len(yf))
        r = np.linalg.norm(yf[:, :m], axis=-1)
        # slopes are < 0.1, so a footpoint in [8, 11] forces |y_h| in [7.5, 11.5] when dist < 3
        cand = np.flatnonzero((r > window[0] - 0.5) & (r < window[1] + 0.5))
        if len(cand):
            x, tau = chart.project(yf[cand])
            dist = np.abs(tau)
            rx = np.linalg.norm(x, axis=-1)
            near = (dist < DIST_OUTER) & (rx > window[0]) & (rx < window[1])
            if np.any(near & (dist > chart.T)):
                raise FormUndefined(f"omega is defined for dist < {chart.T:.3g} only")
            idx = np.flatnonzero(near)
            if len(idx):
                root = np.expm1(np.log1p(excess_at(x[idx], tau[idx])) / m)
                out[cand[idx]] = step_down(dist[idx], DIST_INNER, DIST_OUTER) * root
        return out.reshape(shape)

    return ConformalFactorField(lam, H, m, window, {"T": chart.T})


def reflect(lam: ConformalFactorField) -> ConformalFactorField:
    """lambda_1(x, t) = lambda(x, |t|)."""

    def ev(y):
        y = np.array(y, dtype=float, copy=True)
        y[..., -1] = np.abs(y[..., -1])
        return lam.defect(y)

    return ConformalFactorField(ev, lam.H, lam.m, lam.support, dict(lam.meta))


@lru_cache(maxsize=None)
def kernel_mass() -> float:
    """Integral of the bump over (-1, 1); the smoothing kernel is bump / kernel_mass."""
    nodes, weights = gauss_legendre(64)
    s = 0.75 + 0.25 * nodes  # transition piece [1/2, 1]
    return float(2.0 * (0.5 + 0.25 * np.dot(weights, bump(s))))


def smoothing_kernel(s):
    return bump(s) / kernel_mass()


def smoothing_width(t, H: float, c: float):
    """eps(t) = H eps0(8 t / (c H)): H on |t| <= cH/16, 0 on |t| >= cH/8."""
    return H * bump(8.0 * np.asarray(t, dtype=float) / (c * H))


def _convolve(fn, t, eps, n=N_SMOOTH):
    """int phi(s) fn(t + eps s) ds, Gauss-Legendre on the pieces of (-1, 1) split at
    +-1/2 (kernel plateau) and at the reflection kink s = -t/eps."""
    t = np.asarray(t, dtype=float)
    eps = np.asarray(eps, dtype=float)
    kink = np.where(eps > 0, -t / np.where(eps > 0, eps, 1.0), 2.0)
    kink = np.clip(kink, -1.0, 1.0)
    brk = np.sort(np.stack(np.broadcast_arrays(-1.0, -0.5, 0.5, 1.0, kink), axis=-1), axis=-1)
    nodes, weights = gauss_legendre(n)
    total = 0.0
    for i in range(brk.shape[-1] - 1):
        a, b = brk[..., i], brk[..., i + 1]
        half = 0.5 * (b - a)
        s = 0.5 * (a + b)[..., None] + half[..., None] * nodes
        vals = fn(t[..., None] + eps[..., None] * s) * smoothing_kernel(s)
        total = total + half * np.sum(weights * vals, axis=-1)
    return total


def symmetrize_smooth(lam: ConformalFactorField, H: float, c: float, grid_spacing: float | None = None,
                      n: int = N_SMOOTH) -> ConformalFactorField:
    """lambda_2(x, t) = int phi(s) lambda_1(x, t + eps(t) s) ds with lambda_1 the even reflection.

    lambda_2 is evaluated at |t|, so it is even in t exactly.  ``grid_spacing`` (the
    t-spacing of a grid the result will be sampled on) must resolve the kernel.
    """
    if grid_spacing is not None and grid_spacing > c * H / 64:
        raise WidthCollapse(f"t-spacing {grid_spacing:.3g} exceeds cH/64 = {c * H / 64:.3g}")
    lam1 = reflect(lam)
    m = lam.m

    def ev(y):
        y = np.asarray(y, dtype=float)
        t = np.abs(y[..., -1])
        out = np.asarray(lam1.defect(y), dtype=float).copy()
        eps = smoothing_width(t, H, c)
        band = eps > 0
        if np.any(band):
            yb = y[band]
            xb = yb[:, :m]

            def fn(tt):
                pts = np.concatenate([np.broadcast_to(xb[:, None, :], tt.shape + (m,)), tt[..., None]], axis=-1)
                return lam1.defect(pts)

            out[band] = _convolve(fn, t[band], eps[band], n)
        return out

    meta = dict(lam.meta, c=c, smoothing_band=(c * H / 16, c * H / 8))
    return ConformalFactorField(ev, H, m, lam.support, meta)


def measured_c(glued) -> float:
    """c with v >= c H over the glued annulus (from the gluing report)."""
    return float(glued.report["c_lower"])


def column_derivatives(field_: ConformalFactorField, x, t, kmax: int = 2):
    """Max over t of |d^k/dt^k (lambda - 1)| on one column, k = 0..kmax, by finite differences
    on the sampled (uniform) heights t."""
    t = np.asarray(t, dtype=float)
    vals = field_.defect_on_column(x, t)
    h = t[1] - t[0]
    out = [float(np.abs(vals).max())]
    d = vals
    for _ in range(kmax):
        d = np.gradient(d, h, edge_order=2)
        out.append(float(np.abs(d).max()))
    return out


def derivative_maxima(field_: ConformalFactorField, xs, c: float, t_max: float = 4.0,
                      n_band: int = 257, n_outer: int = 801, kmax: int = 2):
    """Max over columns x in ``xs`` and all heights of |d^k_t (lambda - 1)|, k = 0..kmax.

    Heights are sampled on two uniform grids: the smoothing band |t| <= cH/4, resolved at
    spacing cH/(2(n_band-1)), and cH/8 <= |t| <= t_max, where lambda_2 is the reflected lambda.
    Returns (global maxima, band maxima).
    """
    H = field_.H
    band_t = np.linspace(-c * H / 4, c * H / 4, n_band)
    outer_t = np.linspace(c * H / 8, t_max, n_outer)
    glob = np.zeros(kmax + 1)
    band = np.zeros(kmax + 1)
    for x in np.atleast_2d(xs):
        b = np.array(column_derivatives(field_, x, band_t, kmax))
        o = np.array(column_derivatives(field_, x, outer_t, kmax))
        band = np.maximum(band, b)
        glob = np.maximum(glob, np.maximum(b, o))
    return glob.tolist(), band.tolist()


def fitted_exponents(values_H, values_H2, H, H2):
    """Exponents log(a/b)/log(H/H2) per entry."""
    return [math.log(a / b) / math.log(H / H2) if a > 0 and b > 0 else math.nan
            for a, b in zip(values_H, values_H2)]
