"""Graph gluing across the annulus 9 < |x| < 10 and the single gluing step.

Graphs are handled as evaluators: objects with ``value(x)``, ``gradient(x)`` and
``hessian(x)`` acting on point arrays of shape (..., m). Grids only sample them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BasePositivityFailed, DomainError, GridMismatch, NeckUnsolvable, NoSolution
from .models import BaseModel2D, HarmonicBaseHD, RadialProfile, solve_neck
from .numerics import (
    AnnulusGrid,
    GridFunction,
    find_root_bracketed,
    shifted_cutoff,
    smooth_cutoff_derivative,
)

REGIONS = {
    "inner-exact": (7.0, 8.0),
    "calib-transition-1": (8.0, 9.0),
    "graph-transition": (9.0, 10.0),
    "calib-transition-2": (10.0, 11.0),
    "outer-exact": (11.0, 12.0),
}

GLUE_AT = 9.0
DELTA0 = 0.1


def _fd_hessian(grad, x, rel_step=1e-5):
    """Central differences of an analytic gradient; step scaled with |x|."""
    x = np.asarray(x, dtype=float)
    m = x.shape[-1]
    h = rel_step * np.maximum(np.linalg.norm(x, axis=-1), 1e-3)[..., None]
    out = np.empty(x.shape + (m,))
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        out[..., i, :] = (grad(x + h * e) - grad(x - h * e)) / (2 * h)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


# ------------------------------------------------------------------ evaluators


@dataclass(frozen=True)
class RadialGraph:
    """x -> profile(|x|) + offset."""

    profile: RadialProfile
    offset: float = 0.0

    @property
    def m(self):
        return self.profile.m

    def value(self, x):
        return self.profile.graph_value(x) + self.offset

    def gradient(self, x):
        return self.profile.graph_gradient(x)

    def hessian(self, x):
        return self.profile.graph_hessian(x)


@dataclass(frozen=True)
class BaseGraph:
    """Base height map in R^m: the m=2 graph, extended constantly for m > 2."""

    N: int
    m: int = 2

    def _model(self):
        return BaseModel2D(self.N) if self.m == 2 else HarmonicBaseHD(self.m, "product", self.N)

    def value(self, x):
        return self._model().value(x)

    def gradient(self, x):
        return self._model().gradient(x)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        h2 = _fd_hessian(lambda p: BaseModel2D(self.N).gradient(p), x[..., :2])
        out = np.zeros(x.shape + (self.m,))
        out[..., :2, :2] = h2
        return out


@dataclass(frozen=True)
class RescaledBase:
    """u2(x) = u(r0 e1 + r x) / r."""

    base: object
    r0: float
    r: float
    m: int

    def to_global(self, x):
        x = np.asarray(x, dtype=float)
        y = self.r * x
        y[..., 0] += self.r0
        return y

    def value(self, x):
        return np.asarray(self.base.value(self.to_global(x))) / self.r

    def gradient(self, x):
        return self.base.gradient(self.to_global(x))

    def hessian(self, x):
        return self.r * self.base.hessian(self.to_global(x))


# ------------------------------------------------------------------ gluing


def _node_radii(grid):
    if isinstance(grid, AnnulusGrid):
        return np.broadcast_to(grid.radii[:, None], grid.shape)
    pts = grid.points() if hasattr(grid, "points") else np.asarray(grid.nodes)[..., None]
    return np.linalg.norm(pts, axis=-1)


def glue(u1: GridFunction, u2: GridFunction) -> GridFunction:
    """v = (1 - theta_9(|x|)) u1 + theta_9(|x|) u2 on the common grid."""
    if u1.grid != u2.grid or u1.values.shape != u2.values.shape:
        raise GridMismatch("glue requires both functions on the same grid")
    th = shifted_cutoff(_node_radii(u1.grid), GLUE_AT)
    v = np.where(th == 0.0, u1.values, np.where(th == 1.0, u2.values, (1.0 - th) * u1.values + th * u2.values))
    return GridFunction(u1.grid, v)


@dataclass
class GluedGraph:
    """The glued graph v over B_12 minus the neck hole, as an evaluator plus a sample."""

    u1: object
    u2: object
    H: float
    rho: float
    inner_radius: float
    m: int
    model: str = "catenoid"
    v: GridFunction | None = None
    regions: dict = field(default_factory=lambda: dict(REGIONS))
    report: dict = field(default_factory=dict)

    def theta(self, x):
        return shifted_cutoff(np.linalg.norm(np.asarray(x, dtype=float), axis=-1), GLUE_AT)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        th = self.theta(x)
        a = np.asarray(self.u1.value(x), dtype=float)
        b = np.asarray(self.u2.value(x), dtype=float)
        return np.where(th == 0.0, a, np.where(th == 1.0, b, a + th * (b - a)))

    def difference(self, x):
        """u2 - u1."""
        return np.asarray(self.u2.value(x), dtype=float) - np.asarray(self.u1.value(x), dtype=float)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        th = np.asarray(shifted_cutoff(r, GLUE_AT))
        d1 = np.asarray(smooth_cutoff_derivative(r - GLUE_AT))
        g1, g2 = self.u1.gradient(x), self.u2.gradient(x)
        out = g1 + th[..., None] * (g2 - g1)
        mix = d1 != 0
        if np.any(mix):
            out = out + (d1 * self.difference(x) / np.where(r > 0, r, 1.0))[..., None] * x
        return out

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        th = np.asarray(shifted_cutoff(r, GLUE_AT))
        d1 = np.asarray(smooth_cutoff_derivative(r - GLUE_AT))
        d2 = np.asarray(smooth_cutoff_derivative(r - GLUE_AT, 2))
        h1, h2 = self.u1.hessian(x), self.u2.hessian(x)
        out = h1 + th[..., None, None] * (h2 - h1)
        if np.any(d1 != 0):
            xh = x / np.where(r > 0, r, 1.0)[..., None]
            dg = self.u2.gradient(x) - self.u1.gradient(x)
            diff = self.difference(x)
            outer = xh[..., :, None] * xh[..., None, :]
            eye = np.eye(x.shape[-1])
            out = out + d1[..., None, None] * (dg[..., :, None] * xh[..., None, :] + xh[..., :, None] * dg[..., None, :])
            out = out + (diff * d2)[..., None, None] * outer
            out = out + (diff * d1 / np.where(r > 0, r, 1.0))[..., None, None] * (eye - outer)
        return out

    def region_of(self, radius: float) -> str | None:
        for name, (a, b) in self.regions.items():
            if a <= radius < b or (name == "outer-exact" and radius == b):
                return name
        return None


def gluing_input_report(u1, u2, m, n_r=41, n_ang=64):
    """delta = sup|grad u1| + sup|grad u2| and sup|u1 - u2| over the annulus 7 < |x| < 12."""
    grid = AnnulusGrid(7.0, 12.0, n_r, n_ang, min(m, 3))
    pts = _embed(grid.points(), m)
    g1 = np.linalg.norm(u1.gradient(pts), axis=-1).max()
    g2 = np.linalg.norm(u2.gradient(pts), axis=-1).max()
    gap = np.abs(np.asarray(u1.value(pts)) - np.asarray(u2.value(pts))).max()
    delta = float(g1 + g2)
    return {"delta": delta, "sup_grad_u1": float(g1), "sup_grad_u2": float(g2), "sup_gap": float(gap),
            "gap_over_delta": float(gap / delta) if delta > 0 else 0.0}


def _embed(pts, m):
    """Pad sampled points of a lower-dimensional grid with zeros up to R^m."""
    pts = np.asarray(pts, dtype=float)
    if pts.shape[-1] == m:
        return pts
    pad = np.zeros(pts.shape[:-1] + (m - pts.shape[-1],))
    return np.concatenate([pts, pad], axis=-1)


def build_glued(u1, u2, H, rho, inner_radius, m, model="catenoid", n_r=161, n_ang=96, delta0=DELTA0, check=True):
    report = gluing_input_report(u1, u2, m)
    if check and report["delta"] >= delta0:
        raise DomainError(f"gluing input has delta={report['delta']:.3g} >= delta0={delta0}")
    glued = GluedGraph(u1, u2, H, rho, inner_radius, m, model, report=report)
    if m <= 3:
        grid = AnnulusGrid(inner_radius, 12.0, n_r, n_ang, m)
        pts = grid.points()
        a = GridFunction(grid, np.asarray(u1.value(pts), dtype=float))
        b = GridFunction(grid, np.asarray(u2.value(pts), dtype=float))
        glued.v = glue(a, b)
        ring = (grid.radii >= 7.0) & (grid.radii <= 12.0)
        vals = glued.v.values[ring]
        report["c_lower"] = float(vals.min() / H)
        report["C_upper"] = float(vals.max() / H)
        report["sup_grad_v"] = float(np.linalg.norm(glued.gradient(pts[ring]), axis=-1).max())
    return glued


# ------------------------------------------------------------------ surrogate pair


def catenoid_pair(m: int, rho: float, n_r=161, n_ang=96) -> GluedGraph:
    """Two minimal radial graphs glued at one scale.

    u1 = c_rho and u2 = c_{2 rho} shifted to agree with u1 at |x| = 10, so
    H = c_rho(10) and delta is proportional to rho^(m-1).
    """
    p1 = RadialProfile(m, rho)
    p2 = RadialProfile(m, 2 * rho)
    H = float(p1.value(10.0))
    u1 = RadialGraph(p1)
    u2 = RadialGraph(p2, H - float(p2.value(10.0)))
    return build_glued(u1, u2, H, rho, rho, m, "catenoid", n_r, n_ang, check=False)


def catenoid_pair_for_delta(m: int, delta: float, **kw) -> GluedGraph:
    """Surrogate pair whose gradient scale (sup over 7 < |x| < 12) equals ``delta``."""

    def dlt(log_rho):
        rho = math.exp(log_rho)
        return float(RadialProfile(m, rho).slope(7.0) + RadialProfile(m, 2 * rho).slope(7.0)) - delta

    log_rho = find_root_bracketed(dlt, math.log(1e-12), math.log(3.0), 1e-14)
    return catenoid_pair(m, math.exp(log_rho), **kw)


# ------------------------------------------------------------------ single step


@dataclass
class LocalComplex:
    """Two sheets +-v over B_12 minus the hole, plus a flat disk for the floating model."""

    glued: GluedGraph
    disk_radius: float | None = None

    def upper(self, x):
        return self.glued.value(x)

    def lower(self, x):
        return -self.glued.value(x)

    @property
    def has_disk(self) -> bool:
        return self.disk_radius is not None


@dataclass
class SingleStepResult:
    glued: GluedGraph
    surface: LocalComplex
    r0: float
    r: float
    report: dict = field(default_factory=dict)

    def eta(self, x):
        """Local coordinates -> global horizontal coordinates."""
        x = np.asarray(x, dtype=float)
        y = self.r * x
        y[..., 0] += self.r0
        return y

    def eta_inverse(self, y):
        y = np.asarray(y, dtype=float).copy()
        y[..., 0] -= self.r0
        return y / self.r


def _derivative_norms(glued: GluedGraph, kmax: int, n=241):
    """sup |d^k (v - u2)| along the two in-plane axes on 7 <= |x| <= 12, k = 0..kmax, by FD."""
    m = glued.m
    out = []
    t = np.linspace(7.0, 12.0, n)
    h = t[1] - t[0]
    samples = []
    for ang in (0.0, 0.7, 2.1):
        d = np.zeros(m)
        d[0], d[1] = math.cos(ang), math.sin(ang)
        pts = t[:, None] * d[None, :]
        th = shifted_cutoff(t, GLUE_AT)
        samples.append((1.0 - th) * (np.asarray(glued.u1.value(pts)) - np.asarray(glued.u2.value(pts))))
    for k in range(kmax + 1):
        best = 0.0
        for f in samples:
            g = f
            for _ in range(k):
                g = np.gradient(g, h, edge_order=2)
            best = max(best, float(np.abs(g).max()))
        out.append(best)
    return out


def single_gluing_step(u, r0: float, r: float, N: int, model: str = "catenoid", m: int = 2, n_r=161, n_ang=96) -> SingleStepResult:
    """Rescale the base around r0 e1 by r, solve the neck at R=10 and glue it in."""
    if model not in ("catenoid", "floating_disk"):
        raise ValueError(f"unknown model {model!r}")
    if r > r0 / 10:
        raise ValueError("single gluing step requires r <= r0/10")
    if u is None:
        u = BaseGraph(N, m)
    u2 = RescaledBase(u, r0, r, m)

    grid = AnnulusGrid(0.0, 12.0, 49, 64, min(m, 3))
    vals = np.asarray(u2.value(_embed(grid.points(), m)))
    if not np.all(vals > 0):
        raise BasePositivityFailed(f"rescaled base is not positive on B_12 (min {vals.min():.3e})")

    e1 = np.zeros(m)
    e1[0] = 10.0
    H = float(u2.value(e1))
    circle = _embed(AnnulusGrid(10.0, 10.0 + 1e-9, 2, 128, min(m, 3)).points()[0], m)
    spread = float(np.ptp(np.asarray(u2.value(circle))))

    floating = model == "floating_disk"
    try:
        sol = solve_neck(m, 10.0, H, floating=floating)
    except NoSolution as exc:
        raise NeckUnsolvable(str(exc)) from exc
    prof = sol.profile()
    u1 = RadialGraph(prof)
    glued = build_glued(u1, u2, H, sol.rho_small, prof.inner_radius, m, model, n_r, n_ang)
    report = dict(glued.report)
    report.update(
        H=H,
        H_circle_spread=spread,
        rho=sol.rho_small,
        neck_checks=dict(sol.checks),
        derivative_norms=_derivative_norms(glued, m + 1),
        H_pow=H ** (m - 1),
    )
    glued.report = report
    surface = LocalComplex(glued, prof.inner_radius if floating else None)
    return SingleStepResult(glued, surface, r0, r, report)
