"""Iterated gluing at dyadic scales: configuration, stages, complexes and mass ledgers."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .calibration import assemble_calibration
from .errors import (
    BasePositivityFailed,
    ConfigInvalid,
    StageUnresolvable,
    UnsupportedDimension,
)
from .gluing import GLUE_AT, BaseGraph, SingleStepResult, single_gluing_step
from .metric import ConformalFactorField, conformal_factor, measured_c, symmetrize_smooth, unit_factor
from .models import RadialProfile
from .numerics import gauss_legendre, shifted_cutoff

# ------------------------------------------------------------------ configuration


@dataclass
class ConstructionConfig:
    """Flat key = value configuration; ``validate`` names the violated invariant."""

    m: int = 3
    N: int = 8
    p: float = 2.0
    model: str = "catenoid"  # catenoid | floating_disk
    theorem_mode: str = "T1"  # T1: signs (+,+); T2: signs (+,-) with disks
    k_max: int = 6
    r0_first: float = 2.0**-6  # r_{0,k} = r0_first * scale_ratio^(k-1)
    scale_ratio: float = 0.5
    ambient_radius: float = 0.5
    n_r: int = 61  # glue grid (local units)
    n_ang: int = 24
    max_radial_cells: int = 400  # graded-grid budget per stage
    grading: float = 1.25
    lam_radii: int = 59  # lambda sampling per stage; the blend band is 1/3 wide
    lam_dirs: int = 18
    lam_heights: int = 15
    j: int = 0
    alpha: float = 0.0
    seed: int = 0

    def scales(self):
        """(k, r0_k, r_k) for k = 1..k_max."""
        out = []
        for k in range(1, self.k_max + 1):
            r0 = self.r0_first * self.scale_ratio ** (k - 1)
            out.append((k, r0, r0**self.p))
        return out

    def validate(self) -> "ConstructionConfig":
        if self.m < 2:
            raise ConfigInvalid("m >= 2 violated")
        if not 1 < self.p < self.N:
            raise ConfigInvalid(f"1<p<N violated (p={self.p}, N={self.N})")
        if self.model not in ("catenoid", "floating_disk"):
            raise ConfigInvalid(f"unknown model {self.model!r}")
        if self.theorem_mode not in ("T1", "T2"):
            raise ConfigInvalid(f"unknown theorem_mode {self.theorem_mode!r}")
        if (self.theorem_mode == "T2") != (self.model == "floating_disk"):
            raise ConfigInvalid("theorem_mode T2 pairs with model floating_disk, T1 with catenoid")
        if self.m * (self.N - self.p) <= (self.j + self.alpha) * self.N:
            raise ConfigInvalid(
                f"m(N-p) > (j+alpha)N violated: {self.m * (self.N - self.p)} <= {(self.j + self.alpha) * self.N}")
        if self.k_max < 0:
            raise ConfigInvalid("k_max >= 0 violated")
        if not 0 < self.scale_ratio < 1:
            raise ConfigInvalid("0 < scale_ratio < 1 violated")
        sc = self.scales()
        for (k, r0, _), (_, r0n, _) in zip(sc, sc[1:]):
            if (r0 - r0n) / r0**self.p < 10.0:
                raise ConfigInvalid(f"scale separation (r0_k - r0_k+1)/r0_k^p >= 10 violated at k={k}")
        for (k, r0, r), (_, r0n, rn) in zip(sc, sc[1:]):
            if r0 - 12 * r <= r0n + 12 * rn:
                raise ConfigInvalid(f"cylinders 12C_k must be disjoint (k={k})")
        if sc and sc[0][1] + 12 * sc[0][2] >= self.ambient_radius:
            raise ConfigInvalid("first neck must lie inside the ambient ball")
        return self

    # flat text format -------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ConstructionConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigInvalid(f"line {ln}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigInvalid(f"line {ln}: unknown key {key!r}")
            kind = types[key]
            try:
                if kind == "int":
                    kw[key] = int(val)
                elif kind == "float":
                    kw[key] = float(val)
                else:
                    kw[key] = val
            except ValueError as exc:
                raise ConfigInvalid(f"line {ln}: bad value for {key}: {val!r}") from exc
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ConstructionConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


# ------------------------------------------------------------------ quadrature helpers


def sphere_rule(m: int, n: int = 16):
    """Directions on S^(m-1) with weights summing to |S^(m-1)| (m = 2, 3)."""
    if m == 2:
        a = 2 * np.pi * (np.arange(2 * n) + 0.5) / (2 * n)
        return np.stack([np.cos(a), np.sin(a)], axis=-1), np.full(2 * n, np.pi / n)
    if m == 3:
        z, wz = gauss_legendre(n)
        a = 2 * np.pi * (np.arange(2 * n) + 0.5) / (2 * n)
        s = np.sqrt(1 - z**2)
        d = np.stack([np.outer(s, np.cos(a)), np.outer(s, np.sin(a)), np.repeat(z[:, None], 2 * n, axis=1)], axis=-1)
        w = np.outer(wz, np.full(2 * n, np.pi / n))
        return d.reshape(-1, 3), w.ravel()
    raise UnsupportedDimension("area quadrature is implemented for m = 2, 3")


def ball_volume(m: int, r: float = 1.0) -> float:
    return math.pi ** (m / 2) / math.gamma(m / 2 + 1) * r**m


def sphere_area(m: int, r: float = 1.0) -> float:
    """|S^(m-1)| r^(m-1)."""
    return m * ball_volume(m, 1.0) * r ** (m - 1)


def _excess_density(grad):
    """sqrt(1 + |g|^2) - 1 without cancellation."""
    g2 = np.sum(np.asarray(grad) ** 2, axis=-1)
    return g2 / (np.sqrt(1.0 + g2) + 1.0)


def radial_panels(a: float, b: float, breaks=(), grading: float = 2.0):
    """Panel edges on [a, b]: geometric from a (ratio ``grading``) plus the given breakpoints."""
    edges = [a]
    x = a
    while x * grading < b:
        x *= grading
        edges.append(x)
    edges += [t for t in breaks if a < t < b]
    edges.append(b)
    return np.unique(edges)


def annulus_excess(f, m: int, a: float, b: float, breaks=(), n_gl: int = 8, n_sph: int = 16, singular: bool = False):
    """int over a < |x| < b of (sqrt(1 + |grad f|^2) - 1) dx in polar coordinates.

    With ``singular`` the first panel [a, 2a] uses r = a(1 + s^2), which absorbs the
    (r - a)^(-1/2) slope of a catenoid at its waist.
    """
    dirs, dw = sphere_rule(m, n_sph)
    nodes, weights = gauss_legendre(n_gl)
    total = 0.0
    start = a
    if singular and a > 0:
        hi = min(2 * a, b)
        s = 0.5 * (nodes + 1) * math.sqrt(hi / a - 1)
        w = 0.5 * weights * math.sqrt(hi / a - 1)
        r = a * (1 + s**2)
        jac = 2 * a * s
        pts = r[:, None, None] * dirs[None, :, :]
        vals = _excess_density(f.gradient(pts.reshape(-1, m))).reshape(len(r), len(dirs))
        total += float(np.sum((w * jac * r ** (m - 1))[:, None] * vals * dw[None, :]))
        start = hi
    if start < b:
        edges = radial_panels(start, b, breaks) if start > 0 else np.unique([0.0, *[t for t in breaks if 0 < t < b], b])
        for lo, hi in zip(edges[:-1], edges[1:]):
            r = lo + 0.5 * (nodes + 1) * (hi - lo)
            w = 0.5 * weights * (hi - lo)
            pts = r[:, None, None] * dirs[None, :, :]
            vals = _excess_density(f.gradient(pts.reshape(-1, m))).reshape(len(r), len(dirs))
            total += float(np.sum((w * r ** (m - 1))[:, None] * vals * dw[None, :]))
    return total


# ------------------------------------------------------------------ stages


@dataclass
class Stage:
    """One neck: local patch data plus measured quantities (global units)."""

    k: int
    r0: float
    r: float
    step: SingleStepResult | None = None
    lam: ConformalFactorField | None = None
    H: float = 0.0
    rho: float = 0.0
    hole_radius: float = 0.0  # global
    disk_radius: float | None = None  # global, theorem-2 mode
    du_C0: float = 0.0
    dlam_C0: float = 0.0
    mass_increment: float = 0.0
    boundary_increment: float = 0.0
    radial_cells: int = 0
    report: dict = field(default_factory=dict)
    assembly: object = None  # CalibrationAssembly in local coordinates

    @property
    def center(self):
        return self.r0

    def to_local(self, y):
        """Global ambient points (..., m+1) -> local (x, t)."""
        y = np.array(y, dtype=float, copy=True)
        y[..., 0] -= self.r0
        return y / self.r

    def in_patch(self, yh):
        d = np.array(yh, dtype=float, copy=True)
        d[..., 0] -= self.r0
        return np.linalg.norm(d, axis=-1) < 12 * self.r

    def in_cylinder(self, y):
        y = np.asarray(y, dtype=float)
        return self.in_patch(y[..., :-1]) & (np.abs(y[..., -1]) < 12 * self.r)


def graded_radii(a: float, b: float, grading: float, budget: int):
    """Radii from a to b growing geometrically near a; raises StageUnresolvable over budget."""
    if a <= 0:
        raise StageUnresolvable("hole radius underflows")
    n_geo = math.ceil(math.log(b / a) / math.log(grading))
    if n_geo > budget:
        raise StageUnresolvable(f"neck needs {n_geo} graded cells, budget {budget}")
    return np.geomspace(a, b, n_geo + 1), n_geo


def _lam_samples(stage: Stage, cfg: ConstructionConfig, T: float = 3.5):
    """Local sample points around the upper sheet over 8 < |x| < 11 (the support of lambda - 1)."""
    m = cfg.m
    glued = stage.step.glued
    radii = np.linspace(8.05, 10.95, cfg.lam_radii)
    if m == 2:
        dirs, _ = sphere_rule(2, max(cfg.lam_dirs // 2, 1))
    else:
        dirs, _ = sphere_rule(3, max(int(round(math.sqrt(cfg.lam_dirs / 2))), 1))
        if m > 3:
            dirs = np.concatenate([dirs, np.zeros((len(dirs), m - 3))], axis=-1)
    x = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, m)
    v = np.asarray(glued.value(x), dtype=float)
    top = min(2.9, 0.9 * T)  # lambda needs the chart wherever dist < 3
    ts = np.linspace(-top, top, cfg.lam_heights)
    t = v[:, None] + ts[None, :]
    pts = np.concatenate([np.repeat(x, len(ts), axis=0), t.reshape(-1, 1)], axis=-1)
    return pts


def _local_mass_change(step: SingleStepResult, m: int, hole: float, floating: bool, n_sph: int = 12):
    """(area change of one sheet inside B_12, disk area) in local units."""
    glued = step.glued
    a_u1 = annulus_excess(glued.u1, m, hole, GLUE_AT, breaks=(7.0, 8.0), n_sph=n_sph, singular=not floating)
    a_v = annulus_excess(glued, m, GLUE_AT, 12.0, breaks=(9 + 1 / 3, 9 + 2 / 3, 10.0, 11.0), n_sph=n_sph)
    a_u2 = annulus_excess(glued.u2, m, 0.0, 12.0, breaks=(GLUE_AT, 10.0), n_sph=n_sph)
    per_sheet = a_u1 + a_v - a_u2 - ball_volume(m, hole)
    return per_sheet, (ball_volume(m, hole) if floating else 0.0)


def _du_sup(step: SingleStepResult, hole: float, m: int, grading: float, budget: int):
    """sup |v - u2| over hole < |x| < 10 (local), sampled on graded radii times directions."""
    glued = step.glued
    radii, _ = graded_radii(hole, 10.0, grading, budget)
    dirs, _ = sphere_rule(min(m, 3), 6)
    if m > 3:
        dirs = np.concatenate([dirs, np.zeros((len(dirs), m - 3))], axis=-1)
    x = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, m)
    th = shifted_cutoff(np.linalg.norm(x, axis=-1), GLUE_AT)
    gap = np.asarray(glued.u1.value(x)) - np.asarray(glued.u2.value(x))
    return float(np.abs((1.0 - th) * gap).max())


def run_stage(cfg: ConstructionConfig, k: int, r0: float, r: float, base=None) -> Stage:
    """Single gluing step at (r0_k, r_k) with its metric and ledger entries."""
    m = cfg.m
    floating = cfg.model == "floating_disk"
    base = BaseGraph(cfg.N, m) if base is None else base
    try:
        step = single_gluing_step(base, r0, r, cfg.N, cfg.model, m, n_r=cfg.n_r, n_ang=cfg.n_ang)
    except BasePositivityFailed as exc:
        raise StageUnresolvable(f"stage {k}: {exc}") from exc
    glued = step.glued
    hole = float(glued.inner_radius)
    disk = step.surface.disk_radius
    _, cells = graded_radii(hole, 12.0, cfg.grading, cfg.max_radial_cells)
    asm = assemble_calibration(glued)
    lam = symmetrize_smooth(conformal_factor(asm), glued.H, measured_c(glued))
    st = Stage(k, r0, r, step, lam, H=glued.H, rho=float(step.report["rho"]), hole_radius=r * hole,
               disk_radius=None if disk is None else r * disk, radial_cells=cells, assembly=asm)
    st.du_C0 = r * _du_sup(step, hole, m, cfg.grading, cfg.max_radial_cells)
    st.dlam_C0 = float(np.abs(lam.defect(_lam_samples(st, cfg, asm.chart.T))).max())
    per_sheet, disk_area = _local_mass_change(step, m, hole, floating)
    st.mass_increment = r**m * (2 * per_sheet + disk_area)
    st.boundary_increment = sphere_area(m, st.disk_radius) if st.disk_radius is not None else 0.0
    st.report = {
        "delta": glued.report["delta"],
        "c_lower": glued.report.get("c_lower"),
        "T": asm.chart.T,
        "lam_defined": asm.chart.T >= 3.0,  # otherwise FormUndefined on T < dist < 3
        "gap_over_delta": glued.report["gap_over_delta"],
        "lam_over_Hm": st.dlam_C0 / glued.H**m if glued.H > 0 else math.nan,
        "du_over_r0N": st.du_C0 / r0**cfg.N,
        "mass_C": abs(st.mass_increment) / r0**m,
    }
    return st


# ------------------------------------------------------------------ complexes


@dataclass
class PerforatedDomain:
    """R^m minus the removed balls B(r0_k e1, hole_k), inside the ambient ball."""

    m: int
    ambient_radius: float
    centers: list = field(default_factory=list)  # r0_k
    radii: list = field(default_factory=list)

    def contains(self, yh):
        yh = np.asarray(yh, dtype=float)
        ok = np.linalg.norm(yh, axis=-1) < self.ambient_radius
        ok &= np.any(yh != 0.0, axis=-1)
        for c, rad in zip(self.centers, self.radii):
            d = yh.copy()
            d[..., 0] -= c
            ok &= np.linalg.norm(d, axis=-1) > rad
        return ok

    def check(self):
        """Removed balls pairwise disjoint and away from the origin."""
        for i, (c, rad) in enumerate(zip(self.centers, self.radii)):
            if c - rad <= 0:
                return False
            for c2, rad2 in zip(self.centers[i + 1:], self.radii[i + 1:]):
                if abs(c - c2) <= rad + rad2:
                    return False
        return True


@dataclass
class SurfaceComplex:
    """Sheets u and -u over the perforated domain (orientation signs per theorem mode) and disks."""

    config: ConstructionConfig
    stages: list
    k: int
    base: object = None

    def __post_init__(self):
        if self.base is None:
            self.base = BaseGraph(self.config.N, self.config.m)

    @property
    def m(self):
        return self.config.m

    @property
    def signs(self):
        return {"sheet-upper": +1, "sheet-lower": +1} if self.config.theorem_mode == "T1" else \
            {"sheet-upper": +1, "sheet-lower": -1, "disk": +1}

    @property
    def active(self):
        return [s for s in self.stages if 1 <= s.k <= self.k]

    @property
    def domain(self) -> PerforatedDomain:
        act = self.active
        return PerforatedDomain(self.m, self.config.ambient_radius, [s.r0 for s in act], [s.hole_radius for s in act])

    @property
    def disks(self):
        """(center r0_l, radius) of the flat disks B_l x {0} (theorem-2 mode)."""
        return [(s.r0, s.disk_radius) for s in self.active if s.disk_radius is not None]

    def upper(self, yh):
        """u_k on the perforated domain (NaN inside holes)."""
        yh = np.asarray(yh, dtype=float)
        out = np.asarray(self.base.value(yh), dtype=float).copy()
        for s in self.active:
            mask = s.in_patch(yh)
            if np.any(mask):
                x = s.to_local(np.concatenate([yh[mask], np.zeros(yh[mask].shape[:-1] + (1,))], axis=-1))[..., :-1]
                vals = s.r * np.asarray(s.step.glued.value(x), dtype=float)
                inside = np.linalg.norm(x, axis=-1) < s.step.glued.inner_radius
                out[mask] = np.where(inside, np.nan, vals)
        return out

    def lower(self, yh):
        return -self.upper(yh)

    def lam_defect(self, y):
        """lambda_k - 1 at ambient points."""
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape[:-1])
        for s in self.active:
            mask = s.in_cylinder(y)
            if np.any(mask):
                out[mask] = s.lam.defect(s.to_local(y[mask]))
        return out

    def lam(self, y):
        return 1.0 + self.lam_defect(y)

    def lam_field(self) -> ConformalFactorField:
        return ConformalFactorField(self.lam_defect, 0.0, self.m, (0.0, self.config.ambient_radius))

    def reflect(self, y):
        y = np.array(y, dtype=float, copy=True)
        y[..., -1] *= -1
        return y


@dataclass
class MassLedger:
    """Per-stage mass and boundary-mass increments with their bounds."""

    base_mass: float
    r0: list = field(default_factory=list)
    increments: list = field(default_factory=list)
    boundary: list = field(default_factory=list)
    boundary_bounds: list = field(default_factory=list)

    @property
    def mass(self):
        return self.base_mass + float(np.sum(self.increments))

    @property
    def boundary_partial_sums(self):
        return np.cumsum(self.boundary).tolist()

    def mass_constants(self, m: int):
        return [abs(d) / r**m for d, r in zip(self.increments, self.r0)]

    def geometric_tail_bound(self):
        """b_1 / (1 - q) with q the largest successive ratio of boundary increments."""
        b = np.asarray(self.boundary, dtype=float)
        if len(b) == 0 or b[0] == 0:
            return 0.0
        q = float(np.max(b[1:] / b[:-1])) if len(b) > 1 else 0.0
        return float(b[0] / (1 - q)) if q < 1 else math.inf

    def checks(self, m: int, C: float = 1.0):
        cs = self.mass_constants(m)
        part = self.boundary_partial_sums
        tail = self.geometric_tail_bound()
        return {
            "mass_increments": all(c <= C for c in cs),
            "boundary_increments": all(b <= bb * (1 + 1e-12) for b, bb in zip(self.boundary, self.boundary_bounds)),
            "boundary_tail": all(s <= tail * (1 + 1e-12) for s in part),
            "mass_constants": cs,
        }


def theta_bar(m: int) -> float:
    """Upper bound for disk radius / H: rho <= 2H/c_inf (m >= 3) or rho <= H (m = 2), times r0(m)."""
    prof = RadialProfile(m, 1.0, floating=True)
    return prof.start * (2.0 / prof.c_inf if m >= 3 else 1.0)


def boundary_bound(m: int, st: Stage) -> float:
    """|dB_1| (theta H r)^(m-1) with the a-priori theta above."""
    return sphere_area(m, st.r * st.H * theta_bar(m))


def base_mass(cfg: ConstructionConfig, n_sph: int = 16) -> float:
    """Mass of the two base sheets over the ambient ball (varifold: signs ignored)."""
    m = cfg.m
    R = cfg.ambient_radius
    excess = annulus_excess(BaseGraph(cfg.N, m), m, 0.0, R, breaks=(R / 2,), n_gl=16, n_sph=n_sph)
    return 2 * (ball_volume(m, R) + excess)


@dataclass
class Construction:
    config: ConstructionConfig
    stages: list
    ledger: MassLedger

    def complex(self, k: int | None = None) -> SurfaceComplex:
        return SurfaceComplex(self.config, self.stages, self.config.k_max if k is None else k)


def iterate(config: ConstructionConfig, base=None) -> Construction:
    """Run stages k = 1..k_max; stage 0 is the base model with lambda = 1."""
    cfg = config.validate()
    stages = [Stage(0, 0.0, 1.0, lam=unit_factor(cfg.m))]
    ledger = MassLedger(base_mass(cfg))
    for k, r0, r in cfg.scales():
        st = run_stage(cfg, k, r0, r, base)
        stages.append(st)
        ledger.r0.append(r0)
        ledger.increments.append(st.mass_increment)
        ledger.boundary.append(st.boundary_increment)
        ledger.boundary_bounds.append(boundary_bound(cfg.m, st) if st.disk_radius else 0.0)
    return Construction(cfg, stages, ledger)


def assemble_limit(construction: Construction) -> SurfaceComplex:
    """The stabilized limit: every stage spliced in (u = u_kmax off the finest scale)."""
    if len(construction.stages) < 1:
        raise ValueError("need at least one stage")
    return construction.complex()
