"""Numerical certificates: minimality, weighted first variation, calibration, density, necks, angles, rates."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .assembly import ball_volume, sphere_rule
from .calibration import closedness_study
from .errors import InsufficientStages, ScaleUnresolved, SupportUnresolved
from .kernels import triangle_areas
from .numerics import BoxGrid, GridFunction, bump, discrete_holder_seminorm, fd_partial, fit_slope, gauss_legendre

# ------------------------------------------------------------------ report


@dataclass
class Check:
    name: str
    value: float
    bound: float
    tol: float
    passed: bool
    provenance: str = "[DERIVED]"
    grid: dict = field(default_factory=dict)
    order: float | None = None
    note: str = ""


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check

    def extend(self, other: "VerificationReport"):
        self.checks.extend(other.checks)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c.name for c in self.sorted() if not c.passed]

    def sorted(self):
        return sorted(self.checks, key=lambda c: c.name)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self) -> str:
        recs = []
        for c in self.sorted():
            d = asdict(c)
            d["pass"] = bool(d.pop("passed"))
            recs.append(_jsonable(d))
        return json.dumps({"checks": recs, "all_pass": self.passed}, sort_keys=True, indent=2) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ------------------------------------------------------------------ minimality


def minimal_residual(u: GridFunction, region=None):
    """A(grad u) : D^2 u = Delta u - (grad u . D^2 u grad u) / (1 + |grad u|^2) on a BoxGrid.

    ``region`` is a boolean mask (or a callable on node coordinates); the residual is NaN
    outside it.  Raises GridTooCoarse through the FD stencils.
    """
    n = len(u.grid.shape)
    g = [fd_partial(u, i, 1).values for i in range(n)]
    Hs = [[None] * n for _ in range(n)]
    for i in range(n):
        Hs[i][i] = fd_partial(u, i, 2).values
        for j in range(i + 1, n):
            Hs[i][j] = Hs[j][i] = fd_partial(fd_partial(u, i, 1), j, 1).values
    g2 = sum(gi * gi for gi in g)
    lap = sum(Hs[i][i] for i in range(n))
    quad = sum(g[i] * Hs[i][j] * g[j] for i in range(n) for j in range(n))
    res = lap - quad / (1.0 + g2)
    if region is not None:
        mask = region(*u.grid.mesh()) if callable(region) else np.asarray(region, bool)
        res = np.where(mask, res, np.nan)
    return res


def minimality_check(f, m: int, bounds, ns=(33, 65, 129), tol: float = 1e-3, floor: float = 1.8,
                     name: str = "minimality") -> Check:
    """Refinement study of the minimal-surface residual of the graph of ``f`` on a box.

    The value is the finest residual relative to the largest second derivative.  A study
    whose coarsest residual is already at the rounding floor eps |u| / h^2 passes with
    order NaN; otherwise the order floor and the tolerance both apply.
    """
    res, hs, scale, noise = [], [], 0.0, 0.0
    for n in ns:
        grid = BoxGrid.from_bounds(list(bounds)[:m], [n] * m)
        vals = np.asarray(f(grid.points().reshape(-1, m)), dtype=float).reshape(grid.shape)
        u = GridFunction(grid, vals)
        inner = (slice(2, -2),) * m
        res.append(float(np.nanmax(np.abs(minimal_residual(u)[inner]))))
        hs.append(min(grid.spacings))
        scale = max(float(np.abs(fd_partial(u, i, 2).values).max()) for i in range(m))
        noise = noise or 64 * np.finfo(float).eps * float(np.abs(vals).max()) / hs[0] ** 2
    grid_info = {"n": list(ns), "h": hs}
    if res[0] <= noise:
        return Check(name, res[-1], noise, tol, True, "[DERIVED]", grid_info, math.nan, "at rounding level")
    rel = res[-1] / scale if scale > 0 else math.inf
    order = fit_slope(hs, res)
    return Check(name, rel, tol, tol, bool(order >= floor and rel <= tol), "[DERIVED]", grid_info, order)


# ------------------------------------------------------------------ first variation


@dataclass
class VectorField:
    """Smooth X(y) = chi(y) V(y) with analytic Jacobian; chi = bump(|y - c| / s) or 1."""

    kind: str
    param: np.ndarray
    center: np.ndarray | None = None
    scale: float | None = None
    amplitude: float = 1.0

    def _base(self, y):
        k, a = self.kind, self.param
        if k == "translation":
            V = np.broadcast_to(a, y.shape).copy()
            J = np.zeros(y.shape + (3,))
        elif k == "rotation":  # a x y
            V = np.cross(a, y)
            Ax = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]], dtype=float)
            J = np.broadcast_to(Ax, y.shape + (3,)).copy()
        elif k == "radial":
            V = y - a
            J = np.broadcast_to(np.eye(3), y.shape + (3,)).copy()
        else:
            raise ValueError(k)
        return V, J

    def value_and_jacobian(self, y):
        y = np.asarray(y, dtype=float)
        V, J = self._base(y)
        if self.center is None:
            return self.amplitude * V, self.amplitude * J
        d = y - self.center
        r = np.linalg.norm(d, axis=-1)
        s = r / self.scale
        chi = bump(s)
        h = 1e-6
        dchi = (bump(s + h) - bump(s - h)) / (2 * h) / self.scale
        grad = dchi[..., None] * d / np.where(r > 0, r, 1.0)[..., None]
        Xv = chi[..., None] * V
        JX = chi[..., None, None] * J + V[..., :, None] * grad[..., None, :]
        return self.amplitude * Xv, self.amplitude * JX

    def __call__(self, y):
        return self.value_and_jacobian(y)[0]


def field_battery(center, seed: int = 0, scales=(2.5, 1.6, 1.0)):
    """Twelve localized fields: 3 translations, 3 rotations and a dilation at the first scale,
    then 5 seeded random translations/rotations spread over the three scales."""
    c = np.asarray(center, dtype=float)
    rng = np.random.default_rng(seed)
    eye = np.eye(3)
    out = [VectorField("translation", eye[i], c, scales[0]) for i in range(3)]
    out += [VectorField("rotation", eye[i], c, scales[0]) for i in range(3)]
    out.append(VectorField("radial", c, c, scales[0]))
    for i in range(5):
        kind = "translation" if i % 2 == 0 else "rotation"
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        out.append(VectorField(kind, a, c + 0.3 * rng.normal(size=3) * (i % 3 == 2), scales[1 + i % 2]))
    return out


def _lam_power_and_grad(lam, pts, m, h=1e-5):
    """lambda^m at points and grad(lambda^m) by central differences of the defect."""
    d0 = np.asarray(lam.defect(pts), dtype=float)
    w = (1.0 + d0) ** m
    grad = np.zeros(pts.shape)
    active = None
    for i in range(pts.shape[-1]):
        e = np.zeros(pts.shape[-1])
        e[i] = h
        dp = np.asarray(lam.defect(pts + e), dtype=float)
        dm = np.asarray(lam.defect(pts - e), dtype=float)
        grad[:, i] = (dp - dm) / (2 * h)
        active = (dp != 0) | (dm != 0) | (d0 != 0) if active is None else active | (dp != 0) | (dm != 0)
    grad *= (m * (1.0 + d0) ** (m - 1))[:, None]
    return w, grad


@dataclass
class WeightedMesh:
    """A mesh with the weights lambda^m and their gradients cached at centroids."""

    vertices: np.ndarray
    faces: np.ndarray
    weight: np.ndarray
    weight_grad: np.ndarray
    m: int = 2

    @classmethod
    def build(cls, mesh, lam, m: int = 2):
        v, f = mesh.vertices, mesh.faces
        cen = v[f].mean(axis=1)
        w, gw = _lam_power_and_grad(lam, cen, m)
        return cls(v, f, w, gw, m)

    def area(self):
        return float(np.dot(triangle_areas(self.vertices, self.faces), self.weight))


def weighted_first_variation(wmesh: WeightedMesh, X: VectorField, min_support_vertices: int = 16):
    """d/dt A_g(Phi_t(mesh)) at t = 0 (exact derivative of the discrete weighted area),
    normalized by ||X||_{C^1} times the weighted area of the triangles X moves.

    A_g = sum_T lambda(c_T)^m |T|; the centroid moves with the mean vertex velocity.
    Returns (normalized value, raw derivative, normalization).
    """
    v, f = wmesh.vertices, wmesh.faces
    Xv, JX = X.value_and_jacobian(v)
    mag = np.linalg.norm(Xv, axis=-1)
    scale = mag.max()
    if scale == 0:
        raise SupportUnresolved("vector field vanishes on the mesh")
    moving = mag > 1e-12 * scale
    if moving.sum() < min_support_vertices:
        raise SupportUnresolved(f"support covers {moving.sum()} vertices (< {min_support_vertices})")
    e, c = _boundary_vertices(f)
    if np.any(moving[e]):
        raise SupportUnresolved("vector field does not vanish on the mesh boundary")
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    x0, x1, x2 = Xv[f[:, 0]], Xv[f[:, 1]], Xv[f[:, 2]]
    a = 0.5 * np.cross(p1 - p0, p2 - p0)
    area = np.linalg.norm(a, axis=-1)
    da = 0.5 * (np.cross(x1 - x0, p2 - p0) + np.cross(p1 - p0, x2 - x0))
    darea = np.sum(a * da, axis=-1) / np.where(area > 0, area, 1.0)
    xbar = (x0 + x1 + x2) / 3.0
    deriv = float(np.sum(wmesh.weight * darea + np.sum(wmesh.weight_grad * xbar, axis=-1) * area))
    c1 = float(mag.max() + np.linalg.norm(JX, ord=2, axis=(-2, -1)).max())
    tri_moving = moving[f].any(axis=1)
    A_supp = float(np.dot(area[tri_moving], wmesh.weight[tri_moving]))
    norm = c1 * A_supp
    return deriv / norm, deriv, norm


def _boundary_vertices(faces):
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    u, c = np.unique(e, axis=0, return_counts=True)
    return np.unique(u[c == 1]), c


def first_variation_study(pair, lam, hs=(0.04, 0.02, 0.01), a=6.0, b=12.5, battery=None, tol=1e-3, seed=0):
    """Battery of normalized first variations on both sheets of ``pair`` over a sector of
    a <= |x| <= b around the e1 axis, for decreasing mesh spacings ``hs``.

    Returns per-spacing maxima over the battery, the fitted order and per-field values.
    The first spacing is the default resolution.
    """
    from .mesh import sector_mesh

    center = np.array([9.5, 0.0, float(pair.value(np.array([[9.5, 0.0]]))[0])])
    fields_ = battery if battery is not None else field_battery(center, seed)
    maxima, per = [], []
    for h in hs:
        mesh = sector_mesh(pair, a, b, h)
        wm = WeightedMesh.build(mesh, lam, 2)
        vals = [float(weighted_first_variation(wm, X)[0]) for X in fields_]
        per.append(vals)
        maxima.append(max(abs(v) for v in vals))
    # summing F signed triangle terms of relative size 1 leaves ~ eps sqrt(F)
    floor = 64 * np.finfo(float).eps * math.sqrt(len(mesh.faces))
    ok = np.asarray(maxima) > 0
    order = fit_slope(np.asarray(hs)[ok], np.asarray(maxima)[ok]) if ok.sum() >= 2 else math.inf
    if max(maxima) <= floor:
        passed, note = True, "at rounding level"
    else:
        passed = maxima[0] <= tol and order >= 0.9 and all(b_ <= a_ for a_, b_ in zip(maxima, maxima[1:]))
        note = ""
    return {"h": list(hs), "max": maxima, "order": order, "per_field": per, "tol": tol, "passed": passed,
            "floor": floor, "note": note}


# ------------------------------------------------------------------ calibration certificate


def calibration_certificate(assembly, lam, n_probe: int = 40, seed: int = 0, tol_comass: float = 1e-8,
                            tol_graph: float = 1e-10, hs=(0.02, 0.01, 0.005, 0.0025)) -> VerificationReport:
    """Closedness (refinement order), restriction to the graph, comass in lambda^2 delta on dist < 2.

    For a symmetrized factor (``smoothing_band`` in its meta) the comass check keeps points with
    y_(m+1) above the band edge: below it lambda_2 is an average, and across the plane it is
    the mirror image belonging to the reflected sheet's form.
    """
    rng = np.random.default_rng(seed)
    m = assembly.chart.m
    d, _ = sphere_rule(m, 6) if m in (2, 3) else (np.eye(m), None)
    rad = rng.uniform(8.05, 10.95, n_probe)
    x = rad[:, None] * d[rng.integers(len(d), size=n_probe)]
    T = min(assembly.chart.T, 2.0)
    tau = rng.uniform(-0.75 * T, 0.75 * T, n_probe)
    rep = VerificationReport()
    st = closedness_study(assembly.form(), x, tau, hs)
    if max(st["residual"]) <= st["floor"]:
        rep.add(Check("calibration.closed", st["residual"][-1], 1e-6, 1e-6, True, "[DERIVED]", {"h": list(hs)},
                      math.nan, f"at rounding level {st['floor']:.3g}"))
    else:
        rep.add(Check("calibration.closed", st["residual"][-1], 1e-6, 1e-6,
                      st["order"] >= 1.8 and st["residual"][-1] < 1e-6, "[DERIVED]", {"h": list(hs)}, st["order"]))
    A, _ = assembly.coeffs(x, np.zeros(n_probe))
    dev = float(np.abs(A - assembly.chart.sqrt_g(x)).max())
    rep.add(Check("calibration.restriction", dev, tol_graph, tol_graph, dev <= tol_graph, "[STATED]", {"n": n_probe}))
    tight = float(np.abs(assembly.comass_excess(x, np.zeros(n_probe))).max())
    rep.add(Check("calibration.graph_comass", tight, tol_graph, tol_graph, tight <= tol_graph, "[STATED]",
                  {"n": n_probe}))
    # comass in lambda^2 delta: |W| / lambda^m, sampled on dist < min(2, T)
    taus = np.linspace(-0.99 * min(2.0, assembly.chart.T), 0.99 * min(2.0, assembly.chart.T), 25)
    X = np.repeat(x, len(taus), axis=0)
    TT = np.tile(taus, n_probe)
    y = assembly.chart.phi(X, TT)
    excess = assembly.comass_excess(X, TT)
    band = lam.meta.get("smoothing_band")
    keep = y[:, -1] >= band[1] if band else np.ones(len(y), bool)
    y, excess = y[keep], excess[keep]
    dl = np.asarray(lam.defect(y), dtype=float)
    ratio = np.expm1(np.log1p(excess) - m * np.log1p(dl))
    worst = float(ratio.max())
    rep.add(Check("calibration.comass_lambda", worst, tol_comass, tol_comass, worst <= tol_comass, "[DERIVED]",
                  {"n": int(len(y)), "band_skipped": int((~keep).sum())}))
    return rep


# ------------------------------------------------------------------ density


@dataclass(frozen=True)
class DoublePlane:
    m: int = 2


def _sheet_mass(graph, m, r, n_sph=16, n_gl=24):
    """Area of the graph of u inside the ambient ball B_r: integral over {|x|^2 + u^2 < r^2}."""
    dirs, dw = sphere_rule(m, n_sph)
    # radial extent per direction: s^2 + u(s d)^2 = r^2 (u is tiny, fixed point converges at once)
    s = np.full(len(dirs), float(r))
    for _ in range(6):
        u = np.asarray(graph.value(s[:, None] * dirs), dtype=float)
        s = np.sqrt(np.maximum(r * r - u * u, 0.0))
    nodes, weights = gauss_legendre(n_gl)
    t = 0.5 * (nodes + 1)
    w = 0.5 * weights
    pts = (s[:, None, None] * t[None, :, None]) * dirs[:, None, :]
    g = np.asarray(graph.gradient(pts.reshape(-1, m)), dtype=float).reshape(len(dirs), len(t), m)
    g2 = np.sum(g * g, axis=-1)
    exc = g2 / (np.sqrt(1 + g2) + 1)
    excess = np.sum(dw * s**m * np.sum(w * t ** (m - 1) * exc, axis=1))
    flat = np.sum(dw * s**m) / m
    return flat, excess


def density_ratio(cx, r: float, n_sph: int = 16):
    """||V||(B_r) / (omega_m r^m), both sheets counted positively plus disks.

    Returns (ratio, details).  Neck patches entirely inside B_r contribute their ledger
    increments; a patch straddling the sphere contributes between 0 and its increment, and
    that spread is reported as ``patch_uncertainty``.
    """
    if isinstance(cx, DoublePlane):
        return 2.0, {"exact": True}
    m = cx.m
    act = cx.active
    if act:
        fin = act[-1]
        if r <= fin.r0 + 12 * fin.r:
            raise ScaleUnresolved(f"r = {r:.3g} reaches necks below stage {fin.k}, which are not constructed")
    flat, excess = _sheet_mass(cx.base, m, r, n_sph)
    inc, unc = 0.0, 0.0
    for s in act:
        if s.r0 + 12 * s.r < r:
            inc += s.mass_increment
        elif s.r0 - 12 * s.r < r:
            unc += abs(s.mass_increment)
    vol = ball_volume(m, r)
    ratio = (2 * flat + 2 * excess + inc) / vol
    return float(ratio), {"flat": 2 * flat / vol, "excess": 2 * excess / vol, "necks": inc / vol,
                          "patch_uncertainty": unc / vol}


# ------------------------------------------------------------------ necks and angles


def neck_census(config, r: float) -> int:
    """#{k <= k_max : r_{0,k} + 12 r_{0,k}^p < r} (necks or disk circles strictly inside B_r)."""
    return sum(1 for _, r0, rk in config.scales() if r0 + 12 * rk < r)


def _conormals(V, rings_seq, ring0):
    """Second-order one-sided tangents at ring0 along the ring sequence (parameter = radial offset)."""
    P0 = V[ring0]
    P1, P2 = V[rings_seq[0]], V[rings_seq[1]]
    rad = lambda P: np.linalg.norm(P[:, :2], axis=-1)  # noqa: E731
    d1 = rad(P1) - rad(P0)
    d2 = rad(P2) - rad(P0)
    c0 = -(d1 + d2) / (d1 * d2)
    c1 = d2 / (d1 * (d2 - d1))
    c2 = -d1 / (d2 * (d2 - d1))
    T = c0[:, None] * P0 + c1[:, None] * P1 + c2[:, None] * P2
    T *= np.sign(d1)[:, None]  # point away from the ring
    er = P0[:, :2] / np.linalg.norm(P0[:, :2], axis=-1)[:, None]
    return np.arctan2(T[:, 2], np.sum(T[:, :2] * er, axis=-1))


def angle_check(mesh):
    """Angles (upper-disk, disk-lower, lower-upper) at every waist-ring vertex of a patch mesh.

    Directions come from quadratic extrapolation along the next two rings of each sheet.
    """
    rings = mesh.meta["rings"]
    if "disk" not in rings:
        raise ValueError("angle check needs a floating-disk patch")
    V = mesh.vertices
    w = rings["waist"]
    phi_u = _conormals(V, rings["upper"], w)
    phi_l = _conormals(V, rings["lower"], w)
    phi_d = _conormals(V, rings["disk"], w)
    two_pi = 2 * np.pi
    a_ud = np.mod(phi_d - phi_u, two_pi)
    a_dl = np.mod(phi_l - phi_d, two_pi)
    a_lu = np.mod(phi_u - phi_l, two_pi)
    return a_ud, a_dl, a_lu


# ------------------------------------------------------------------ convergence


def predicted_exponent(m, N, p, j, alpha):
    e = m * (N - p)
    return (1 - alpha) * (e - j * N) + alpha * (e - (j + 1) * N)


def stage_holder_norm(stage, j: int = 0, alpha: float = 0.0, n: int = 41):
    """C^{j,alpha} norm of lambda_k - 1 in ambient units, sampled on the (x_1, t) slice through
    the blend band of the upper sheet (local units scaled by r^-(j+alpha))."""
    if j == 0 and alpha == 0:
        return stage.dlam_C0
    glued = stage.step.glued
    m = glued.m
    x1 = np.linspace(8.2, 10.8, n)
    T = min(2.5, 0.9 * stage.report.get("T", 3.5))
    ts = np.linspace(-T, T, n)
    X1, TT = np.meshgrid(x1, ts, indexing="ij")
    xs = np.zeros(X1.shape + (m,))
    xs[..., 0] = X1
    v = np.asarray(glued.value(xs.reshape(-1, m)), dtype=float).reshape(X1.shape)
    y = np.concatenate([xs, (v + TT)[..., None]], axis=-1)
    vals = np.asarray(stage.lam.defect(y.reshape(-1, m + 1)), dtype=float).reshape(X1.shape)
    grid = BoxGrid.from_bounds([(x1[0], x1[-1]), (ts[0], ts[-1])], [n, n])
    f = GridFunction(grid, vals)
    sup = discrete_holder_seminorm(f, j, 0.0)
    quot = discrete_holder_seminorm(f, j, alpha) - sup if alpha > 0 else 0.0
    r = stage.r
    return sup * r ** (-j) + quot * r ** (-(j + alpha))


def convergence_study(stage_norms, r0s, j: int, alpha: float, m=None, N=None, p=None):
    """Slope of log ||lambda_k - lambda_kmax|| against log r_{0,k}.

    ``stage_norms[k]`` is ||lambda_k - lambda_{k-1}|| (stages have disjoint supports, so the
    distance to the last stage is the max over later stages).
    """
    norms = np.asarray(stage_norms, dtype=float)
    r0s = np.asarray(r0s, dtype=float)
    if len(norms) < 4:
        raise InsufficientStages(f"need >= 4 stages, got {len(norms)}")
    diffs = np.array([norms[k + 1:].max() for k in range(len(norms) - 1)])
    pred = predicted_exponent(m, N, p, j, alpha) if m is not None else None
    if np.all(diffs == 0):
        return {"status": "converged exactly", "fitted": math.inf, "predicted": pred, "diffs": diffs.tolist()}
    ok = diffs > 0
    fitted = fit_slope(r0s[:-1][ok], diffs[ok])
    return {"status": "fitted", "fitted": fitted, "predicted": pred, "diffs": diffs.tolist(),
            "relative_error": abs(fitted - pred) / abs(pred) if pred else None}
