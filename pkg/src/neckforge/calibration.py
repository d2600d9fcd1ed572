"""Calibration forms near a graph: normal charts, pullbacks, the flow homotopy, assembly.

Conventions
-----------
Ambient m-forms on R^(m+1) are stored through their Hodge-dual vector W, so that
omega(v_1, ..., v_m) = det(v_1, ..., v_m, W); the comass of such a form is |W|, and
the unit upward normal restricts to +dvol on the graph in every dimension.

In a normal chart (x, tau) an m-form is A dx^1..dx^m + sum_j B_j dtau ^ dx^(omit j)
(``FormField``); an (m-1)-form of the shape sum_j M_j dx^(omit j) is a
``PrimitiveForm``; an (m+1)-form is C dtau ^ dx (``TopForm``).  Index j is 0-based
in code, so the sign (-1)^(j-1) of the 1-based formulas becomes (-1)^j.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import GridTooCoarse, NonVanishingAtZero, ProjectionAmbiguous
from .numerics import (
    AnnulusGrid,
    BoxGrid,
    GridFunction,
    fd_partial,
    gauss_legendre,
    shifted_cutoff,
    smooth_cutoff_derivative,
)

T_MAX = 3.5
CHUNK = 2048  # points per Gauss-Legendre batch in the tau integrals

# ------------------------------------------------------------------ linear algebra helpers


def unit_normal(grad):
    """(-grad, 1)/sqrt(1 + |grad|^2)."""
    g = np.asarray(grad, dtype=float)
    w = np.sqrt(1.0 + np.sum(g * g, axis=-1))
    out = np.concatenate([-g, np.ones(g.shape[:-1] + (1,))], axis=-1)
    return out / w[..., None]


def normal_difference(p, q, dpq):
    """N(p) - N(q) for gradients p, q, given dpq = p - q computed accurately."""
    p, q, dpq = (np.asarray(a, dtype=float) for a in (p, q, dpq))
    wp = np.sqrt(1.0 + np.sum(p * p, axis=-1))
    wq = np.sqrt(1.0 + np.sum(q * q, axis=-1))
    inv_diff = -np.sum(dpq * (p + q), axis=-1) / (wp * wq * (wp + wq))  # 1/wp - 1/wq
    horiz = -dpq / wp[..., None] - q * inv_diff[..., None]
    return np.concatenate([horiz, inv_diff[..., None]], axis=-1)


def wedge_vector(V):
    """C with det(v_1, ..., v_m, W) = W . C for the rows v_i of V (shape (..., m, m+1))."""
    V = np.asarray(V, dtype=float)
    n = V.shape[-1]
    m = n - 1
    out = np.empty(V.shape[:-2] + (n,))
    for a in range(n):
        minor = np.delete(V, a, axis=-1)
        out[..., a] = (-1) ** (a + m) * np.linalg.det(minor)
    return out


def det_with(W, V):
    """omega(v_1, ..., v_m) = det(v_1, ..., v_m, W) for the form with dual vector W."""
    return np.sum(np.asarray(W) * wedge_vector(V), axis=-1)


def comass_simple(W, lam=1.0, m: int | None = None):
    """Comass of the m-form with dual vector W in the metric lam^2 (Euclidean)."""
    W = np.asarray(W, dtype=float)
    m = W.shape[-1] - 1 if m is None else m
    return np.linalg.norm(W, axis=-1) / np.asarray(lam, dtype=float) ** m


def _elementary_symmetric(h):
    """e_1..e_m of the eigenvalues of h (..., m, m) via Newton's identities."""
    m = h.shape[-1]
    powers = []
    hk = h
    for _ in range(m):
        powers.append(np.trace(hk, axis1=-2, axis2=-1))
        hk = hk @ h
    e = [np.ones(h.shape[:-2])]
    for k in range(1, m + 1):
        s = sum((-1) ** (i - 1) * e[k - i] * powers[i - 1] for i in range(1, k + 1))
        e.append(s / k)
    return e


# ------------------------------------------------------------------ forms


@dataclass
class FormField:
    """m-form A dx + sum_j B_j dtau ^ dx^(omit j) given by coefficient callables."""

    m: int
    A: Callable
    B: Callable | None = None
    name: str = ""

    def coeffs(self, x, tau):
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        a = np.broadcast_to(np.asarray(self.A(x, tau), dtype=float), np.broadcast_shapes(x.shape[:-1], tau.shape))
        if self.B is None:
            b = np.zeros(a.shape + (self.m,))
        else:
            b = np.asarray(self.B(x, tau), dtype=float)
        return a, b

    def __sub__(self, other: "FormField") -> "FormField":
        def A(x, t):
            return self.coeffs(x, t)[0] - other.coeffs(x, t)[0]

        def B(x, t):
            return self.coeffs(x, t)[1] - other.coeffs(x, t)[1]

        return FormField(self.m, A, B, f"{self.name}-{other.name}")

    def __add__(self, other: "FormField") -> "FormField":
        def A(x, t):
            return self.coeffs(x, t)[0] + other.coeffs(x, t)[0]

        def B(x, t):
            return self.coeffs(x, t)[1] + other.coeffs(x, t)[1]

        return FormField(self.m, A, B, f"{self.name}+{other.name}")


@dataclass
class PrimitiveForm:
    """(m-1)-form sum_j M_j dx^(omit j)."""

    m: int
    M: Callable
    name: str = ""

    def coeffs(self, x, tau):
        return np.asarray(self.M(np.asarray(x, dtype=float), np.asarray(tau, dtype=float)), dtype=float)


@dataclass
class TopForm:
    """(m+1)-form C dtau ^ dx."""

    m: int
    C: Callable

    def coeffs(self, x, tau):
        return np.asarray(self.C(np.asarray(x, dtype=float), np.asarray(tau, dtype=float)), dtype=float)


def _shift(x, j, h):
    y = np.array(x, dtype=float, copy=True)
    y[..., j] += h
    return y


def exterior_derivative(form, h: float = 1e-3):
    """Exterior derivative by central differences of step h in x and tau."""
    m = form.m
    if isinstance(form, PrimitiveForm):
        def A(x, t):
            out = 0.0
            for j in range(m):
                dj = (form.coeffs(_shift(x, j, h), t)[..., j] - form.coeffs(_shift(x, j, -h), t)[..., j]) / (2 * h)
                out = out + (-1) ** j * dj
            return out

        def B(x, t):
            return (form.coeffs(x, t + h) - form.coeffs(x, t - h)) / (2 * h)

        return FormField(m, A, B, f"d({form.name})")
    if isinstance(form, FormField):
        def C(x, t):
            out = (form.coeffs(x, t + h)[0] - form.coeffs(x, t - h)[0]) / (2 * h)
            for j in range(m):
                dj = (form.coeffs(_shift(x, j, h), t)[1][..., j] - form.coeffs(_shift(x, j, -h), t)[1][..., j]) / (2 * h)
                out = out - (-1) ** j * dj
            return out

        return TopForm(m, C)
    raise TypeError("exterior_derivative expects a PrimitiveForm or FormField")


def _tau_integral(fn, x, tau, n):
    """tau * int_0^1 fn(x, lam*tau) dlam with n-point Gauss-Legendre; fn returns (..., k) or (...)."""
    nodes, weights = gauss_legendre(n)
    lam = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    x = np.asarray(x, dtype=float)
    tau = np.asarray(tau, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], tau.shape)
    xb = np.broadcast_to(x, shape + x.shape[-1:])
    tb = np.broadcast_to(tau, shape)
    vals = fn(xb[None], lam.reshape((-1,) + (1,) * len(shape)) * tb[None])
    vals = np.asarray(vals, dtype=float)
    wt = w.reshape((-1,) + (1,) * (vals.ndim - 1))
    integral = np.sum(wt * vals, axis=0)
    scale = tb if integral.ndim == len(shape) else tb[..., None]
    return scale * integral


def poincare_antiderivative(sigma, n: int = 64, check_tol: float | None = 1e-9):
    """Flow homotopy I^Y for Y = tau d/dtau with flow (x, e^t tau), integrated from t = -inf.

    For an m-form, I^Y sigma = sum_j M_j dx^(omit j) with M_j = int_0^tau B_j(x, s) ds;
    for a top form C dtau ^ dx, I^Y = (int_0^tau C(x, s) ds) dx.  The identity
    d I^Y + I^Y d = id - (restriction to tau = 0) holds; for sigma with A(x, 0) = 0 the
    restriction term vanishes.
    """
    if isinstance(sigma, TopForm):
        def A(x, t):
            return _tau_integral(sigma.coeffs, x, t, n)

        return FormField(sigma.m, A, None, "I(top)")
    if not isinstance(sigma, FormField):
        raise TypeError("poincare_antiderivative expects a FormField or TopForm")

    def M(x, t):
        if check_tol is not None:
            a0 = sigma.coeffs(x, np.zeros_like(np.asarray(t, dtype=float)))[0]
            if np.any(np.abs(a0) > check_tol):
                raise NonVanishingAtZero(f"sigma(x, 0) has |A| up to {np.abs(a0).max():.3e}")
        return _tau_integral(lambda xx, tt: sigma.coeffs(xx, tt)[1], x, t, n)

    return PrimitiveForm(sigma.m, M, f"I({sigma.name})")


def radial_homotopy_2form(W: Callable, n: int = 64):
    """Classical homotopy for Y(x) = x on R^3: the 1-form int_0^1 lam W(lam x) x x dlam
    of the 2-form with dual vector W.  Its curl recovers W when div W = 0."""
    nodes, weights = gauss_legendre(n)
    lam = 0.5 * (nodes + 1.0)
    w = 0.5 * weights

    def alpha(x):
        x = np.asarray(x, dtype=float)
        vals = np.stack([l * np.cross(W(l * x), x) for l in lam])
        return np.tensordot(w, vals, axes=1)

    return alpha


# ------------------------------------------------------------------ graph calibrations


@dataclass
class AmbientForm:
    """Ambient m-form on R^(m+1) through its dual vector field W(y)."""

    m: int
    W: Callable
    name: str = ""

    def __call__(self, y):
        return self.W(np.asarray(y, dtype=float))


def graph_calibration(u, m: int | None = None) -> AmbientForm:
    """omega_u(y) = sum_alpha N_u^alpha(y_h) *dy^alpha, the unit normal extended vertically.

    ``u`` is a graph evaluator (``gradient``) or a GridFunction on a BoxGrid; the form is
    closed exactly when u is minimal, and has comass 1 everywhere.
    """
    if isinstance(u, GridFunction):
        grid = u.grid
        grads = [fd_partial(u, i, 1).values for i in range(len(grid.shape))]
        from scipy.interpolate import RegularGridInterpolator

        interps = [RegularGridInterpolator([a.nodes for a in grid.axes], g, method="cubic") for g in grads]

        def gradient(x):
            return np.stack([f(x) for f in interps], axis=-1)

        m = len(grid.shape)
    else:
        gradient = u.gradient
        m = m if m is not None else getattr(u, "m", None)

    def W(y):
        y = np.asarray(y, dtype=float)
        return unit_normal(gradient(y[..., :-1]))

    return AmbientForm(m, W, "omega_u")


def ambient_exterior_derivative(omega: AmbientForm, y, h: float = 1e-4):
    """div W at points y (the coefficient of d omega)."""
    y = np.asarray(y, dtype=float)
    out = 0.0
    for a in range(y.shape[-1]):
        out = out + (omega(_shift(y, a, h))[..., a] - omega(_shift(y, a, -h))[..., a]) / (2 * h)
    return out


def exterior_derivative_residual(omega, grid: BoxGrid):
    """Discrete d omega on a BoxGrid: div W for ambient forms (grid over y), the dtau^dx
    coefficient for chart forms (grid over (x, tau), tau last)."""
    if any(n < 5 for n in grid.shape):
        raise GridTooCoarse("exterior_derivative_residual needs at least 5 nodes per axis")
    pts = grid.points()
    if isinstance(omega, AmbientForm):
        Wv = omega(pts)
        field_ = sum(fd_partial(GridFunction(grid, Wv[..., a]), a, 1).values for a in range(grid.ndim))
    elif isinstance(omega, FormField):
        m = omega.m
        A, B = omega.coeffs(pts[..., :m], pts[..., m])
        field_ = fd_partial(GridFunction(grid, A), m, 1).values
        for j in range(m):
            field_ = field_ - (-1) ** j * fd_partial(GridFunction(grid, B[..., j]), j, 1).values
    else:
        raise TypeError("unsupported form type")
    return {"max": float(np.abs(field_).max()), "l2": float(np.sqrt(np.mean(field_**2))), "field": field_}


# ------------------------------------------------------------------ normal chart


class NormalChart:
    """phi(x, tau) = (x, v(x)) + tau N_v(x) over the graph of an evaluator v."""

    def __init__(self, graph, m: int, T: float | None = None, radii=(7.0, 12.0), T_max: float = T_MAX,
                 focal_samples=(121, 32)):
        self.graph = graph
        self.m = m
        grid = AnnulusGrid(radii[0], radii[1], focal_samples[0], focal_samples[1], min(m, 3))
        pts = _embed(grid.points().reshape(-1, min(m, 3)), m)
        h = self.shape_operator(pts)
        self.max_curvature = float(np.max(np.linalg.norm(h, ord=2, axis=(-2, -1)))) if len(pts) else 0.0
        focal = 1.0 / self.max_curvature if self.max_curvature > 0 else math.inf
        self.focal_radius = focal
        self.T = min(T_max, 0.5 * focal) if T is None else T
        if self.T >= focal:
            raise ProjectionAmbiguous(f"tau range {self.T} exceeds the focal radius {focal}")

    # frame ---------------------------------------------------------
    def frame(self, x):
        x = np.asarray(x, dtype=float)
        p = np.asarray(self.graph.gradient(x), dtype=float)
        H = np.asarray(self.graph.hessian(x), dtype=float)
        w = np.sqrt(1.0 + np.sum(p * p, axis=-1))
        N = unit_normal(p)
        ph = np.einsum("...i,...ij->...j", p, H)
        dN = np.concatenate([-H, np.zeros(H.shape[:-1] + (1,))], axis=-1) / w[..., None, None]
        dN = dN - N[..., None, :] * (ph / (w**2)[..., None])[..., :, None]
        m = x.shape[-1]
        dphi0 = np.concatenate([np.broadcast_to(np.eye(m), x.shape[:-1] + (m, m)), p[..., :, None]], axis=-1)
        return {"p": p, "H": H, "w": w, "N": N, "dN": dN, "dphi0": dphi0}

    def normal(self, x):
        return unit_normal(self.graph.gradient(np.asarray(x, dtype=float)))

    def sqrt_g(self, x):
        p = np.asarray(self.graph.gradient(np.asarray(x, dtype=float)))
        return np.sqrt(1.0 + np.sum(p * p, axis=-1))

    def shape_operator(self, x):
        """h_i^k with dN_i = -h_i^k d_k(phi0): h = D^2v g^(-1) / w."""
        x = np.asarray(x, dtype=float)
        p = np.asarray(self.graph.gradient(x), dtype=float)
        H = np.asarray(self.graph.hessian(x), dtype=float)
        w2 = 1.0 + np.sum(p * p, axis=-1)
        ginv = np.eye(x.shape[-1]) - p[..., :, None] * p[..., None, :] / w2[..., None, None]
        return H @ ginv / np.sqrt(w2)[..., None, None]

    def tangents(self, x, tau, fr=None):
        fr = self.frame(x) if fr is None else fr
        tau = np.asarray(tau, dtype=float)
        return fr["dphi0"] + tau[..., None, None] * fr["dN"]

    def one_minus_det_b(self, x, tau):
        """1 - det(I - tau h), without cancellation."""
        h = self.shape_operator(x)
        e = _elementary_symmetric(h)
        tau = np.asarray(tau, dtype=float)
        return -sum((-tau) ** k * e[k] for k in range(1, h.shape[-1] + 1))

    def phi(self, x, tau):
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        base = np.concatenate([x, np.asarray(self.graph.value(x), dtype=float)[..., None]], axis=-1)
        return base + tau[..., None] * self.normal(x)

    def project(self, y, tol: float = 1e-14, max_iter: int = 50):
        """Closest-point footpoint (x, tau) with y = phi(x, tau); Newton seeded at y_h."""
        y = np.asarray(y, dtype=float)
        yh, yv = y[..., :-1], y[..., -1]
        x = yh.copy()
        m = self.m
        eye = np.eye(m)
        for _ in range(max_iter):
            v = np.asarray(self.graph.value(x), dtype=float)
            p = np.asarray(self.graph.gradient(x), dtype=float)
            H = np.asarray(self.graph.hessian(x), dtype=float)
            F = x - yh - (yv - v)[..., None] * p
            J = eye + p[..., :, None] * p[..., None, :] - (yv - v)[..., None, None] * H
            step = np.linalg.solve(J, -F[..., None])[..., 0]
            # damp long steps: far from the footpoint the graph Hessian can throw x off the patch
            size = np.linalg.norm(step, axis=-1, keepdims=True)
            step = step * np.minimum(1.0, 0.5 / np.maximum(size, 1e-300))
            x = x + step
            if np.all(np.abs(step) <= tol * (1.0 + np.abs(x))):
                break
        else:
            raise ProjectionAmbiguous("closest-point Newton did not converge")
        tau = np.sum((y - self.phi(x, np.zeros(x.shape[:-1]))) * self.normal(x), axis=-1)
        k = np.linalg.norm(self.shape_operator(x), ord=2, axis=(-2, -1))
        if np.any(np.abs(tau) * k >= 1.0):
            raise ProjectionAmbiguous("point beyond the focal radius")
        return x, tau


def _embed(pts, m):
    pts = np.asarray(pts, dtype=float)
    if pts.shape[-1] == m:
        return pts
    return np.concatenate([pts, np.zeros(pts.shape[:-1] + (m - pts.shape[-1],))], axis=-1)


def pullback_ambient(chart: NormalChart, omega: AmbientForm) -> FormField:
    """Chain-rule pullback: A = omega(d_1phi..d_mphi), B_j = omega(N, d phi omit j)."""
    m = chart.m

    def both(x, tau):
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], tau.shape)
        x = np.broadcast_to(x, shape + (m,))
        tau = np.broadcast_to(tau, shape)
        fr = chart.frame(x)
        T = chart.tangents(x, tau, fr)
        W = omega(chart.phi(x, tau))
        A = det_with(W, T)
        B = np.stack([det_with(W, np.concatenate([fr["N"][..., None, :], np.delete(T, j, axis=-2)], axis=-2))
                      for j in range(m)], axis=-1)
        return A, B

    return FormField(m, lambda x, t: both(x, t)[0], lambda x, t: both(x, t)[1], omega.name)


def chart_pullback_volume(chart: NormalChart) -> FormField:
    """phi^# dvol_v = sqrt|g|(x) dx (tau-independent)."""
    return FormField(chart.m, lambda x, t: chart.sqrt_g(x) + 0.0 * np.asarray(t), None, "dvol")


def fit_tau_polynomial(values, taus, degree):
    """Least-squares coefficients c_0..c_degree of values(tau) per row; values shape (..., n_tau)."""
    V = np.vander(np.asarray(taus, dtype=float), degree + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(V, np.moveaxis(np.asarray(values), -1, 0).reshape(len(taus), -1), rcond=None)
    return coef.reshape((degree + 1,) + np.asarray(values).shape[:-1])


def chart_pullback_graph_calibration(chart: NormalChart, u=None, x_probe=None, n_tau: int = 9):
    """phi^# omega_u (u defaults to the chart graph) and a fitted tau-expansion report.

    The report fits A(x, tau)/sqrt|g| = 1 + a_1 tau + a_2 tau^2 + ... per probe point; for a
    minimal graph a_1 = -tr h vanishes.
    """
    u = chart.graph if u is None else u
    form = pullback_ambient(chart, graph_calibration(u, chart.m))
    exact_A = form.A

    def A(x, tau):
        a = exact_A(x, tau)
        tau = np.broadcast_to(np.asarray(tau, dtype=float), np.shape(a))
        return np.where(tau == 0.0, np.broadcast_to(chart.sqrt_g(x), np.shape(a)), a)

    form = FormField(chart.m, A, form.B, "pullback omega_u")
    report = {}
    if x_probe is not None:
        x_probe = np.asarray(x_probe, dtype=float)
        T = min(chart.T, 1.0)
        taus = np.linspace(-T, T, n_tau)
        a_vals, b_vals = form.coeffs(x_probe[..., None, :], taus)
        sg = chart.sqrt_g(x_probe)[..., None]
        coefA = fit_tau_polynomial(a_vals / sg, taus, 4)
        coefB = fit_tau_polynomial(np.linalg.norm(b_vals, axis=-1), taus, 4)
        trh = np.trace(chart.shape_operator(x_probe), axis1=-2, axis2=-1)
        report = {
            "a0_minus_1": float(np.abs(coefA[0] - 1).max()),
            "a1": float(np.abs(coefA[1]).max()),
            "trace_h": float(np.abs(trh).max()),
            "a2": float(np.abs(coefA[2]).max()),
            "B_tau1": float(np.abs(coefB[1]).max()),
            "B_tau2": float(np.abs(coefB[2]).max()),
        }
    return form, report


# ------------------------------------------------------------------ assembly


def _gradient_increment(u, x, d, n: int = 6):
    """grad u(x + d) - grad u(x) = int_0^1 D^2u(x + t d) d dt (no cancellation)."""
    nodes, weights = gauss_legendre(n)
    t = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    out = 0.0
    for ti, wi in zip(t, w):
        out = out + wi * np.einsum("...ij,...j->...i", u.hessian(x + ti * d), d)
    return out


@dataclass
class CalibrationAssembly:
    """Closed m-form near the glued graph built region by region.

    omega = theta2 omega_u1 + theta4 omega_u2 + (1 - theta2 - theta4) dvol_v
            + dtheta2 ^ I(sigma1) + dtheta4 ^ I(sigma2),  sigma_i = omega_ui - dvol_v,
    with theta2 = 1 - theta_8(|x|) and theta4 = theta_10(|x|).
    """

    glued: object
    chart: NormalChart
    n_gl: int = 64
    regions: dict = field(default_factory=dict)

    @property
    def m(self):
        return self.chart.m

    # cutoffs -------------------------------------------------------
    def _active(self, x):
        """(theta, dtheta vector, index 1|2|0) per point."""
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        th2 = 1.0 - shifted_cutoff(r, 8.0)
        th4 = shifted_cutoff(r, 10.0)
        d2 = -smooth_cutoff_derivative(r - 8.0)
        d4 = smooth_cutoff_derivative(r - 10.0)
        inner = r < 9.5
        theta = np.where(inner, th2, th4)
        dth = np.where(inner, d2, d4)
        xh = x / np.where(r > 0, r, 1.0)[..., None]
        return theta, dth[..., None] * xh, inner

    def _u(self, inner):
        return self.glued.u1 if inner else self.glued.u2

    def _split(self, x, tau, fn):
        """Evaluate fn(u, x, tau) with u1 where |x| < 9.5 and u2 elsewhere."""
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], tau.shape)
        x = np.broadcast_to(x, shape + (self.m,))
        tau = np.broadcast_to(tau, shape)
        inner = np.linalg.norm(x, axis=-1) < 9.5
        out = None
        for flag in (True, False):
            mask = inner == flag
            if not np.any(mask):
                continue
            val = fn(self._u(flag), x[mask], tau[mask])
            if out is None:
                out = np.zeros(shape + np.shape(val)[1:])
            out[mask] = val
        return out

    # building blocks -----------------------------------------------
    def normal_gap(self, x, tau):
        """D = N_u(y_h) - N_v(x) for the active graph u (v = u wherever it is used)."""

        def fn(u, xx, tt):
            p = np.asarray(self.chart.graph.gradient(xx), dtype=float)
            w = np.sqrt(1.0 + np.sum(p * p, axis=-1))
            d = -tt[..., None] * p / w[..., None]  # y_h - x
            dq = _gradient_increment(u, xx, d)
            q = np.asarray(u.gradient(xx), dtype=float)
            return normal_difference(q + dq, q, dq)

        return self._split(x, tau, fn)

    def sigma_B(self, x, tau):
        """B_j of sigma = phi^# omega_u - phi^# dvol_v, i.e. omega_D(N, d phi omit j)."""
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], tau.shape)
        x = np.broadcast_to(x, shape + (self.m,))
        tau = np.broadcast_to(tau, shape)
        fr = self.chart.frame(x)
        T = self.chart.tangents(x, tau, fr)
        D = self.normal_gap(x, tau)
        return np.stack([det_with(D, np.concatenate([fr["N"][..., None, :], np.delete(T, j, axis=-2)], axis=-2))
                         for j in range(self.m)], axis=-1)

    def primitive(self, x, tau):
        """M_j = int_0^tau B_j(x, s) ds of the active sigma."""
        return _tau_integral(self.sigma_B, x, tau, self.n_gl)

    def correction(self, x, tau):
        """dtheta ^ I(sigma) = sum_j (-1)^j d_j theta M_j dx (the only contribution is to A)."""
        theta, dth, _ = self._active(x)
        out = np.zeros(np.broadcast_shapes(np.shape(theta), np.shape(tau)))
        mask = np.any(dth != 0, axis=-1) & np.ones(out.shape, dtype=bool)
        if np.any(mask):
            xb = np.broadcast_to(np.asarray(x, dtype=float), out.shape + (self.m,))
            tb = np.broadcast_to(np.asarray(tau, dtype=float), out.shape)
            xs, ts = xb[mask], tb[mask]
            M = np.concatenate([self.primitive(xs[i:i + CHUNK], ts[i:i + CHUNK]) for i in range(0, len(ts), CHUNK)])
            sign = (-1.0) ** np.arange(self.m)
            dthb = np.broadcast_to(dth, out.shape + (self.m,))
            out[mask] = np.sum(sign * dthb[mask] * M, axis=-1)
        return out

    # coefficients ----------------------------------------------------
    def coeffs(self, x, tau):
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], tau.shape)
        x = np.broadcast_to(x, shape + (self.m,))
        tau = np.broadcast_to(tau, shape)
        theta, _, _ = self._active(x)
        fr = self.chart.frame(x)
        T = self.chart.tangents(x, tau, fr)
        D = self.normal_gap(x, tau)
        sg = fr["w"]
        detb = 1.0 - self.chart.one_minus_det_b(x, tau)
        A_u = sg * detb + det_with(D, T)
        A = theta * A_u + (1.0 - theta) * sg + self.correction(x, tau)
        A = np.where(tau == 0.0, sg, A)  # restriction to the graph is dvol_v exactly
        B = np.stack([det_with(D, np.concatenate([fr["N"][..., None, :], np.delete(T, j, axis=-2)], axis=-2))
                      for j in range(self.m)], axis=-1)
        B = theta[..., None] * B
        return A, B

    def form(self) -> FormField:
        return FormField(self.m, lambda x, t: self.coeffs(x, t)[0], lambda x, t: self.coeffs(x, t)[1], "omega")

    # ambient vector and comass ----------------------------------------
    def _pieces(self, x, tau):
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], tau.shape)
        x = np.broadcast_to(x, shape + (self.m,))
        tau = np.broadcast_to(tau, shape)
        theta, _, _ = self._active(x)
        sg = self.chart.sqrt_g(x)
        omdb = self.chart.one_minus_det_b(x, tau)
        detb = 1.0 - omdb
        corr = self.correction(x, tau)
        D = self.normal_gap(x, tau)
        kappa = (1.0 - theta) * omdb / detb + corr / (sg * detb)
        return theta, D, kappa

    def ambient_vector(self, x, tau):
        """W at phi(x, tau): theta (N + D) + (1 - theta + kappa') N."""
        theta, D, kappa = self._pieces(x, tau)
        N = self.chart.normal(np.broadcast_to(np.asarray(x, dtype=float), D.shape[:-1] + (self.m,)))
        return N + theta[..., None] * D + kappa[..., None] * N

    def comass_excess(self, x, tau):
        """|W| - 1 evaluated without cancellation."""
        theta, D, kappa = self._pieces(x, tau)
        d2 = np.sum(D * D, axis=-1)
        s = -theta * (1.0 - theta) * d2 + 2.0 * kappa + kappa**2 - theta * kappa * d2  # |W|^2 - 1
        return s / (np.sqrt(1.0 + s) + 1.0)

    def general_ambient_vector(self, x, tau):
        """W by solving det(W, .) against the chart coefficients (independent path)."""
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], tau.shape)
        x = np.broadcast_to(x, shape + (self.m,))
        tau = np.broadcast_to(tau, shape)
        A, B = self.coeffs(x, tau)
        fr = self.chart.frame(x)
        T = self.chart.tangents(x, tau, fr)
        rows = [wedge_vector(T)]
        for j in range(self.m):
            rows.append(wedge_vector(np.concatenate([fr["N"][..., None, :], np.delete(T, j, axis=-2)], axis=-2)))
        Mx = np.stack(rows, axis=-2)
        rhs = np.concatenate([A[..., None], B], axis=-1)
        return np.linalg.solve(Mx, rhs[..., None])[..., 0]

    def at(self, y):
        """(W, |W| - 1, x, tau) at ambient points y."""
        x, tau = self.chart.project(y)
        return self.ambient_vector(x, tau), self.comass_excess(x, tau), x, tau

    def comass_expansion(self, x_probe, taus=None, degree: int = 4):
        """Fit |W| - 1 = c_1 tau + c_2 tau^2 + ... per probe point; returns (c1, c2) sup norms."""
        x_probe = np.asarray(x_probe, dtype=float)
        T = min(self.chart.T, 1.0)
        taus = np.linspace(-T, T, 17) if taus is None else np.asarray(taus)
        vals = self.comass_excess(x_probe[..., None, :], taus)
        coef = fit_tau_polynomial(vals, taus, degree)
        return {"c0": float(np.abs(coef[0]).max()), "c1": float(np.abs(coef[1]).max()),
                "c2": float(np.abs(coef[2]).max())}


def assemble_calibration(glued, T: float | None = None, n_gl: int = 64) -> CalibrationAssembly:
    """Assemble the closed form on the five annuli of ``glued.regions``."""
    chart = NormalChart(glued, glued.m, T=T, radii=(7.0, 12.0))
    return CalibrationAssembly(glued, chart, n_gl, dict(glued.regions))


def closedness_study(form: FormField, x, tau, hs=(0.02, 0.01, 0.005, 0.0025)):
    """Max |d form| by pointwise central differences at each step h, and the fitted order.

    ``floor`` is the rounding level eps |coeffs| / h_min of the differences; residuals
    below it carry no order information.
    """
    from .numerics import fit_slope

    res = []
    for h in hs:
        C = exterior_derivative(form, h).coeffs(x, tau)
        res.append(float(np.abs(C).max()))
    res = np.array(res)
    ok = res > 0
    order = fit_slope(np.asarray(hs)[ok], res[ok]) if ok.sum() >= 2 else math.inf
    a, b = form.coeffs(x, tau)
    scale = max(float(np.abs(a).max()), float(np.abs(b).max()))
    floor = 64 * np.finfo(float).eps * scale / min(hs)
    return {"h": list(hs), "residual": res.tolist(), "order": order, "floor": floor}
