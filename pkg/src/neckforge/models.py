"""Building blocks: base graphs, catenoid profiles, neck-radius solvers, floating disks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import comb, eval_legendre

from .errors import DomainError, NewtonDiverged, NoSolution, UnsupportedDimension
from .numerics import find_root_bracketed, gauss_legendre_interval, golden_section_max, integrate_singular

# ------------------------------------------------------------------ base model, m = 2
#
# Weierstrass data with phi^2 = 0 forces h(z) = N^2 z^(2N-2), so the horizontal part is
# (conj(z) - 2a z^(2N-1))/2 with a = N^2/(4N-2). Substituting z = kappa*conj(zeta),
# kappa^(N-1) = 1/2, and scaling by 2/kappa (a homothety of the same minimal surface):
#     horizontal position  w = zeta + psi(zeta),   psi(zeta) = -(a/2) conj(zeta)^(2N-1)
#     height               Re(zeta^N)
# The map is a diffeomorphism only while (N^2/4)|zeta|^(2N-2) < 1, i.e. |w| below ~0.65
# for N = 3 and ~0.75 for N = 8; beyond that Newton reports NewtonDiverged.


def base_a(N: int) -> float:
    return N * N / (4.0 * N - 2.0)


def _psi(zeta, N):
    return -(base_a(N) / 2.0) * np.conj(zeta) ** (2 * N - 1)


def _psi_prime(zeta, N):
    # derivative of psi with respect to conj(zeta)
    return -(base_a(N) / 2.0) * (2 * N - 1) * np.conj(zeta) ** (2 * N - 2)


def base2d_invert(w, N: int, tol: float = 1e-13, max_iter: int = 20):
    """Solve w = zeta + psi(zeta) by Newton seeded at zeta = w."""
    if N < 3:
        raise ValueError("N must be >= 3")
    w = np.asarray(w, dtype=complex)
    if np.any(np.abs(w) > 0.9 + 1e-12):
        raise NewtonDiverged("|w| > 0.9 is outside the inversion region")
    zeta = w.copy()
    for _ in range(max_iter):
        F = zeta + _psi(zeta, N) - w
        gp = _psi_prime(zeta, N)
        den = 1.0 - np.abs(gp) ** 2
        if np.any(den <= 0):
            raise NewtonDiverged("Jacobian of w = zeta + psi(zeta) degenerate")
        step = (-F + gp * np.conj(F)) / den
        zeta = zeta + step
        if np.all(np.abs(step) <= tol * np.maximum(np.abs(zeta), 1e-300)):
            break
    else:
        raise NewtonDiverged(f"Newton inversion did not converge in {max_iter} iterations")
    return zeta


def base2d_height(w, N: int):
    """Height u(w) of the m=2 base graph over the horizontal point w (complex)."""
    zeta = base2d_invert(w, N)
    out = np.real(zeta**N)
    return out if out.ndim else float(out)


def base2d_deviation(w, N: int):
    """u(w) - Re(w^N), evaluated without cancellation."""
    zeta = base2d_invert(w, N)
    psi = _psi(zeta, N)
    total = np.zeros_like(zeta)
    for k in range(1, N + 1):
        total = total + comb(N, k, exact=True) * zeta ** (N - k) * psi**k
    out = -np.real(total)
    return out if out.ndim else float(out)


def base2d_gradient(w, N: int):
    """(du/dx1, du/dx2) at w, by implicit differentiation of the inversion."""
    zeta = base2d_invert(w, N)
    gp = _psi_prime(zeta, N)
    den = 1.0 - np.abs(gp) ** 2
    dz_dx = (1.0 - gp) / den
    dz_dy = (1j + 1j * gp) / den
    lead = N * zeta ** (N - 1)
    return np.stack([np.real(lead * dz_dx), np.real(lead * dz_dy)], axis=-1)


def _as_complex(x):
    x = np.asarray(x, dtype=float)
    return x[..., 0] + 1j * x[..., 1]


@dataclass(frozen=True)
class BaseModel2D:
    """Base graph u over the unit disk for the m=2 model (points are real (..., 2) arrays)."""

    N: int

    @property
    def a(self) -> float:
        return base_a(self.N)

    def value(self, x):
        return np.asarray(base2d_height(_as_complex(x), self.N), dtype=float)

    def gradient(self, x):
        return base2d_gradient(_as_complex(x), self.N)

    def deviation(self, x):
        return np.asarray(base2d_deviation(_as_complex(x), self.N), dtype=float)


@dataclass(frozen=True)
class HarmonicBaseHD:
    """Base graphs for m >= 3.

    ``product``: the m=2 base extended constantly along the last m-2 coordinates.
    ``axisymmetric_polynomial`` (m=3): |x|^l P_l(x_3/|x|), l = N, max 1 on the sphere.
    """

    m: int
    mode: str
    N: int

    def __post_init__(self):
        if self.mode not in ("product", "axisymmetric_polynomial"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "axisymmetric_polynomial" and self.m != 3:
            raise UnsupportedDimension("polynomial mode is implemented for m = 3 only")

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if self.mode == "product":
            return np.asarray(base2d_height(_as_complex(x[..., :2]), self.N), dtype=float)
        r = np.linalg.norm(x, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.where(r > 0, x[..., 2] / np.where(r > 0, r, 1.0), 1.0)
        return r**self.N * eval_legendre(self.N, c)

    def gradient(self, x, h: float = 1e-6):
        x = np.asarray(x, dtype=float)
        if self.mode == "product":
            g2 = base2d_gradient(_as_complex(x[..., :2]), self.N)
            return np.concatenate([g2, np.zeros(x.shape[:-1] + (self.m - 2,))], axis=-1)
        out = np.empty_like(x)
        for i in range(self.m):
            e = np.zeros(self.m)
            e[i] = h
            out[..., i] = (self.value(x + e) - self.value(x - e)) / (2 * h)
        return out


def harmonic_base(m: int, mode: str, N: int, x):
    if m == 2:
        return BaseModel2D(N).value(x)
    return HarmonicBaseHD(m, mode, N).value(x)


# ------------------------------------------------------------------ catenoid profiles


def _inner_integral(m, r):
    # c(r) for 1 <= r <= 2 via s = 1 + t^2 (smooth integrand in t)
    r = np.asarray(r, dtype=float)
    k = 2 * (m - 1)
    t, w = gauss_legendre_interval(40, 0.0, np.sqrt(np.maximum(r - 1.0, 0.0)))
    t2 = t * t
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(t > 0, 2.0 * t / np.sqrt(np.expm1(k * np.log1p(t2))), 2.0 / math.sqrt(k))
    return np.sum(w * g, axis=-1)


def _tail(m, eps):
    # integral from r = 1/eps to infinity, written in u = 1/s on [0, eps]
    eps = np.asarray(eps, dtype=float)
    u, w = gauss_legendre_interval(40, 0.0, eps)
    g = u ** (m - 3) / np.sqrt(-np.expm1(2 * (m - 1) * np.log(u)))
    return np.sum(w * g, axis=-1)


@lru_cache(maxsize=None)
def c_infinity(m: int) -> float:
    """lim c(r) for m >= 3.

    In u = 1/s the integrand u^(m-3)/sqrt(1-u^(2(m-1))) has an inverse square-root
    singularity at u = 1; u = 1 - t^2 turns it into a smooth integrand in t, written
    with log1p so that nothing cancels near t = 0.
    """
    if m < 3:
        return math.inf
    k = 2 * (m - 1)

    def g(t):
        return 2.0 * t * (1.0 - t * t) ** (m - 3) / np.sqrt(-np.expm1(k * np.log1p(-t * t)))

    return integrate_singular(g, 0.0, 1.0, tol=1e-14)


def catenoid_profile(m: int, r):
    """c(r): arccosh(r) for m=2, the singular integral for m>2; requires r >= 1."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 1.0):
        raise DomainError("catenoid profile requires r >= 1")
    if m == 2:
        out = np.arccosh(r_arr)
    elif m >= 3:
        out = np.empty_like(r_arr)
        near = r_arr <= 2.0
        out[near] = _inner_integral(m, r_arr[near])
        far = ~near
        out[far] = c_infinity(m) - _tail(m, 1.0 / r_arr[far])
    else:
        raise UnsupportedDimension("m must be >= 2")
    return out if out.ndim else float(out)


def profile_slope(m: int, rho, r):
    """Radial derivative of c_rho at r: rho^(m-1) / sqrt(r^(2(m-1)) - rho^(2(m-1)))."""
    r = np.asarray(r, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if np.any(r <= rho):
        raise DomainError("profile slope requires r > rho")
    q = (rho / r) ** (m - 1)
    out = q / np.sqrt(-np.expm1(2 * np.log(q))) if np.all(q > 0) else q / np.sqrt(1 - q * q)
    return out if np.ndim(out) else float(out)


def profile_second(m: int, rho, r):
    """Second radial derivative of c_rho."""
    r = np.asarray(r, dtype=float)
    q = (rho / r) ** (m - 1)
    return -(m - 1) * q / (r * (1.0 - q * q) ** 1.5)


def floating_disk_radius(m: int) -> float:
    """Circle radius where the unit profile slope equals tan(pi/3)."""
    if m < 2:
        raise ValueError("m must be >= 2")
    return (4.0 / 3.0) ** (1.0 / (2 * (m - 1)))


@dataclass(frozen=True)
class RadialProfile:
    """Scaled generating curve r -> rho * (c(r/rho) - c(start)) for r >= rho*start."""

    m: int
    rho: float
    floating: bool = False

    @property
    def start(self) -> float:
        return floating_disk_radius(self.m) if self.floating else 1.0

    @property
    def shift(self) -> float:
        return catenoid_profile(self.m, self.start) if self.floating else 0.0

    @property
    def inner_radius(self) -> float:
        return self.rho * self.start

    @property
    def c_inf(self) -> float:
        return c_infinity(self.m) - self.shift if self.m >= 3 else math.inf

    def value(self, r):
        r = np.asarray(r, dtype=float)
        return self.rho * (catenoid_profile(self.m, np.maximum(r / self.rho, self.start)) - self.shift)

    def slope(self, r):
        return profile_slope(self.m, self.rho, r)

    def second(self, r):
        return profile_second(self.m, self.rho, r)

    # graph helpers on R^m points
    def graph_value(self, x):
        return self.value(np.linalg.norm(np.asarray(x, dtype=float), axis=-1))

    def graph_gradient(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        return (self.slope(r) / r)[..., None] * x

    def graph_hessian(self, x):
        x = np.asarray(x, dtype=float)
        m = x.shape[-1]
        r = np.linalg.norm(x, axis=-1)
        xh = x / r[..., None]
        d1 = self.slope(r)
        d2 = self.second(r)
        outer = xh[..., :, None] * xh[..., None, :]
        eye = np.eye(m)
        return d2[..., None, None] * outer + (d1 / r)[..., None, None] * (eye - outer)


# ------------------------------------------------------------------ neck solver

_X_MIN_CACHE: list = []


def x_min() -> float:
    """Root of x sinh x = cosh x (minimum of cosh(x)/x)."""
    if not _X_MIN_CACHE:
        _X_MIN_CACHE.append(
            find_root_bracketed(
                lambda x: x * math.sinh(x) - math.cosh(x), 1.0, 2.0, 1e-15, df=lambda x: x * math.cosh(x)
            )
        )
    return _X_MIN_CACHE[0]


def sandwich_g(y):
    return math.log(2 * y) + math.log(math.log(2 * y))


def sandwich_h(y):
    return math.log(2 * y) + math.log(2 * math.log(2 * y))


@dataclass
class NeckSolution:
    rho_small: float
    rho_large: float
    H: float
    R: float
    m: int
    floating: bool = False
    H_max: float = math.nan
    checks: dict = field(default_factory=dict)

    @property
    def selected(self) -> float:
        return self.rho_small

    def profile(self) -> RadialProfile:
        return RadialProfile(self.m, self.rho_small, self.floating)


def _profile_fn(m, floating):
    start = floating_disk_radius(m) if floating else 1.0
    shift = catenoid_profile(m, start) if floating else 0.0
    if m == 2:
        def P(r):
            return math.acosh(max(r, start)) - shift
    else:
        def P(r):
            return float(catenoid_profile(m, max(r, start))) - shift
    return P, start


@lru_cache(maxsize=None)
def _height_maximum(m: int, floating: bool):
    """(s*, max_s s P(1/s)) with s = rho/R; independent of R."""
    P, start = _profile_fn(m, floating)
    hi = math.log(1.0 / start)
    sig, val = golden_section_max(lambda sg: math.exp(sg) * P(math.exp(-sg)), hi - 40.0, hi, tol=1e-15)
    return math.exp(sig), val


def max_height(m: int, R: float, floating: bool = False) -> float:
    if m == 2 and not floating:
        return R / math.sinh(x_min())
    return R * _height_maximum(m, floating)[1]


def _solve_neck_m2(R, H):
    y = R / H
    xm = x_min()
    fmin = math.sinh(xm)
    if y < fmin:
        raise NoSolution(f"H={H} exceeds the maximal height H_max={R / fmin} at R={R}", R / fmin)
    f = lambda x: math.cosh(x) / x - y
    df = lambda x: (x * math.sinh(x) - math.cosh(x)) / (x * x)
    if y == fmin:
        return H / xm, H / xm
    hi = sandwich_h(y) + 1.0 if y > 2 else 10.0
    while f(hi) < 0:
        hi *= 2
    tol = 1e-15
    x_large = find_root_bracketed(f, xm, hi, tol * hi, df=df)
    x_small = find_root_bracketed(f, 0.5 / y, xm, tol * 0.5 / y, df=df)
    return H / x_large, H / x_small


def _solve_neck_generic(m, R, H, floating):
    P, start = _profile_fn(m, floating)
    s_star, g_max = _height_maximum(m, floating)
    if H > R * g_max:
        raise NoSolution(f"H={H} exceeds the maximal height H_max={R * g_max} at R={R}", R * g_max)
    target = math.log(H / R)
    sig_star = math.log(s_star)

    def phi(sg):
        s = math.exp(sg)
        p = P(1.0 / s)
        return (math.log(s * p) if p > 0 else -math.inf) - target

    lo = sig_star - 1.0
    while phi(lo) > 0:
        lo -= 5.0
    sig_small = find_root_bracketed(phi, lo, sig_star, 4e-16 * max(1.0, abs(lo)))
    end = math.log(1.0 / start)
    hi = end - 1e-12
    sig_large = find_root_bracketed(phi, sig_star, hi, 4e-16 * max(1.0, abs(sig_star))) if phi(hi) < 0 else hi
    return R * math.exp(sig_small), R * math.exp(sig_large)


def solve_neck(m: int, R: float, H: float, floating: bool = False, generic: bool = False) -> NeckSolution:
    """Both neck radii with profile height H at radius R; the smaller one is selected."""
    if R <= 0 or H <= 0:
        raise ValueError("R and H must be positive")
    if m == 2 and not floating and not generic:
        rho_s, rho_l = _solve_neck_m2(R, H)
    else:
        rho_s, rho_l = _solve_neck_generic(m, R, H, floating)
    sol = NeckSolution(rho_s, rho_l, H, R, m, floating, max_height(m, R, floating))
    prof = sol.profile()
    sol.checks["height_residual"] = abs(float(prof.value(R)) - H) / H
    if m == 2 and not floating:
        y = R / H
        if y > 1.5:
            xs = H / rho_s
            g, h = sandwich_g(y), sandwich_h(y)
            sol.checks["sandwich"] = math.log(2 * y) <= g <= xs <= h
            sol.checks["rho_chain"] = rho_s <= H / g <= H / math.log(2 * y) <= H
    elif m >= 3:
        cinf = prof.c_inf
        sol.checks["rho_bracket"] = H / cinf <= rho_s <= 2 * H / cinf
    return sol


# ------------------------------------------------------------------ floating disk


@dataclass
class FloatingDiskModel:
    m: int
    rho: float
    r0: float
    profile: RadialProfile
    disk_radius: float
    signs: dict = field(default_factory=lambda: {"disk": +1, "sheet-upper": +1, "sheet-lower": -1})

    def sheet_height(self, r):
        return self.profile.value(r)

    def angles(self):
        """Pairwise angles (disk/upper, upper/lower, lower/disk) at the circle, in the meridian plane."""
        slope = float(self.profile.slope(self.disk_radius))
        up = math.atan(slope)
        dirs = [math.pi, up, -up]  # disk points inward; sheets leave outward
        a = [
            (dirs[0] - dirs[1]) % (2 * math.pi),
            (dirs[1] - dirs[2]) % (2 * math.pi),
            (dirs[2] - dirs[0]) % (2 * math.pi),
        ]
        return tuple(a)


def build_floating_disk(m: int, rho: float) -> FloatingDiskModel:
    if rho <= 0:
        raise ValueError("rho must be positive")
    r0 = floating_disk_radius(m)
    prof = RadialProfile(m, rho, floating=True)
    return FloatingDiskModel(m, rho, r0, prof, rho * r0)
