import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from neckforge.calibration import NormalChart, assemble_calibration, graph_calibration
from neckforge.errors import WidthCollapse
from neckforge.gluing import RadialGraph, catenoid_pair
from neckforge.metric import (
    ConformalFactorField,
    conformal_factor,
    derivative_maxima,
    distance_to_graph,
    fitted_exponents,
    kernel_mass,
    measured_c,
    smoothing_width,
    symmetrize_smooth,
)
from neckforge.models import RadialProfile
from neckforge.numerics import bump


class LinearGraph:
    def __init__(self, a):
        self.a = np.asarray(a, dtype=float)

    def value(self, x):
        return np.asarray(x) @ self.a

    def gradient(self, x):
        return np.broadcast_to(self.a, np.shape(x)).copy()

    def hessian(self, x):
        return np.zeros(np.shape(x) + (len(self.a),))


@pytest.fixture(scope="module")
def step2():
    g = catenoid_pair(2, 1e-3)
    asm = assemble_calibration(g)
    lam = conformal_factor(asm)
    return g, asm, lam


class TestDistance:
    def test_flat(self):
        y = np.array([[8.0, 1.0, 0.7], [9.0, -2.0, -1.3]])
        assert np.array_equal(distance_to_graph(y, LinearGraph([0.0, 0.0])), [0.7, 1.3])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-2, 2), st.floats(-2.5, 2.5))
    def test_linear_normal_line(self, s, d):
        g = LinearGraph([s, 0.0])
        x = np.array([9.0, 0.5])
        n = np.array([-s, 0.0, 1.0]) / math.sqrt(1 + s * s)
        y = np.array([x[0], x[1], s * x[0]]) + d * n
        assert abs(distance_to_graph(y[None], g)[0] - abs(d)) <= 1e-10

    def test_catenoid_chart(self):
        u = RadialGraph(RadialProfile(2, 0.3))
        chart = NormalChart(u, 2)
        rng = np.random.default_rng(0)
        x = rng.uniform(7.5, 8.5, (20, 2))
        tau = rng.uniform(-chart.T, chart.T, 20) * 0.9
        assert np.abs(distance_to_graph(chart.phi(x, tau), u, chart=chart) - np.abs(tau)).max() <= 1e-8


class TestConformalFactor:
    def test_unit_comass_gives_one(self):
        u = RadialGraph(RadialProfile(2, 0.3))
        chart = NormalChart(u, 2)
        lam = conformal_factor(graph_calibration(u, 2), chart)
        rng = np.random.default_rng(1)
        x = rng.uniform(7.5, 11.0, (30, 2))
        y = chart.phi(x, rng.uniform(-3, 3, 30))
        assert np.abs(lam(y) - 1.0).max() <= 1e-15

    def test_on_graph(self, step2):
        g, asm, lam = step2
        rng = np.random.default_rng(2)
        r = rng.uniform(8.0, 11.0, 50)
        x = np.stack([r, np.zeros(50)], axis=-1)
        assert np.abs(lam(asm.chart.phi(x, np.zeros(50))) - 1.0).max() <= 1e-10

    def test_interpolating_zone(self, step2):
        g, asm, lam = step2
        x = np.array([[9.5, 0.0]])
        tau = np.array([2.5])
        comass_root = (1.0 + asm.comass_excess(x, tau)) ** 0.5
        val = lam(asm.chart.phi(x, tau))
        lo, hi = sorted([1.0, float(comass_root[0])])
        assert lo < val[0] < hi

    def test_equality_region(self, step2):
        # comass in lambda^2 delta is exactly 1 for dist < 2
        g, asm, lam = step2
        rng = np.random.default_rng(3)
        x = np.stack([rng.uniform(8.0, 11.0, 40), np.zeros(40)], axis=-1)
        tau = rng.uniform(-1.9, 1.9, 40)
        l = lam(asm.chart.phi(x, tau))
        comass = (1.0 + asm.comass_excess(x, tau)) / l**2
        assert np.abs(comass - 1.0).max() <= 1e-12

    def test_far_is_one(self, step2):
        g, asm, lam = step2
        y = np.array([[9.5, 0.0, 3.2], [9.5, 0.0, -3.1], [5.0, 0.0, 0.1], [11.8, 0.0, 0.0]])
        assert np.array_equal(lam(y), np.ones(4))


class TestSmoothing:
    def test_kernel_unit_mass(self):
        mass, _ = quad(bump, -1, 1, epsabs=1e-14, points=[-0.5, 0.5])
        assert kernel_mass() == pytest.approx(mass, rel=1e-13)

    def test_width(self):
        H, c = 0.1, 0.8
        assert smoothing_width(c * H / 16, H, c) == H
        assert smoothing_width(c * H / 8, H, c) == 0.0

    def test_affine_unchanged(self):
        # lambda depending on x only is even and reproduced exactly by a unit-mass kernel
        lam = ConformalFactorField(lambda y: 0.1 * y[..., 0], 0.2, 2)
        l2 = symmetrize_smooth(lam, 0.2, 1.0)
        y = np.stack([np.linspace(8, 9, 11), np.zeros(11), np.linspace(-0.02, 0.02, 11)], axis=-1)
        assert np.abs(l2(y) - lam(y)).max() <= 1e-14

    def test_kink_oracle(self):
        H, c = 0.1, 1.0
        lam = ConformalFactorField(lambda y: y[..., -1], H, 2)
        l2 = symmetrize_smooth(lam, H, c)
        first, _ = quad(lambda s: abs(s) * bump(s), -1, 1, epsabs=1e-15, points=[-0.5, 0.0, 0.5])
        mass, _ = quad(bump, -1, 1, epsabs=1e-15, points=[-0.5, 0.5])
        val = l2(np.array([[8.0, 0.0, 0.0]]))[0]
        assert val == pytest.approx(1.0 + H * first / mass, abs=1e-13)
        # away from the band lambda_2 is the reflection
        assert l2(np.array([[8.0, 0.0, -0.5]]))[0] == pytest.approx(1.5, abs=1e-15)

    def test_width_collapse(self):
        lam = ConformalFactorField(lambda y: np.zeros(y.shape[:-1]), 0.1, 2)
        with pytest.raises(WidthCollapse):
            symmetrize_smooth(lam, 0.1, 1.0, grid_spacing=0.01)

    def test_exact_symmetry_and_locality(self, step2):
        g, asm, lam = step2
        c = measured_c(g)
        l2 = symmetrize_smooth(lam, g.H, c)
        rng = np.random.default_rng(4)
        x = np.stack([rng.uniform(6.0, 12.0, 60), rng.uniform(-1, 1, 60)], axis=-1)
        t = np.concatenate([rng.uniform(0, c * g.H / 8, 30), rng.uniform(0, 3, 30)])
        up = l2(np.concatenate([x, t[:, None]], axis=-1))
        down = l2(np.concatenate([x, -t[:, None]], axis=-1))
        assert np.array_equal(up, down)
        out = (np.linalg.norm(x, axis=-1) < 7.5) | (np.linalg.norm(x, axis=-1) > 11.5)
        assert np.abs(up[out] - 1.0).max() <= 1e-15
        assert up.min() > 0.9

    def test_band_exponents_m2(self):
        vals, Hs = [], []
        for rho in (1e-3, None):
            if rho is None:
                from neckforge.numerics import find_root_bracketed

                target = Hs[0] / 2
                rho = math.exp(find_root_bracketed(lambda l: RadialProfile(2, math.exp(l)).value(10.0) - target,
                                                   math.log(1e-5), math.log(1e-3), 1e-14))
            g = catenoid_pair(2, rho)
            l2 = symmetrize_smooth(conformal_factor(assemble_calibration(g)), g.H, measured_c(g))
            xs = np.stack([np.linspace(9.2, 9.8, 4), np.zeros(4)], axis=-1)
            _, band = derivative_maxima(l2, xs, measured_c(g), n_outer=3)
            vals.append(band)
            Hs.append(g.H)
        exps = fitted_exponents(vals[0], vals[1], Hs[0], Hs[1])
        # inside the smoothing band the derivatives scale like H^(m-k)
        for k, e in enumerate(exps):
            assert abs(e - (2 - k)) <= 0.2
