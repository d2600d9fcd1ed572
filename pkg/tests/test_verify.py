import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neckforge.assembly import ConstructionConfig, assemble_limit, iterate
from neckforge.calibration import assemble_calibration
from neckforge.errors import InsufficientStages, ScaleUnresolved, SupportUnresolved
from neckforge.gluing import RadialGraph, catenoid_pair_for_delta
from neckforge.mesh import sector_mesh
from neckforge.metric import ConformalFactorField, conformal_factor, unit_factor
from neckforge.models import RadialProfile
from neckforge.numerics import BoxGrid, GridFunction, bump
from neckforge.verify import (
    Check,
    DoublePlane,
    VectorField,
    VerificationReport,
    WeightedMesh,
    calibration_certificate,
    convergence_study,
    density_ratio,
    field_battery,
    minimal_residual,
    neck_census,
    predicted_exponent,
    weighted_first_variation,
)


def _sample(f, bounds, n):
    g = BoxGrid.from_bounds(bounds, [n, n])
    pts = g.points().reshape(-1, 2)
    return GridFunction(g, np.asarray(f(pts)).reshape(g.shape))


@pytest.fixture(scope="module")
def pair():
    return catenoid_pair_for_delta(2, 0.05)


@pytest.fixture(scope="module")
def t1():
    return iterate(ConstructionConfig(m=3, N=8, p=2, k_max=3))


class TestMinimalResidual:
    def test_affine_exact(self):
        u = _sample(lambda p: 0.3 * p[:, 0] - 0.2 * p[:, 1] + 1.0, [(0, 1), (0, 1)], 21)
        assert np.nanmax(np.abs(minimal_residual(u))) < 1e-12

    def test_catenoid_second_order(self):
        cat = RadialGraph(RadialProfile(2, 1.0))
        res = [np.nanmax(np.abs(minimal_residual(_sample(cat.value, [(2, 4), (2, 4)], n))[2:-2, 2:-2]))
               for n in (41, 81)]
        assert math.log2(res[0] / res[1]) > 1.7

    def test_scherk(self):
        # z = log(cos y / cos x) is minimal
        f = lambda p: np.log(np.cos(p[:, 1]) / np.cos(p[:, 0]))  # noqa: E731
        res = minimal_residual(_sample(f, [(-0.5, 0.5), (-0.5, 0.5)], 81))
        assert np.nanmax(np.abs(res[2:-2, 2:-2])) < 1e-3

    def test_blend_band_not_minimal(self, pair):
        # the glued graph is minimal away from the band and not inside it
        band = np.nanmax(np.abs(minimal_residual(_sample(pair.value, [(9.2, 9.8), (-0.3, 0.3)], 81))))
        away = np.nanmax(np.abs(minimal_residual(_sample(pair.value, [(6, 7), (-0.5, 0.5)], 81))))
        assert band > 1e-2 and away < 1e-6

    def test_region_mask(self):
        u = _sample(lambda p: p[:, 0] ** 2, [(0, 1), (0, 1)], 11)
        res = minimal_residual(u, lambda x, y: x < 0.5)
        assert np.isnan(res[-1]).all() and np.isfinite(res[0]).all()


class TestReport:
    def _report(self, order):
        rep = VerificationReport()
        for name in order:
            rep.add(Check(name, 1e-9, 1e-8, 1e-8, True, grid={"n": 3}, order=np.float64(2.0)))
        return rep

    def test_json_sorted_and_deterministic(self):
        a = self._report(["b.x", "a.y"]).to_json()
        b = self._report(["a.y", "b.x"]).to_json()
        assert a == b
        d = json.loads(a)
        assert [c["name"] for c in d["checks"]] == ["a.y", "b.x"]
        assert d["all_pass"] is True and d["checks"][0]["pass"] is True

    def test_failures(self):
        rep = self._report(["a"])
        rep.add(Check("z", math.inf, 1.0, 1.0, False))
        assert not rep.passed and rep.failures() == ["z"]
        assert json.loads(rep.to_json())["checks"][1]["value"] == "inf"
        assert rep["z"].bound == 1.0


class TestFirstVariation:
    def _setup(self, h=0.2):
        prof = RadialProfile(2, 0.3)
        mesh = sector_mesh(RadialGraph(prof), 6.0, 12.5, h, both_sheets=False)
        y0 = np.array([9.5, 0.0, float(prof.value(9.5))])
        lam = ConformalFactorField(lambda y: 0.05 * bump(np.linalg.norm(y - y0, axis=-1) / 3.0), 1.0, 2)
        return mesh, lam, y0

    def test_translation_of_flat_unit(self):
        # flat sheet, lambda = 1: translations tangent to the plane do not change area
        class Flat:
            def value(self, xy):
                return np.zeros(len(xy))

        mesh = sector_mesh(Flat(), 6.0, 12.5, 0.2, both_sheets=False)
        wm = WeightedMesh.build(mesh, unit_factor(2), 2)
        X = VectorField("translation", np.array([0.0, 0.0, 1.0]), np.array([9.5, 0.0, 0.0]), 2.0)
        assert abs(weighted_first_variation(wm, X)[1]) < 1e-14

    def test_support_errors(self):
        mesh, lam, y0 = self._setup()
        wm = WeightedMesh.build(mesh, lam, 2)
        with pytest.raises(SupportUnresolved, match="vanishes"):
            weighted_first_variation(wm, VectorField("translation", np.zeros(3), y0, 2.0))
        with pytest.raises(SupportUnresolved, match="boundary"):
            weighted_first_variation(wm, VectorField("translation", np.ones(3), y0, 50.0))
        with pytest.raises(SupportUnresolved, match="vertices"):
            weighted_first_variation(wm, VectorField("translation", np.ones(3), y0, 0.6))

    def test_battery(self):
        b = field_battery(np.zeros(3), seed=3)
        assert len(b) == 12 and [f.kind for f in b[:7]] == ["translation"] * 3 + ["rotation"] * 3 + ["radial"]
        again = field_battery(np.zeros(3), seed=3)
        assert all(np.array_equal(f.param, g.param) for f, g in zip(b, again))

    def test_jacobian_matches_fd(self):
        X = VectorField("rotation", np.array([0.2, -0.5, 0.7]), np.zeros(3), 2.0)
        y = np.array([[0.3, -0.4, 0.5]])
        _, J = X.value_and_jacobian(y)
        h = 1e-6
        fd = np.stack([(X(y + h * e) - X(y - h * e))[0] / (2 * h) for e in np.eye(3)], axis=-1)
        assert np.allclose(J[0], fd, atol=1e-7)

    def test_constructed_lambda_small(self, pair):
        from neckforge.metric import measured_c, symmetrize_smooth
        from neckforge.verify import first_variation_study

        lam = symmetrize_smooth(conformal_factor(assemble_calibration(pair)), pair.H, measured_c(pair))
        res = first_variation_study(pair, lam, hs=(0.04, 0.02))
        assert res["max"][0] <= 1e-3 and res["order"] >= 0.9


@settings(max_examples=15, deadline=None)
@given(st.floats(-3.0, 3.0).filter(lambda a: abs(a) > 1e-3), st.integers(0, 11))
def test_first_variation_linear_in_field(a, i):
    mesh = sector_mesh(RadialGraph(RadialProfile(2, 0.3)), 6.0, 12.5, 0.1, both_sheets=False)
    y0 = np.array([9.5, 0.0, float(RadialProfile(2, 0.3).value(9.5))])
    lam = ConformalFactorField(lambda y: 0.05 * bump(np.linalg.norm(y - y0, axis=-1) / 3.0), 1.0, 2)
    wm = WeightedMesh.build(mesh, lam, 2)
    X = field_battery(y0)[i]
    aX = VectorField(X.kind, X.param, X.center, X.scale, a)
    r1 = weighted_first_variation(wm, X)
    r2 = weighted_first_variation(wm, aX)
    # the derivative is a cancelling sum of terms of size ~norm, so rounding scales with norm
    assert r2[1] == pytest.approx(a * r1[1], rel=1e-10, abs=1e-12 * r2[2])
    # the normalized value is invariant under scaling up to sign
    assert r2[0] == pytest.approx(math.copysign(1, a) * r1[0], rel=1e-10, abs=1e-12)


class TestDensity:
    def test_double_plane(self):
        assert density_ratio(DoublePlane(), 1.0)[0] == 2.0

    def test_base_small_ball(self, t1):
        ratio, det = density_ratio(assemble_limit(t1), 0.1)
        assert abs(ratio - 2) < 1e-5 and det["patch_uncertainty"] == 0

    def test_monotone_in_radius(self, t1):
        cx = assemble_limit(t1)
        vals = [density_ratio(cx, r)[0] for r in (0.05, 0.1, 0.3, 0.5)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_unconstructed_scales(self, t1):
        with pytest.raises(ScaleUnresolved):
            density_ratio(assemble_limit(t1), 1e-3)

    def test_census(self, t1):
        cfg = t1.config
        # r0 + 12 r per stage: 0.01855, 0.00854, 0.00409
        assert neck_census(cfg, 0.1) == 3
        assert neck_census(cfg, 0.01) == 2
        assert neck_census(cfg, 0.005) == 1
        assert neck_census(cfg, 0.004) == 0


class TestConvergence:
    def test_exact(self):
        out = convergence_study([0.0] * 5, [2.0**-k for k in range(5)], 0, 0.0, 3, 8, 2)
        assert out["status"] == "converged exactly"

    def test_insufficient(self):
        with pytest.raises(InsufficientStages):
            convergence_study([1.0, 0.5, 0.2], [1, 0.5, 0.25], 0, 0.0)

    def test_power_law_recovered(self):
        r0 = 2.0 ** -np.arange(6, 12)
        out = convergence_study(r0**7.0, r0, 0, 0.0, 3, 8, 2)
        assert out["fitted"] == pytest.approx(7.0, abs=1e-9)
        assert out["predicted"] == predicted_exponent(3, 8, 2, 0, 0.0) == 18

    def test_predicted_exponent_interpolates(self):
        assert predicted_exponent(3, 8, 2, 1, 0.5) == pytest.approx(0.5 * 10 + 0.5 * 2)


@pytest.mark.parametrize("m", [2, 3])
def test_calibration_certificate(m):
    asm = assemble_calibration(catenoid_pair_for_delta(m, 0.05))
    rep = calibration_certificate(asm, conformal_factor(asm))
    assert rep.passed, rep.failures()
    assert rep["calibration.closed"].order >= 1.8


def test_certificate_detects_wrong_metric():
    # with lambda = 1 the assembled form has comass > 1 in the blend band
    asm = assemble_calibration(catenoid_pair_for_delta(2, 0.05))
    rep = calibration_certificate(asm, unit_factor(2))
    assert rep.failures() == ["calibration.comass_lambda"]
