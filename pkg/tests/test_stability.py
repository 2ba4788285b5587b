import numpy as np
import pytest

from diamondxray import connection as con
from diamondxray import geometry as geo
from diamondxray import lightsink as ls
from diamondxray import stability as st
from diamondxray import transport as tr
from diamondxray.algebra import frob
from diamondxray.errors import SingularBasis, StepUnderflow

OPTS = tr.TransportOpts(steps=64)
FD = st.FDConfig()


def future_path(cfg, rng):
    y = geo.sample_off_axis_point(cfg, rng)
    x = geo.fiber_sample(y, "FX", cfg, rng)
    _, z_y = geo.determined_endpoints(y, cfg)
    return geo.BrokenPath(x=x, y=y, z=z_y, kind="future_determined")


class TestPathDerivative:
    def test_constant_functional(self, cfg, rng):
        path = future_path(cfg, rng)
        got = st.path_derivative(lambda p: np.eye(3), path, "y_from_x",
                                 FD, cfg)
        assert frob(got) == 0.0

    def test_reads_one_form_at_break(self, cfg, rng, pair):
        # derivative of the leg transform equals the transported one-form
        a, b = pair
        omega = con.DifferenceForm(a, b)
        path = future_path(cfg, rng)

        def func(p):
            return tr.attenuated_xray(a, omega,
                                      tr.Segment(p.x, p.y), OPTS)

        base = geo.BrokenPath(x=path.x, y=path.y, z=path.z, kind="free")
        got = st.path_derivative(func, base, "y_from_x", FD, cfg)
        v = geo.unit_direction(path.x, path.y).v
        want = tr.transport_matrix(a, path.y, path.x, OPTS) \
            @ omega.value(path.y, v)
        assert frob(got - want) < 1e-6

    def test_scattering_derivative_matches_discrepancy(self, cfg, rng,
                                                       pair):
        a, b = pair
        path = future_path(cfg, rng)

        def func(p):
            return np.linalg.solve(tr.scattering(a, p, OPTS),
                                   tr.scattering(b, p, OPTS))

        got = st.path_derivative(func, path, "y_from_x", FD, cfg)
        form = tr.PairPotentialForm(a, b, cfg, OPTS)
        v = geo.unit_direction(path.x, path.y).v
        assert abs(frob(got) - frob(form.value(path.y, v))) < 1e-5

    def test_richardson_scheme(self, cfg, rng, pair):
        a, b = pair
        path = future_path(cfg, rng)

        def func(p):
            return tr.scattering(a, p, OPTS)

        d2 = st.path_derivative(func, path, "y_from_x", FD, cfg)
        d4 = st.path_derivative(func, path, "y_from_x",
                                st.FDConfig(scheme="richardson_4th"), cfg)
        assert frob(d2 - d4) < 1e-6

    def test_step_underflow(self, cfg):
        # an endpoint pinned to the tube boundary leaves no admissible step
        y = geo.event(0.0, 0.5)
        x = geo.event(-0.25 + 1e-9, 0.25 - 1e-9)
        path = geo.BrokenPath(x=x, y=y, z=geo.event(0.5), kind="free")
        with pytest.raises(StepUnderflow):
            st.path_derivative(lambda p: np.eye(3), path, "x_from_y",
                               st.FDConfig(h=1e-3), cfg)

    def test_pseudomho_equality(self, cfg, rng, pair):
        # endpoint data derivative equals the field difference at the
        # endpoint, in norm
        a, b = pair
        for _ in range(5):
            path = future_path(cfg, rng)

            def func(p):
                return tr.scattering(a, p, OPTS) \
                    @ np.linalg.inv(tr.scattering(b, p, OPTS))

            d = st.path_derivative(func, path, "x_from_y", FD, cfg)
            v = geo.unit_direction(path.y, path.x).v
            lhs = frob(a.value(path.x, v) - b.value(path.x, v))
            assert abs(lhs - frob(d)) < 1e-5


class TestLinalgBound:
    def test_standard_basis(self):
        assert st.linalg_bound(list(np.eye(4))) == pytest.approx(2.0)

    def test_construction_frobenius_norm(self):
        for eps in (0.1, 0.25, 0.4):
            got = st.sample_frob_norm(eps)
            want = np.sqrt(8 * eps**2 + 8) / eps
            assert abs(got - want) < 1e-10

    def test_singular(self):
        v = np.array([1.0, 0, 0, 0])
        with pytest.raises(SingularBasis):
            st.linalg_bound([v, v, np.array([0, 1.0, 0, 0]),
                             np.array([0, 0, 1.0, 0])])

    def test_rotated_construction_is_lightlike(self, cfg, rng):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        for v in st.sample_vectors(cfg.epsilon, d):
            assert abs(np.linalg.norm(v) - 1.0) < 1e-12
            assert abs(v[0] ** 2 - v[1:] @ v[1:]) < 1e-12


class TestSampleLemma:
    def test_direction_bound(self, cfg, rng, pair):
        # discrepancy norm bounded by (8/eps) times the worst of the four
        # construction directions
        a, b = pair
        form = tr.PairPotentialForm(a, b, cfg, OPTS)
        for _ in range(5):
            y = geo.sample_off_axis_point(cfg, rng)
            xh = geo.spatial(y) / geo.radius(y)
            vs = st.sample_vectors(cfg.epsilon, xh)
            best = max(frob(form.value(y, v)) for v in vs)
            lhs = ls.delta_norm(a, b, y, cfg, OPTS)
            assert lhs <= 8.0 / cfg.epsilon * best + 1e-5


class TestEstimateIn:
    def test_equal_fields(self, cfg, pair):
        a, _ = pair
        rep = st.estimate_in(a, a, cfg, np.random.default_rng(0),
                             n_x=64, n_y=4, opts=OPTS, fd=FD)
        assert rep.lhs == 0.0 and rep.rhs < 1e-9

    def test_gauge_pair_both_sides_vanish(self, basis, cfg, pair):
        # B = A acted by a gauge that is Id on a neighbourhood of the tube
        a, _ = pair
        gen = np.array([[0, 1, 0], [-1, 0, 0], [0, 0, 0.0]])
        phi = con.RotationGauge(gen, con.TubeRamp(1.0, cfg.epsilon + 0.05,
                                                  0.3))
        b = con.GaugedConnection(a, phi)
        rep = st.estimate_in(a, b, cfg, np.random.default_rng(1),
                             n_x=64, n_y=6, opts=OPTS, fd=FD)
        scale = con.sobolev_norm(a, 0.0)
        assert rep.lhs < 1e-5 * scale
        assert rep.rhs < 1e-5 * scale

    def test_ratio_finite_on_random_pair(self, cfg, pair):
        a, b = pair
        rep = st.estimate_in(a, b, cfg, np.random.default_rng(2),
                             n_x=128, n_y=12, opts=OPTS, fd=FD)
        assert 0 < rep.ratio < 50


class TestEstimateOut:
    def test_equal_fields(self, cfg, pair):
        a, _ = pair
        pw, rep = st.estimate_out(a, a, cfg, np.random.default_rng(3),
                                  n_y=2, n_x_per_y=3, opts=OPTS, fd=FD)
        assert rep.lhs < 1e-9 and rep.rhs < 1e-9

    def test_lightsink_pair_pointwise(self, cfg, sink_pair):
        # for light-sink pairs the potential vanishes and the discrepancy
        # is the plain difference
        a, b = sink_pair
        r = np.random.default_rng(4)
        pw, rep = st.estimate_out(a, b, cfg, r, n_y=3, n_x_per_y=6,
                                  opts=OPTS, fd=FD)
        for row in pw:
            cols = np.stack([a.value(row["y"], e) - b.value(row["y"], e)
                             for e in np.eye(4)])
            assert abs(row["lhs"] - ls.one_form_opnorm(cols)) < 1e-5
            assert row["rhs"] > 0
        fitted = max(r_["lhs"] / r_["rhs"] for r_ in pw)
        assert np.isfinite(fitted)

    def test_four_direction_bound_present(self, cfg, pair):
        a, b = pair
        pw, _ = st.estimate_out(a, b, cfg, np.random.default_rng(5),
                                n_y=2, n_x_per_y=4, opts=OPTS, fd=FD)
        for row in pw:
            assert row["rhs_four"] > 0
            assert row["lhs"] <= row["rhs_four"] + 1e-5


class TestPsiFactor:
    def test_zero_fields(self, basis, cfg):
        z = con.zero_connection(basis, 3)
        assert st.psi_factor(z, z, cfg, grid=7) == pytest.approx(1.0)

    def test_constant_time_field(self, basis, cfg):
        m = np.array([[0, 2, 0], [-2, 0, 0], [0, 0, 0.0]])
        coeffs = np.zeros((4, basis.size, 3, 3))
        coeffs[0, 0] = m / 0.25
        field = con.ConnectionField(3, basis, coeffs)
        z = con.zero_connection(basis, 3)
        got = st.psi_factor(field, z, cfg, grid=7)
        assert got == pytest.approx(1.0)   # zero side wins the min
        got = st.psi_factor(field, field, cfg, grid=7)
        assert got == pytest.approx(1.0 + frob(m), rel=1e-6)

    def test_grid_refinement_stable(self, cfg, pair):
        a, b = pair
        coarse = st.psi_factor(a, b, cfg, grid=17)
        fine = st.psi_factor(a, b, cfg, grid=33)
        assert abs(coarse - fine) / fine < 0.1


class TestH1Estimate:
    def test_equal_fields(self, cfg, pair):
        a, _ = pair
        rep, extra = st.h1_estimate(a, a, cfg, np.random.default_rng(6),
                                    sizes={"n_out": 2, "n_fiber": 4,
                                           "grid": 7},
                                    opts=OPTS, fd=FD)
        assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.ratio == 0.0
        assert extra["forward_bound_holds"]

    def test_perturbation_scaling(self, basis, cfg, sink_pair):
        # ratio stable under scaling the perturbation: both sides are
        # first-order in the difference
        a, _ = sink_pair
        gens = np.zeros((3, basis.size, 3, 3))
        gens[0, 1] = np.array([[0, 1, 0], [-1, 0, 0], [0, 0, 0.0]])
        ratios = []
        for t in (0.05, 0.025):
            b = con.LightSinkField(3, basis, a.coeffs + t * gens)
            rep, _ = st.h1_estimate(a, b, cfg, np.random.default_rng(7),
                                    sizes={"n_out": 6, "n_fiber": 10,
                                           "grid": 7},
                                    opts=OPTS, fd=FD)
            ratios.append(rep.ratio)
        assert ratios[0] == pytest.approx(ratios[1], rel=0.15)


class TestGaugeInvarianceOfReports:
    def test_estimate_in_invariant(self, basis, cfg, pair):
        a, b = pair
        gen1 = np.array([[0, 1, 0], [-1, 0, 0], [0, 0, 0.0]])
        gen2 = np.array([[0, 0, -1], [0, 0, 0.5], [1, -0.5, 0.0]])
        phi = con.RotationGauge(gen1, con.TubeRamp(0.8, cfg.epsilon + 0.05,
                                                   0.3))
        psi = con.RotationGauge(gen2, con.TubeRamp(0.6, cfg.epsilon + 0.05,
                                                   0.25, t_slope=0.2))
        rep = st.estimate_in(a, b, cfg, np.random.default_rng(8),
                             n_x=48, n_y=6, opts=OPTS, fd=FD)
        rep_g = st.estimate_in(con.GaugedConnection(a, phi),
                               con.GaugedConnection(b, psi), cfg,
                               np.random.default_rng(8),
                               n_x=48, n_y=6, opts=OPTS, fd=FD)
        assert abs(rep.lhs - rep_g.lhs) / rep.lhs < 1e-4
        assert abs(rep.rhs - rep_g.rhs) / rep.rhs < 1e-4
