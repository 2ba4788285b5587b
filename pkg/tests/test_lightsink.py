import numpy as np
import pytest

from diamondxray import connection as con
from diamondxray import geometry as geo
from diamondxray import lightsink as ls
from diamondxray import transport as tr
from diamondxray.algebra import frob, orthogonality_defect
from diamondxray.errors import InconsistentData


def h_gauge(amplitude=0.9, linear=(1.0, 0.4, 0.2, 0.0, 0.0)):
    gen = np.array([[0, 1, 0], [-1, 0, 0], [0, 0, 0.0]])
    return (con.RotationGauge(gen, con.AxisWeighted(amplitude, linear)),
            con.RotationGauge(gen, con.AxisWeighted(-amplitude, linear)))


class TestRho:
    def test_zero_field(self, basis, cfg, opts, rng):
        z = con.zero_connection(basis, 3)
        p = geo.sample_off_axis_point(cfg, rng)
        v = rng.standard_normal(4)
        assert frob(ls.rho_eval(z, p, v, cfg, opts)) < 1e-14

    def test_fixes_lightsink(self, basis, cfg, opts, rng, sink_pair):
        a, _ = sink_pair
        for _ in range(5):
            p = geo.sample_off_axis_point(cfg, rng)
            v = rng.standard_normal(4)
            got = ls.rho_eval(a, p, v, cfg, opts)
            assert frob(got - a.value(p, v)) < 1e-6

    def test_output_is_lightsink(self, basis, cfg, opts, rng, pair):
        a, _ = pair
        for _ in range(5):
            p = geo.sample_off_axis_point(cfg, rng)
            xh = geo.spatial(p) / np.linalg.norm(geo.spatial(p))
            v = np.concatenate([[1.0], -xh]) / np.sqrt(2)
            assert frob(ls.rho_eval(a, p, v, cfg, opts)) < 1e-6

    def test_h_invariance(self, basis, cfg, rng, pair):
        a, _ = pair
        opts = tr.TransportOpts(steps=96)
        phi, _ = h_gauge()
        gauged = con.GaugedConnection(a, phi)
        for _ in range(3):
            p = geo.sample_off_axis_point(cfg, rng)
            v = rng.standard_normal(4)
            lhs = ls.rho_eval(gauged, p, v, cfg, opts)
            rhs = ls.rho_eval(a, p, v, cfg, opts)
            assert frob(lhs - rhs) < 1e-5

    def test_idempotence(self, basis, cfg, pair):
        a, _ = pair
        opts = tr.TransportOpts(steps=128)
        rho = ls.RhoField(a, cfg, opts)
        rho2 = ls.RhoField(rho, cfg, opts)
        r = np.random.default_rng(2)
        for _ in range(2):
            p = geo.sample_off_axis_point(cfg, r)
            v = r.standard_normal(4)
            assert frob(rho2.value(p, v) - rho.value(p, v)) < 1e-5


class TestLightsinkCharacterization:
    def test_sink_field_trivial_transport(self, cfg, sink_pair):
        a, _ = sink_pair
        r = np.random.default_rng(8)
        opts = tr.TransportOpts(steps=64)
        for _ in range(100):
            y = geo.sample_off_axis_point(cfg, r)
            _, z_y = geo.determined_endpoints(y, cfg)
            u = tr.transport_matrix(a, y, z_y, opts)
            assert frob(u - np.eye(3)) < 1e-6

    def test_projection_satisfies_condition(self, cfg, pair):
        # converse direction: trivial sink transports force A(dt) = A(dr)
        a, _ = pair
        opts = tr.TransportOpts(steps=64)
        rho = ls.RhoField(a, cfg, opts)
        r = np.random.default_rng(9)
        for _ in range(10):
            p = geo.sample_off_axis_point(cfg, r)
            xh = geo.spatial(p) / np.linalg.norm(geo.spatial(p))
            e_t = np.array([1.0, 0, 0, 0])
            e_r = np.concatenate([[0.0], xh])
            assert frob(rho.value(p, e_t) - rho.value(p, e_r)) < 1e-5

    def test_curvature_bound_fitted_constant(self, basis, cfg):
        from diamondxray.stability import curvature_sup, worldline_time_sup
        # the projection is bounded by curvature plus the world-line time
        # component with a universal constant (sqrt(2) up to grid slack)
        r = np.random.default_rng(10)
        opts = tr.TransportOpts(steps=64)
        pts = None
        ratios = []
        for _ in range(20):
            a = con.random_connection(r, basis, 3, norm=r.uniform(0.3, 1.2))
            if pts is None:
                from diamondxray.stability import _diamond_grid
                pts = _diamond_grid(13)
            denom = curvature_sup(a, pts) + worldline_time_sup(a, 64)
            y = geo.sample_off_axis_point(cfg, r)
            cols = np.stack([ls.rho_eval(a, y, e, cfg, opts)
                             for e in np.eye(4)])
            ratios.append(ls.one_form_opnorm(cols) / denom)
        assert max(ratios) < 2.0


class TestDelta:
    def test_equal_fields(self, cfg, rng, opts, pair):
        # limited by the finite-difference step on the ray potential
        a, _ = pair
        y = geo.sample_off_axis_point(cfg, rng)
        assert ls.delta_norm(a, a, y, cfg, opts) < 1e-9

    def test_lightsink_pair_reduces_to_difference(self, cfg, rng, opts,
                                                  sink_pair):
        a, b = sink_pair
        y = geo.sample_off_axis_point(cfg, rng)
        got = ls.delta_norm(a, b, y, cfg, opts)
        cols = np.stack([a.value(y, e) - b.value(y, e) for e in np.eye(4)])
        assert abs(got - ls.one_form_opnorm(cols)) < 1e-6

    def test_projection_difference_equality(self, cfg, rng, opts, pair):
        a, b = pair
        for _ in range(3):
            y = geo.sample_off_axis_point(cfg, rng)
            lhs = ls.delta_norm(a, b, y, cfg, opts)
            rhs = ls.rho_difference_norm(a, b, y, cfg, opts)
            assert abs(lhs - rhs) < 1e-5


class TestThetaLaws:
    def test_identity_gauges(self, cfg, rng, opts, pair):
        a, b = pair
        eye = con.ConstantGauge(np.eye(3))
        y = geo.sample_off_axis_point(cfg, rng)
        v = rng.standard_normal(4)
        res = ls.discrepancy_action_check(a, b, eye, eye, y, v, cfg, opts)
        assert max(res) < 1e-9

    def test_closed_form_gauges(self, cfg, rng, opts, pair):
        a, b = pair
        phi, _ = h_gauge(0.8, (1.0, 0.5, 0.0, 0.0, 0.0))
        psi, _ = h_gauge(0.6, (1.0, -0.3, 0.2, 0.0, 0.0))
        y = geo.sample_off_axis_point(cfg, rng)
        v = rng.standard_normal(4)
        res = ls.discrepancy_action_check(a, b, phi, psi, y, v, cfg, opts)
        assert max(res) < 1e-5

    def test_equal_fields_left_action(self, cfg, rng, opts, pair):
        a, _ = pair
        phi, _ = h_gauge(0.5)
        y = geo.sample_off_axis_point(cfg, rng)
        v = rng.standard_normal(4)
        res = ls.discrepancy_action_check(a, a, phi, phi, y, v, cfg, opts)
        assert max(res) < 1e-5


class TestExtension:
    def test_identity_extends_to_identity(self, cfg, rng):
        op = ls.ExtensionOp(epsilon_clamp=cfg.epsilon / 2)
        ext = ls.extend(con.ConstantGauge(np.eye(3)), op, cfg)
        for _ in range(20):
            p = rng.uniform(-1, 1, size=4)
            assert frob(ext.value(p) - np.eye(3)) < 1e-12

    def test_worldline_precondition(self, cfg):
        from diamondxray.algebra import skew_expm
        u = skew_expm(np.array([[0, 0.7, 0], [-0.7, 0, 0], [0, 0, 0.0]]))
        op = ls.ExtensionOp(epsilon_clamp=cfg.epsilon / 2)
        with pytest.raises(ValueError):
            ls.extend(con.ConstantGauge(u), op, cfg)

    def test_radial_gauge_agreement_and_orthogonality(self, cfg, rng):
        phi, _ = h_gauge(0.9, (1.0, 0.3, 0.0, 0.0, 0.0))
        op = ls.ExtensionOp(epsilon_clamp=cfg.epsilon / 2)
        ext = ls.extend(phi, op, cfg)
        for _ in range(50):
            p = rng.uniform(-1, 1, size=4)
            assert orthogonality_defect(ext.value(p)) < 1e-10
        for _ in range(30):
            # inside the clamp radius the extension is exact
            u = rng.standard_normal(3)
            u *= rng.uniform(0, 0.45 * cfg.epsilon) / np.linalg.norm(u)
            t = rng.uniform(-0.8, 0.8)
            p = np.concatenate([[t], u])
            assert frob(ext.value(p) - phi.value(p)) < 1e-10


class TestRecovery:
    def test_already_lightsink_gives_identity(self, cfg, sink_pair):
        a, _ = sink_pair
        opts = tr.TransportOpts(steps=64)
        sa = ls.make_scattering_oracle(a, opts)
        rec = ls.recover_gauge(sa, sa, cfg, opts=opts)
        r = np.random.default_rng(4)
        for _ in range(10):
            q = np.concatenate([[r.uniform(-0.7, 0.7)],
                                r.uniform(-0.5, 0.5)
                                * np.array([cfg.epsilon, 0, 0])])
            assert frob(rec.phi.value(q) - np.eye(3)) < 1e-8

    def test_full_pipeline(self, basis, cfg):
        r = np.random.default_rng(6)
        opts = tr.TransportOpts(steps=96)
        a = con.random_lightsink(r, basis, 3, norm=0.8)
        phi, phi_inv = h_gauge(0.9, (1.0, 0.4, 0.2, 0.0, 0.0))
        b = con.GaugedConnection(a, phi_inv)
        rec = ls.recover_gauge(ls.make_scattering_oracle(a, opts),
                               ls.make_scattering_oracle(b, opts),
                               cfg, opts=opts)
        assert rec.stitch_max < 1e-4
        # held-out scattering agreement by endpoint conjugation
        worst = 0.0
        for _ in range(25):
            path = geo.sample_broken_path(cfg, r)
            s_b = tr.scattering(b, path, opts)
            s_rec = np.linalg.inv(rec.phi.value(path.z)) \
                @ tr.scattering(a, path, opts) @ rec.phi.value(path.x)
            worst = max(worst, float(frob(s_rec - s_b)))
        assert worst < 1e-4
        # pointwise gauge equivalence on the tube, with differentials
        sup = 0.0
        for _ in range(6):
            rad = r.uniform(0.1, 0.9) * cfg.epsilon
            u = r.standard_normal(3)
            u *= rad / np.linalg.norm(u)
            q = np.concatenate([[r.uniform(-0.5, 0.5)], u])
            for e in np.eye(4):
                sup = max(sup, float(frob(
                    con.gauge_act(a, rec.phi, q, e) - b.value(q, e))))
        assert sup < 1e-4

    def test_inconsistent_oracles_detected(self, basis, cfg, sink_pair):
        a, b = sink_pair
        opts = tr.TransportOpts(steps=64)
        # b is not a gauge transform of a, so the two routes disagree
        with pytest.raises(InconsistentData):
            ls.recover_gauge(ls.make_scattering_oracle(a, opts),
                             ls.make_scattering_oracle(b, opts),
                             cfg, opts=opts)


class TestProjectedScattering:
    def test_matches_rho_on_lightsink(self, cfg, sink_pair):
        a, _ = sink_pair
        opts = tr.TransportOpts(steps=64)
        r = np.random.default_rng(12)
        path = geo.sample_broken_path(cfg, r)
        got = ls.lightsink_scattering(a, path, cfg, opts)
        want = tr.scattering(a, path, opts)
        assert frob(got - want) < 1e-6

    def test_gauge_independence(self, basis, cfg):
        r = np.random.default_rng(14)
        opts = tr.TransportOpts(steps=96)
        a = con.random_lightsink(r, basis, 3, norm=0.7)
        phi, phi_inv = h_gauge(0.7, (1.0, 0.2, 0.3, 0.0, 0.0))
        b = con.GaugedConnection(a, phi_inv)
        path = geo.sample_broken_path(cfg, r)
        s_a = ls.lightsink_scattering(a, path, cfg, opts)
        s_b = ls.lightsink_scattering(b, path, cfg, opts)
        assert frob(s_a - s_b) < 1e-6


def test_fit_lightsink_roundtrip(basis, cfg, sink_pair):
    a, _ = sink_pair
    r = np.random.default_rng(15)
    fitted, resid = ls.fit_lightsink(a, basis, 3, cfg, r, n_points=256)
    assert resid < 1e-10
    assert np.max(np.abs(fitted.coeffs - a.coeffs)) < 1e-8
