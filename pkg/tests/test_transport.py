import numpy as np
import pytest
import scipy.linalg

from diamondxray import connection as con
from diamondxray import geometry as geo
from diamondxray import transport as tr
from diamondxray.algebra import frob, orthogonality_defect
from diamondxray.errors import NonFiniteState
from diamondxray.verify import CovariantGradientForm, TrigMatrixFunction


def seg(a, b):
    return tr.Segment(np.asarray(a, float), np.asarray(b, float))


def constant_time_field(basis, m):
    coeffs = np.zeros((4, basis.size, 3, 3))
    coeffs[0, 0] = np.asarray(m) / 0.25   # constant mode value is 1/4
    return con.ConnectionField(3, basis, coeffs)


class TestParallelTransport:
    def test_zero_field(self, basis, opts):
        z = con.zero_connection(basis, 3)
        res = tr.parallel_transport(z, seg(geo.event(-0.5),
                                           geo.event(0, 0.5)), opts)
        assert frob(res.u - np.eye(3)) == 0.0
        assert res.drift == 0.0

    def test_constant_field_exponential(self, basis, opts):
        m = 0.9 * np.array([[0, 1, 0], [-1, 0, 0], [0, 0, 0.0]])
        field = constant_time_field(basis, m)
        res = tr.parallel_transport(field, seg(geo.event(-0.5),
                                               geo.event(0, 0.5)), opts)
        assert frob(res.u - scipy.linalg.expm(-0.5 * m)) < 1e-10
        assert np.linalg.det(res.u) == pytest.approx(1.0)

    def test_composition(self, basis, cfg):
        r = np.random.default_rng(3)
        field = con.random_connection(r, basis, 3, norm=1.0)
        a = geo.sample_off_axis_point(cfg, r)
        c = geo.sample_off_axis_point(cfg, r)
        b = a + 0.4 * (c - a)
        o = tr.TransportOpts(steps=512)
        whole = tr.transport_matrix(field, a, c, o)
        split = tr.transport_matrix(field, b, c, o) \
            @ tr.transport_matrix(field, a, b, o)
        assert frob(whole - split) < 1e-9

    def test_drift_fourth_order(self, basis, cfg):
        r = np.random.default_rng(4)
        field = con.random_connection(r, basis, 3, norm=1.5)
        s = seg(geo.sample_off_axis_point(cfg, r),
                geo.sample_off_axis_point(cfg, r))
        d32 = tr.parallel_transport(field, s, tr.TransportOpts(steps=32)).drift
        d64 = tr.parallel_transport(field, s, tr.TransportOpts(steps=64)).drift
        assert d32 / max(d64, 1e-300) > 12.0

    def test_reprojection_kills_drift(self, basis, cfg):
        r = np.random.default_rng(5)
        field = con.random_connection(r, basis, 3, norm=1.5)
        s = seg(geo.sample_off_axis_point(cfg, r),
                geo.sample_off_axis_point(cfg, r))
        res = tr.parallel_transport(field, s,
                                    tr.TransportOpts(steps=64,
                                                     reproject=True))
        assert orthogonality_defect(res.u) < 1e-13

    def test_non_finite_detected(self, basis):
        coeffs = np.zeros((4, basis.size, 3, 3))
        coeffs[0, 0] = np.array([[0, 1, 0], [-1, 0, 0], [0, 0, 0.0]]) * 1e80
        field = con.ConnectionField(3, basis, coeffs)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteState):
                tr.parallel_transport(field, seg(geo.event(-0.9),
                                                 geo.event(0.9)),
                                      tr.TransportOpts(steps=4))


class TestScattering:
    def test_zero_field(self, basis, cfg, rng, opts):
        z = con.zero_connection(basis, 3)
        path = geo.sample_broken_path(cfg, rng)
        assert frob(tr.scattering(z, path, opts) - np.eye(3)) == 0.0

    def test_gauge_invariance(self, basis, cfg, rng, opts, pair):
        a, _ = pair
        path = geo.sample_broken_path(cfg, rng)
        gen = np.array([[0, 0.8, -0.1], [-0.8, 0, 0.5], [0.1, -0.5, 0.0]])
        phi = con.RotationGauge(gen, con.TubeRamp(1.0, cfg.epsilon + 0.01,
                                                  0.3))
        gauged = con.GaugedConnection(a, phi)
        assert frob(tr.scattering(gauged, path, opts)
                    - tr.scattering(a, path, opts)) < 1e-7

    def test_inverse_is_reversed_path(self, basis, cfg, rng, opts, pair):
        a, _ = pair
        path = geo.sample_broken_path(cfg, rng)
        s = tr.scattering(a, path, opts)
        rev = tr.transport_matrix(a, path.y, path.x, opts) \
            @ tr.transport_matrix(a, path.z, path.y, opts)
        assert frob(np.linalg.inv(s) - rev) < 1e-9


class TestAttenuatedXray:
    def test_zero_form(self, basis, cfg, rng, opts, pair):
        a, _ = pair
        z = con.zero_connection(basis, 3)
        s = seg(geo.sample_off_axis_point(cfg, rng),
                geo.sample_off_axis_point(cfg, rng))
        got = tr.attenuated_xray(a, con.DifferenceForm(z, z), s, opts)
        assert frob(got) == 0.0

    def test_fundamental_theorem_flat(self, basis, cfg, rng, opts):
        z = con.zero_connection(basis, 3)
        f = TrigMatrixFunction(rng, 3)
        s = seg(geo.sample_off_axis_point(cfg, rng),
                geo.sample_off_axis_point(cfg, rng))
        got = tr.attenuated_xray(z, CovariantGradientForm(z, f), s, opts)
        assert frob(got - (f.value(s.b) - f.value(s.a))) < 1e-9

    def test_covariant_gradient(self, basis, cfg, rng, opts, pair):
        a, _ = pair
        f = TrigMatrixFunction(rng, 3)
        s = seg(geo.sample_off_axis_point(cfg, rng),
                geo.sample_off_axis_point(cfg, rng))
        got = tr.attenuated_xray(a, CovariantGradientForm(a, f), s, opts)
        p = tr.transport_matrix(a, s.a, s.b, opts)
        want = np.linalg.solve(p, f.value(s.b)) - f.value(s.a)
        assert frob(got - want) < 1e-7


class TestBrokenXray:
    def _collinear_path(self):
        d = np.array([1.0, 0.6, 0.8, 0.0]) / np.sqrt(2)
        x = geo.event(-0.6, 0.05, -0.03, 0.0)
        return geo.BrokenPath(x=x, y=x + 0.5 * d, z=x + 0.9 * d, kind="free")

    def test_zero_form(self, basis, cfg, rng, opts, pair):
        a, _ = pair
        z = con.zero_connection(basis, 3)
        path = geo.sample_broken_path(cfg, rng)
        assert frob(tr.broken_xray(a, con.DifferenceForm(z, z), path,
                                   opts)) == 0.0

    def test_collinear_reduction(self, basis, opts, pair):
        a, b = pair
        path = self._collinear_path()
        omega = con.DifferenceForm(a, b)
        broken = tr.broken_xray(a, omega, path, opts)
        straight = tr.attenuated_xray(a, omega,
                                      seg(path.x, path.z), opts)
        assert frob(broken - straight) < 1e-8

    def test_collinear_reduction_endo(self, basis, opts, pair):
        a, b = pair
        path = self._collinear_path()
        omega = con.DifferenceForm(a, b)
        endo = tr.EndoConnection(a, b)
        broken = tr.broken_xray(endo, omega, path, opts)
        straight = tr.attenuated_xray_endo(endo, omega,
                                           seg(path.x, path.z), opts)
        assert frob(broken - straight) < 1e-8

    def test_broken_covariant_gradient(self, basis, cfg, rng, opts, pair):
        a, _ = pair
        f = TrigMatrixFunction(rng, 3)
        path = geo.sample_broken_path(cfg, rng)
        got = tr.broken_xray(a, CovariantGradientForm(a, f), path, opts)
        want = tr.transport_matrix(a, path.y, path.x, opts) \
            @ tr.transport_matrix(a, path.z, path.y, opts) \
            @ f.value(path.z) - f.value(path.x)
        assert frob(got - want) < 1e-7


class TestEndoTransport:
    def test_conjugation_fixes_identity(self, basis, cfg, rng, opts, pair):
        a, _ = pair
        s = seg(geo.sample_off_axis_point(cfg, rng),
                geo.sample_off_axis_point(cfg, rng))
        endo = tr.endo_transport(tr.EndoConnection(a, a), s, opts)
        assert frob(endo.apply(np.eye(3)) - np.eye(3)) < 1e-12

    def test_zero_second_leg(self, basis, cfg, rng, opts, pair):
        a, _ = pair
        z = con.zero_connection(basis, 3)
        s = seg(geo.sample_off_axis_point(cfg, rng),
                geo.sample_off_axis_point(cfg, rng))
        endo = tr.endo_transport(tr.EndoConnection(a, z), s, opts)
        q = rng.standard_normal((3, 3))
        pa = tr.transport_matrix(a, s.a, s.b, opts)
        assert frob(endo.apply(q) - pa @ q) < 1e-12

    def test_direct_integration_oracle(self, basis, cfg, rng, opts, pair):
        a, b = pair
        s = seg(geo.sample_off_axis_point(cfg, rng),
                geo.sample_off_axis_point(cfg, rng))
        endo = tr.endo_transport(tr.EndoConnection(a, b), s, opts)
        pts, tangent, h = tr.leg_nodes(s.a, s.b, opts.steps)
        eye = np.eye(3)
        big = np.stack([np.kron(av, eye) - np.kron(eye, bv.T)
                        for av, bv in zip(a.along(pts, tangent),
                                          b.along(pts, tangent))])
        u_big = tr._rk4(big, h)
        q = rng.standard_normal((3, 3))
        got = endo.apply(q)
        want = (u_big @ q.reshape(-1)).reshape(3, 3)
        assert frob(got - want) < 1e-8
        assert frob((endo.matrix() @ q.reshape(-1)).reshape(3, 3)
                    - got) < 1e-12


class TestPotential:
    def test_equal_fields(self, cfg, rng, opts, pair):
        a, _ = pair
        y = geo.sample_off_axis_point(cfg, rng)
        assert frob(tr.potential_p(a, a, y, cfg, opts)) < 1e-12

    def test_zero_first_field(self, basis, cfg, rng, opts, pair):
        _, b = pair
        z = con.zero_connection(basis, 3)
        y = geo.sample_off_axis_point(cfg, rng)
        _, z_y = geo.determined_endpoints(y, cfg)
        want = np.eye(3) - tr.transport_matrix(b, y, z_y, opts)
        assert frob(tr.potential_p(z, b, y, cfg, opts) - want) < 1e-12

    def test_integral_oracle(self, cfg, rng, opts, pair):
        a, b = pair
        y = geo.sample_off_axis_point(cfg, rng)
        closed = tr.potential_p(a, b, y, cfg, opts)
        integral = tr.potential_p_integral(a, b, y, cfg, opts)
        assert frob(closed - integral) < 1e-7

    def test_worldline_convention(self, cfg, pair):
        a, b = pair
        assert frob(tr.potential_p(a, b, geo.event(0.3), cfg)) == 0.0


class TestPseudolinearisation:
    def test_equal_fields(self, cfg, rng, opts, pair):
        a, _ = pair
        path = geo.sample_broken_path(cfg, rng)
        assert tr.pseudolin_residual(a, a, path, opts) < 1e-12

    def test_zero_second_field(self, basis, cfg, rng, opts, pair):
        a, _ = pair
        z = con.zero_connection(basis, 3)
        path = geo.sample_broken_path(cfg, rng)
        assert tr.pseudolin_residual(a, z, path, opts) < 1e-6

    def test_random_pair(self, cfg, rng, pair):
        a, b = pair
        path = geo.sample_broken_path(cfg, rng)
        assert tr.pseudolin_residual(a, b, path,
                                     tr.TransportOpts(steps=512)) < 1e-6


class TestTransportDerivative:
    def test_zero_field(self, basis, cfg, rng, opts):
        z = con.zero_connection(basis, 3)
        s = seg(geo.sample_off_axis_point(cfg, rng),
                geo.sample_off_axis_point(cfg, rng))
        got = tr.transport_derivative(z, s, rng.standard_normal(4),
                                      rng.standard_normal(4), opts)
        assert frob(got) < 1e-14

    def test_constant_field_vs_fd(self, basis, opts):
        m = 0.8 * np.array([[0, 0, 1], [0, 0, 0], [-1, 0, 0.0]])
        field = constant_time_field(basis, m)
        s = seg(geo.event(-0.4, 0.1), geo.event(0.3, 0.4, 0.2))
        e_t = np.array([1.0, 0, 0, 0])
        got = tr.transport_derivative(field, s, e_t, e_t, opts)
        ref = tr.transport_derivative_fd(field, s, e_t, e_t, opts)
        assert frob(got - ref) < 1e-6

    def test_random_field_vs_fd(self, cfg, opts, pair):
        a, _ = pair
        r = np.random.default_rng(11)
        s = seg(geo.sample_off_axis_point(cfg, r),
                geo.sample_off_axis_point(cfg, r))
        v1 = 0.5 * r.standard_normal(4)
        v2 = 0.5 * r.standard_normal(4)
        got = tr.transport_derivative(a, s, v1, v2, opts)
        ref = tr.transport_derivative_fd(a, s, v1, v2, opts)
        assert frob(got - ref) < 1e-5


class TestPairPotentialForm:
    def test_sink_ray_alignment(self, cfg, opts, pair):
        a, b = pair
        r = np.random.default_rng(13)
        form = tr.PairPotentialForm(a, b, cfg, opts)
        y = geo.sample_off_axis_point(cfg, r)
        _, z_y = geo.determined_endpoints(y, cfg)
        direction = geo.unit_direction(z_y, y).v
        for s in (0.2, 0.5, 0.8):
            q = z_y + s * (y - z_y)
            assert frob(form.value(q, direction)) < 1e-6

    def test_peeled_reduction(self, cfg, opts, pair):
        a, b = pair
        r = np.random.default_rng(17)
        y = geo.sample_off_axis_point(cfg, r)
        _, z_y = geo.determined_endpoints(y, cfg)
        x = geo.fiber_sample(y, "FX", cfg, r)
        path = geo.BrokenPath(x=x, y=y, z=z_y, kind="future_determined")
        endo = tr.EndoConnection(a, b)
        omega = con.DifferenceForm(a, b)
        form = tr.PairPotentialForm(a, b, cfg, opts)
        lhs = tr.broken_xray(endo, omega, path, opts)
        rhs = tr.attenuated_xray_endo(endo, form, seg(path.x, path.y),
                                      opts) - form.p(path.x)
        assert frob(lhs - rhs) < 1e-6


def test_forward_lipschitz_bound(cfg, pair):
    from diamondxray.stability import sup_field_difference
    a, b = pair
    r = np.random.default_rng(23)
    o = tr.TransportOpts(steps=64)
    sup_field = sup_field_difference(a, b, grid=17)
    bound = 2 * np.sqrt(2) * sup_field + 1e-6
    for _ in range(100):
        path = geo.sample_broken_path(cfg, r)
        diff = frob(tr.scattering(a, path, o) - tr.scattering(b, path, o))
        assert diff <= bound
