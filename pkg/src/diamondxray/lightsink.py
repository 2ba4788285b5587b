"""Light-sink projection of connections, the gauge-invariant pair
discrepancy and its group-action laws, and recovery of a gauge from
determined-path scattering data with an explicit extension operator.

The projection acts by the transport-to-the-sink gauge phi(p) = P_{p<-z_p};
its image satisfies A(dt) = A(dr) and is the canonical representative of
the orbit under gauges that fix the central world line.
"""

from dataclasses import dataclass

import numpy as np

from .algebra import frob, polar_project
from .connection import ConnectionField, GaugeField, GaugedConnection
from .errors import InconsistentData
from .geometry import (BrokenPath, determined_endpoints, radius, spatial,
                       event)
from .transport import (PairPotentialForm, Segment, TransportOpts,
                        scattering, transport_derivative, transport_matrix)


class TransportGauge(GaugeField):
    """phi(p) = transport of `a` along the lightlike ray from z_p to p.

    The differential uses the first-variation formula when the field has
    analytic curvature, central differences otherwise.
    """

    def __init__(self, a, cfg, opts=TransportOpts(), variation=None):
        self.a = a
        self.cfg = cfg
        self.opts = opts
        if variation is None:
            variation = isinstance(a, ConnectionField)
        self.variation = variation

    def value(self, p):
        p = np.asarray(p, dtype=float)
        if radius(p) < self.cfg.r_axis_tol:
            return np.eye(self.a.n)
        _, z_p = determined_endpoints(p, self.cfg)
        return transport_matrix(self.a, z_p, p, self.opts)

    def dvalue(self, p, v):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        if not self.variation or radius(p) < self.cfg.r_axis_tol:
            return super().dvalue(p, v)
        _, z_p = determined_endpoints(p, self.cfg)
        # the sink endpoint moves along the world line at the rate of t + r
        xhat = spatial(p) / radius(p)
        w1 = np.array([v[0] + float(xhat @ spatial(v)), 0.0, 0.0, 0.0])
        return transport_derivative(self.a, Segment(z_p, p), w1, v, self.opts)


def _one_sided_dvalue(gauge, p, v, h, approach_dir=None):
    """Second-order one-sided differential taken on the approach side of
    the ray; the sink map q -> z_q has a conical kink on the axis that a
    centred stencil would straddle."""
    if approach_dir is not None and abs(spatial(v) @ approach_dir) > 1e-14:
        sigma = 1.0 if spatial(v) @ approach_dir > 0 else -1.0
    else:
        sigma = 1.0 if radius(p + h * v) >= radius(p - h * v) else -1.0
    f0 = gauge.value(p)
    f1 = gauge.value(p + sigma * h * v)
    f2 = gauge.value(p + 2.0 * sigma * h * v)
    return sigma * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h)


def rho_eval(a, p, v, cfg, opts=TransportOpts(), approach_dir=None,
             gauge=None):
    """Value of the light-sink projection of `a` at (p, v)."""
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    if gauge is None:
        gauge = TransportGauge(a, cfg, opts)
    if radius(p) < cfg.r_axis_tol:
        # phi = Id on the world line; the action reduces to dphi + A
        return _one_sided_dvalue(gauge, p, v, gauge.h, approach_dir) \
            + a.value(p, v, approach_dir=approach_dir)
    u = gauge.value(p)
    uinv = np.linalg.inv(u)
    return uinv @ gauge.dvalue(p, v) + uinv @ a.value(
        p, v, approach_dir=approach_dir) @ u


class RhoField:
    """Evaluator for the light-sink projection, usable wherever a
    connection evaluator is expected (including nested transports)."""

    def __init__(self, a, cfg, opts=TransportOpts()):
        self.a = a
        self.cfg = cfg
        self.opts = opts
        self.n = a.n
        self.gauge = TransportGauge(a, cfg, opts)

    def value(self, p, v, approach_dir=None):
        return rho_eval(self.a, p, v, self.cfg, self.opts,
                        approach_dir=approach_dir, gauge=self.gauge)

    def along(self, points, tangent, approach_dir=None):
        pts = np.atleast_2d(points)
        return np.stack([self.value(q, tangent, approach_dir=approach_dir)
                         for q in pts])

    def components(self, points, approach_dir=None):
        pts = np.atleast_2d(points)
        return np.stack([self.along(pts, e, approach_dir=approach_dir)
                         for e in np.eye(4)], axis=1)


def one_form_opnorm(columns):
    """Operator norm over Euclidean-unit directions of the linear map
    v -> sum v_mu columns[mu]."""
    cols = np.asarray(columns)
    mat = cols.reshape(4, -1).T
    return float(np.linalg.svd(mat, compute_uv=False)[0])


def delta_eval(a, b, y, v, cfg, opts=TransportOpts()):
    """Pair discrepancy (A - B - d_E p)_y(v) with the ray potential p."""
    return PairPotentialForm(a, b, cfg, opts).value(y, v)


def delta_columns(a, b, y, cfg, opts=TransportOpts()):
    form = PairPotentialForm(a, b, cfg, opts)
    return np.stack([form.value(y, e) for e in np.eye(4)])


def delta_norm(a, b, y, cfg, opts=TransportOpts()):
    """Operator norm of the pair discrepancy at y."""
    return one_form_opnorm(delta_columns(a, b, y, cfg, opts))


def rho_difference_norm(a, b, y, cfg, opts=TransportOpts()):
    """Operator norm of (rho(A) - rho(B))_y."""
    ra = RhoField(a, cfg, opts)
    rb = RhoField(b, cfg, opts)
    cols = np.stack([ra.value(y, e) - rb.value(y, e) for e in np.eye(4)])
    return one_form_opnorm(cols)


def discrepancy_action_check(a, b, phi, psi, y, v, cfg, opts=TransportOpts()):
    """Frobenius residuals of the three action laws of the discrepancy:
    the adjoint swap, the left action and the two-sided action."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    d_ab = delta_eval(a, b, y, v, cfg, opts)
    d_ba = delta_eval(b, a, y, v, cfg, opts)
    r1 = frob(d_ab.T - d_ba)

    a_phi = GaugedConnection(a, phi)
    d_left = delta_eval(a_phi, b, y, v, cfg, opts)
    phinv = np.linalg.inv(phi.value(y))
    r2 = frob(d_left - phinv @ d_ab)

    b_psi = GaugedConnection(b, psi)
    d_both = delta_eval(a_phi, b_psi, y, v, cfg, opts)
    r3 = frob(d_both - phinv @ d_ab @ psi.value(y))
    return float(r1), float(r2), float(r3)


# ---------------------------------------------------------------------------
# extension of tube data and gauge recovery

@dataclass(frozen=True)
class ExtensionOp:
    """Radial clamp + polar projection; values for points outside the clamp
    radius are frozen at the clamp ring, which keeps the extension
    continuous and piecewise smooth."""
    epsilon_clamp: float
    t_margin: float = 1e-9


def clamp_event(p, op):
    p = np.asarray(p, dtype=float)
    xs = spatial(p)
    r = np.linalg.norm(xs)
    if r > op.epsilon_clamp:
        xs = xs * (op.epsilon_clamp / r)
        r = op.epsilon_clamp
    tmax = 1.0 - r - op.t_margin
    t = float(np.clip(p[0], -tmax, tmax))
    return np.concatenate([[t], xs])


class ExtendedGauge(GaugeField):
    def __init__(self, inner, op):
        self.inner = inner
        self.op = op

    def value(self, p):
        return polar_project(self.inner.value(clamp_event(p, self.op)))


def extend(phi_on_tube, op, cfg, check_worldline=True):
    """Extend a tube gauge to the whole diamond. The input must restrict to
    the identity on the central world line."""
    if check_worldline:
        for t in np.linspace(-0.9, 0.9, 7):
            u = phi_on_tube.value(event(t))
            if frob(u - np.eye(u.shape[0])) > 1e-8:
                raise ValueError("tube gauge is not the identity on the "
                                 "world line; extension precondition fails")
    return ExtendedGauge(phi_on_tube, op)


def make_scattering_oracle(field, opts=TransportOpts()):
    return lambda path: scattering(field, path, opts)


def lightsink_scattering(b, path, cfg, opts=TransportOpts()):
    """Scattering of the light-sink projection of `b`, through conjugation
    by the sink transports at the endpoints."""
    gauge = TransportGauge(b, cfg, opts)
    s = scattering(b, path, opts)
    return np.linalg.inv(gauge.value(path.z)) @ s @ gauge.value(path.x)


class _RecoveredTube(GaugeField):
    """Pointwise solve for the sink transport of the hidden connection from
    the two determined-path data routes, blended smoothly where both are
    available."""

    def __init__(self, sa, sb, cfg, op, margin=1e-3):
        self.sa = sa
        self.sb = sb
        self.cfg = cfg
        self.op = op
        self.margin = margin
        self._stitch = []

    def _qhat(self, q):
        xs = spatial(q)
        r = np.linalg.norm(xs)
        if r < 1e-12:
            return np.array([1.0, 0.0, 0.0]), 0.0
        return xs / r, r

    def _future_value(self, q, qhat, r):
        # witness break point above q, outside the tube, inside the diamond
        t = q[0]
        s_lo = self.cfg.epsilon + self.margin - r
        s_hi = 0.5 * (1.0 - self.margin - t - r)
        s = 0.5 * (s_lo + s_hi)
        y = q + s * np.concatenate([[1.0], qhat])
        _, z_y = determined_endpoints(y, self.cfg)
        path = BrokenPath(x=q, y=y, z=z_y, kind="future_determined")
        return np.linalg.solve(self.sa(path), self.sb(path))

    def _past_value(self, q, qhat, r):
        t = q[0]
        s_lo = self.cfg.epsilon + self.margin - r
        s_hi = 0.5 * (1.0 - self.margin + t - r)
        s = 0.5 * (s_lo + s_hi)
        y = q - s * np.concatenate([[1.0], qhat])
        x_y, _ = determined_endpoints(y, self.cfg)
        path = BrokenPath(x=x_y, y=y, z=q, kind="past_determined")
        return self.sa(path) @ np.linalg.inv(self.sb(path))

    def windows(self, q):
        qhat, r = self._qhat(q)
        t_plus = 1.0 - 2.0 * self.cfg.epsilon + r - 3.0 * self.margin
        t_minus = -t_plus
        return qhat, r, t_minus, t_plus

    def value(self, q):
        q = clamp_event(np.asarray(q, dtype=float), self.op)
        qhat, r, t_minus, t_plus = self.windows(q)
        t = q[0]
        if t <= t_minus:
            val = self._future_value(q, qhat, r)
        elif t >= t_plus:
            val = self._past_value(q, qhat, r)
        else:
            w = 0.5 * (1.0 + np.cos(np.pi * (t - t_minus)
                                    / (t_plus - t_minus)))
            fut = self._future_value(q, qhat, r)
            pst = self._past_value(q, qhat, r)
            self._stitch.append(float(frob(fut - pst)))
            val = w * fut + (1.0 - w) * pst
        return polar_project(val)


@dataclass
class RecoveredGauge:
    phi: GaugeField
    stitch_max: float
    stitch_samples: int


def recover_gauge(sa, sb, cfg, op=None, opts=TransportOpts(),
                  stitch_tol=1e-4, n_stitch_checks=24, rng=None):
    """Gauge recovery pipeline: determine the hidden sink transport on the
    tube from the two scattering oracles, stitch the two determined-path
    routes, and extend to the diamond by radial clamping.

    `sa` answers with the scattering of the light-sink target, `sb` with
    that of the observed connection; both take determined BrokenPaths.
    """
    if op is None:
        # exactness on (essentially) the whole tube is needed for the
        # recovered gauge to reproduce held-out data at the endpoints
        op = ExtensionOp(epsilon_clamp=cfg.epsilon * (1.0 - 1e-6))
    tube = _RecoveredTube(sa, sb, cfg, op)
    if rng is None:
        rng = np.random.default_rng(0)
    disagreements = []
    for _ in range(n_stitch_checks):
        r = cfg.epsilon * rng.uniform() ** (1.0 / 3.0) * 0.98
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        q = np.concatenate([[0.0], r * u])
        qhat, rr, t_minus, t_plus = tube.windows(q)
        q[0] = rng.uniform(max(t_minus, -0.5), min(t_plus, 0.5))
        fut = tube._future_value(q, qhat, rr)
        pst = tube._past_value(q, qhat, rr)
        disagreements.append(float(frob(fut - pst)))
    worst = max(disagreements) if disagreements else 0.0
    if worst > stitch_tol:
        raise InconsistentData(
            f"determined-path routes disagree on the tube overlap: "
            f"{worst:.3e} > {stitch_tol:.1e}")
    return RecoveredGauge(phi=tube, stitch_max=worst,
                          stitch_samples=len(disagreements))


def fit_lightsink(evaluator, spec, n, cfg, rng, n_points=512,
                  r_min=0.05):
    """Best-L2 re-expansion of a light-sink evaluator in the basis: least
    squares on the three spatial components over interior sample points.
    Returns the fitted field and the rms fit residual."""
    from .connection import LightSinkField
    from .geometry import sample_off_axis_point

    pts = np.stack([sample_off_axis_point(cfg, rng, r_min=r_min)
                    for _ in range(n_points)])
    design = spec.eval(pts)
    targets = np.stack([[evaluator.value(p, e)
                         for e in np.eye(4)[1:]] for p in pts])
    flat = targets.reshape(n_points, -1)
    sol, *_ = np.linalg.lstsq(design, flat, rcond=None)
    coeffs = sol.reshape(spec.size, 3, n, n).transpose(1, 0, 2, 3)
    resid = np.sqrt(np.mean((design @ sol - flat) ** 2))
    return LightSinkField(n, spec, coeffs), float(resid)
