"""Matrix-ODE engine along straight legs: parallel transport, scattering
data, attenuated and broken transforms, the endomorphism connection, the
ray potential and the pseudolinearisation residual.

All integrations use classical fixed-step RK4 on the affine parameter of a
leg; nodes at half steps serve the RK4 stages, so a transform and the
transport it divides by share exactly the same grid.
"""

from dataclasses import dataclass

import numpy as np

from .algebra import frob, orthogonality_defect, polar_project
from .connection import DifferenceForm, curvature_batch
from .errors import DegenerateSegment, NonFiniteState
from .geometry import determined_endpoints, radius, spatial


@dataclass(frozen=True)
class TransportOpts:
    steps: int = 256
    reproject: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class Segment:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if np.linalg.norm(np.asarray(self.b) - np.asarray(self.a)) < 1e-12:
            raise DegenerateSegment("coincident segment endpoints")


@dataclass
class TransportResult:
    u: np.ndarray
    drift: float
    steps: int


@dataclass(frozen=True)
class EndoConnection:
    """Acts on matrices by Q -> A(v) Q - Q B(v)."""
    a: object
    b: object


def leg_nodes(a, b, steps):
    """Nodes of a leg including RK4 midpoints: (2*steps+1, 4) points, the
    constant tangent b - a, and the parameter step 1/steps."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u = np.linspace(0.0, 1.0, 2 * steps + 1)
    return a[None, :] + u[:, None] * (b - a)[None, :], b - a, 1.0 / steps


def leg_approach_dir(a, b, r_axis_tol=1e-9):
    """Spatial limit direction for on-axis nodes of the leg: the outward
    direction seen along the ray, taken from the off-axis endpoint."""
    ra, rb = radius(a), radius(b)
    if max(ra, rb) < r_axis_tol:
        return None
    pick = a if ra >= rb else b
    s = spatial(np.asarray(pick, dtype=float))
    return s / np.linalg.norm(s)


def _rk4(lvals, h, rvals=None, wvals=None, u0=None, reproject=False,
         keep_path=False):
    """Integrate u' = -L u + u R - W over the shared node grid.

    lvals/rvals/wvals have shape (..., 2S+1, n, n); u0 defaults to Id.
    Returns the final state, or all states at whole-step nodes when
    keep_path is set.
    """
    nsteps = (lvals.shape[-3] - 1) // 2
    n = lvals.shape[-1]
    batch = lvals.shape[:-3]
    if u0 is None:
        u = np.broadcast_to(np.eye(n), batch + (n, n)).copy()
    else:
        u = np.broadcast_to(np.asarray(u0, dtype=float),
                            batch + (n, n)).copy()

    def rhs(idx, val):
        out = -(lvals[..., idx, :, :] @ val)
        if rvals is not None:
            out += val @ rvals[..., idx, :, :]
        if wvals is not None:
            out -= wvals[..., idx, :, :]
        return out

    if keep_path:
        path = np.empty(batch + (nsteps + 1, n, n))
        path[..., 0, :, :] = u
    for i in range(nsteps):
        i0, im, i1 = 2 * i, 2 * i + 1, 2 * i + 2
        k1 = rhs(i0, u)
        k2 = rhs(im, u + 0.5 * h * k1)
        k3 = rhs(im, u + 0.5 * h * k2)
        k4 = rhs(i1, u + h * k3)
        u = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if reproject:
            u = polar_project(u)
        if keep_path:
            path[..., i + 1, :, :] = u
    out = path if keep_path else u
    if not np.all(np.isfinite(out)):
        raise NonFiniteState("transport state became non-finite")
    return out


def _leg_action(conn, seg, steps):
    pts, tangent, h = leg_nodes(seg.a, seg.b, steps)
    ad = leg_approach_dir(seg.a, seg.b)
    return conn.along(pts, tangent, approach_dir=ad), pts, tangent, h, ad


def parallel_transport(conn, seg, opts=TransportOpts()):
    """Transport from seg.a to seg.b; returns the group element with its
    recorded orthogonality drift."""
    lvals, _, _, h, _ = _leg_action(conn, seg, opts.steps)
    u = _rk4(lvals, h, reproject=opts.reproject)
    return TransportResult(u=u, drift=float(orthogonality_defect(u)),
                           steps=opts.steps)


def transport_matrix(conn, a, b, opts=TransportOpts()):
    return parallel_transport(conn, Segment(np.asarray(a, float),
                                            np.asarray(b, float)), opts).u


def transport_path(conn, seg, opts=TransportOpts()):
    """Transports from seg.a to every whole-step node, shape (S+1, n, n)."""
    lvals, _, _, h, _ = _leg_action(conn, seg, opts.steps)
    return _rk4(lvals, h, keep_path=True, reproject=opts.reproject)


def scattering(conn, path, opts=TransportOpts()):
    """Broken transform S_{z<-y<-x} = P_{z<-y} P_{y<-x}."""
    p_yx = transport_matrix(conn, path.x, path.y, opts)
    p_zy = transport_matrix(conn, path.y, path.z, opts)
    return p_zy @ p_yx


def scattering_result(conn, path, opts=TransportOpts()):
    r1 = parallel_transport(conn, Segment(np.asarray(path.x, float),
                                          np.asarray(path.y, float)), opts)
    r2 = parallel_transport(conn, Segment(np.asarray(path.y, float),
                                          np.asarray(path.z, float)), opts)
    return TransportResult(u=r2.u @ r1.u, drift=r1.drift + r2.drift,
                           steps=opts.steps)


def solve_inhomogeneous(conn, omega, seg, u0, opts=TransportOpts()):
    """Final state of u' + A(gdot) u = -omega(gdot), u(0) = u0."""
    lvals, pts, tangent, h, ad = _leg_action(conn, seg, opts.steps)
    wvals = omega.along(pts, tangent, approach_dir=ad)
    return _rk4(lvals, h, wvals=wvals, u0=u0)


def attenuated_xray(conn, omega, seg, opts=TransportOpts()):
    """Attenuated transform of the one-form along the leg, recovered from
    the inhomogeneous solution as -P^-1 u(T)."""
    lvals, pts, tangent, h, ad = _leg_action(conn, seg, opts.steps)
    wvals = omega.along(pts, tangent, approach_dir=ad)
    n = lvals.shape[-1]
    p = _rk4(lvals, h)
    u_t = _rk4(lvals, h, wvals=wvals, u0=np.zeros((n, n)))
    return -np.linalg.solve(p, u_t)


def endo_transport(endo, seg, opts=TransportOpts()):
    """Endomorphism transport assembled from the two scalar-leg transports;
    never integrates the n^2-dimensional system."""
    pa = parallel_transport(endo.a, seg, opts)
    pb = parallel_transport(endo.b, seg, opts)
    return EndoTransport(pa=pa.u, pb=pb.u, drift=pa.drift + pb.drift,
                         steps=opts.steps)


@dataclass
class EndoTransport:
    pa: np.ndarray
    pb: np.ndarray
    drift: float
    steps: int

    def apply(self, q):
        return self.pa @ np.linalg.solve(self.pb.T, q.T).T

    def apply_inverse(self, q):
        return np.linalg.solve(self.pa, q) @ self.pb

    def matrix(self):
        """Dense n^2 x n^2 operator on row-major flattened matrices, for
        cross-checks only."""
        return np.kron(self.pa, np.linalg.inv(self.pb).T)


def attenuated_xray_endo(endo, omega, seg, opts=TransportOpts()):
    """Attenuated transform with respect to E(A,B) of a matrix one-form."""
    la, pts, tangent, h, ad = _leg_action(endo.a, seg, opts.steps)
    lb = endo.b.along(pts, tangent, approach_dir=ad)
    wvals = omega.along(pts, tangent, approach_dir=ad)
    n = la.shape[-1]
    u_t = _rk4(la, h, rvals=lb, wvals=wvals, u0=np.zeros((n, n)))
    pa = _rk4(la, h)
    pb = _rk4(lb, h)
    return -np.linalg.solve(pa, u_t) @ pb


def broken_xray(conn, omega, path, opts=TransportOpts()):
    """Broken attenuated transform I_{y<-x} + P_{x<-y} I_{z<-y}."""
    seg1 = Segment(np.asarray(path.x, float), np.asarray(path.y, float))
    seg2 = Segment(np.asarray(path.y, float), np.asarray(path.z, float))
    back = Segment(seg1.b, seg1.a)
    if isinstance(conn, EndoConnection):
        i1 = attenuated_xray_endo(conn, omega, seg1, opts)
        i2 = attenuated_xray_endo(conn, omega, seg2, opts)
        return i1 + endo_transport(conn, back, opts).apply(i2)
    i1 = attenuated_xray(conn, omega, seg1, opts)
    i2 = attenuated_xray(conn, omega, seg2, opts)
    return i1 + transport_matrix(conn, path.y, path.x, opts) @ i2


def potential_p(a, b, y, cfg, opts=TransportOpts()):
    """Ray potential p(y) = Id - P^A_{y<-z_y} P^B_{z_y<-y}; zero on the
    world line by the vanishing convention."""
    y = np.asarray(y, dtype=float)
    if radius(y) < cfg.r_axis_tol:
        return np.zeros((a.n, a.n))
    _, z_y = determined_endpoints(y, cfg)
    pa = transport_matrix(a, z_y, y, opts)
    pb = transport_matrix(b, y, z_y, opts)
    return np.eye(pa.shape[0]) - pa @ pb


def potential_p_integral(a, b, y, cfg, opts=TransportOpts()):
    """The potential through its defining transform, P^E I^E(A - B) along
    the ray from z_y; oracle for the closed form."""
    _, z_y = determined_endpoints(np.asarray(y, float), cfg)
    seg = Segment(z_y, np.asarray(y, dtype=float))
    endo = EndoConnection(a, b)
    i = attenuated_xray_endo(endo, DifferenceForm(a, b), seg, opts)
    return endo_transport(endo, seg, opts).apply(i)


def pseudolin_residual(a, b, path, opts=TransportOpts()):
    """|| (S^A)^-1 S^B - Id - I^{E(A,B)}(A-B) ||_F, the module self-test."""
    sa = scattering(a, path, opts)
    sb = scattering(b, path, opts)
    lhs = np.linalg.solve(sa, sb) - np.eye(sa.shape[0])
    rhs = broken_xray(EndoConnection(a, b), DifferenceForm(a, b), path, opts)
    return float(frob(lhs - rhs))


def _simpson(values, h):
    """Composite Simpson over equally spaced samples (first axis)."""
    m = len(values) - 1
    if m == 0:
        return np.zeros_like(values[0])
    if m % 2 == 1:
        # trapezoid fallback for an odd panel count
        return h * (values[0] / 2 + values[1:-1].sum(axis=0) + values[-1] / 2)
    w = np.ones(m + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return (h / 3.0) * np.tensordot(w, values, axes=(0, 0))


def transport_derivative(a, seg, v1, v2, opts=TransportOpts()):
    """d/ds at s=0 of the transport along the segment family
    (a + s v1) -> (b + s v2), by the first-variation formula
    (boundary connection terms plus a curvature integral)."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    pts, tangent, h = leg_nodes(seg.a, seg.b, opts.steps)
    ad = leg_approach_dir(seg.a, seg.b)
    upath = transport_path(a, seg, opts)
    ut = upath[-1]
    term = ut @ a.value(np.asarray(seg.a, float), v1, approach_dir=ad) \
        - a.value(np.asarray(seg.b, float), v2, approach_dir=ad) @ ut

    even = pts[::2]
    uu = np.linspace(0.0, 1.0, len(even))
    w = (1.0 - uu)[:, None] * v1[None, :] + uu[:, None] * v2[None, :]
    f = curvature_batch(a, even)
    g = np.einsum("u,kv,kuvab->kab", tangent, w, f)
    integrand = ut @ np.linalg.inv(upath) @ g @ upath
    return term + _simpson(integrand, h)


def transport_derivative_fd(a, seg, v1, v2, opts=TransportOpts(), h=1e-4):
    """Central-difference oracle for transport_derivative."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    plus = transport_matrix(a, np.asarray(seg.a, float) + h * v1,
                            np.asarray(seg.b, float) + h * v2, opts)
    minus = transport_matrix(a, np.asarray(seg.a, float) - h * v1,
                             np.asarray(seg.b, float) - h * v2, opts)
    return (plus - minus) / (2.0 * h)


class PairPotentialForm:
    """One-form (A - B - d_E p) for the pair potential p of (A, B); the
    differential of p is taken by central differences of the closed form,
    with potential values memoized per evaluation point."""

    def __init__(self, a, b, cfg, opts=TransportOpts(), h=1e-5):
        self.a = a
        self.b = b
        self.cfg = cfg
        self.opts = opts
        self.h = h
        self._p_cache = {}

    def p(self, y):
        key = np.asarray(y, dtype=float).tobytes()
        if key not in self._p_cache:
            self._p_cache[key] = potential_p(self.a, self.b, y, self.cfg,
                                             self.opts)
        return self._p_cache[key]

    def d_e_p(self, y, v):
        y = np.asarray(y, dtype=float)
        v = np.asarray(v, dtype=float)
        dp = (self.p(y + self.h * v) - self.p(y - self.h * v)) / (2 * self.h)
        pv = self.p(y)
        return dp + self.a.value(y, v) @ pv - pv @ self.b.value(y, v)

    def value(self, y, v, approach_dir=None):
        return (self.a.value(y, v, approach_dir=approach_dir)
                - self.b.value(y, v, approach_dir=approach_dir)
                - self.d_e_p(y, v))

    def along(self, points, tangent, approach_dir=None):
        pts = np.atleast_2d(points)
        return np.stack([self.value(q, tangent, approach_dir=approach_dir)
                         for q in pts])

