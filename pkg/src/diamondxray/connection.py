"""so(n)-valued connections on the diamond as truncated cosine-basis
expansions: evaluation, analytic derivatives, curvature, Sobolev norms,
the light-sink parametrization and the right gauge action.

The scalar basis is the separable Neumann cosine basis of the bounding box
[-1,1]^4, L2-orthonormal there, with box eigenvalues (the constant mode's
eigenvalue is set to 1 so negative powers stay finite).
"""

from dataclasses import dataclass, field

import json
import numpy as np

from .algebra import so_basis, skew_expm
from .errors import AxisUndefined, IndexOutOfRange
from .geometry import radius, spatial

H_GAUGE = 1e-5   # default central-difference step for gauge differentials

_AXIS_NAMES = ("t", "x1", "x2", "x3")


def _mode_lambda(k):
    s = int(np.dot(k, k))
    return 1.0 if s == 0 else (np.pi / 2.0) ** 2 * s


@dataclass(frozen=True)
class BasisSpec:
    """Truncated cosine basis: all multi-indices in {0..K-1}^4 ordered by
    eigenvalue, ties broken lexicographically."""
    max_index: int
    modes: np.ndarray = field(repr=False, default=None)
    lambdas: np.ndarray = field(repr=False, default=None)

    @classmethod
    def build(cls, max_index):
        ks = np.array([[a, b, c, d]
                       for a in range(max_index)
                       for b in range(max_index)
                       for c in range(max_index)
                       for d in range(max_index)])
        lam = np.array([_mode_lambda(k) for k in ks])
        order = sorted(range(len(ks)), key=lambda i: (lam[i], tuple(ks[i])))
        return cls(max_index=max_index, modes=ks[order], lambdas=lam[order])

    @property
    def size(self):
        return len(self.modes)

    def eval(self, points):
        """Basis values at points, shape (m, J)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        k = self.modes  # (J, 4)
        arg = 0.5 * np.pi * k[None, :, :] * (pts[:, None, :] + 1.0)
        vals = np.cos(arg).prod(axis=2)
        norm = 2.0 ** (np.count_nonzero(k, axis=1) / 2.0) / 4.0
        return vals * norm[None, :]

    def grad(self, points):
        """Gradients of the basis at points, shape (m, J, 4)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        k = self.modes
        arg = 0.5 * np.pi * k[None, :, :] * (pts[:, None, :] + 1.0)
        c = np.cos(arg)
        s = np.sin(arg)
        norm = 2.0 ** (np.count_nonzero(k, axis=1) / 2.0) / 4.0
        out = np.empty((pts.shape[0], len(k), 4))
        for mu in range(4):
            others = c.prod(axis=2) / np.where(c[:, :, mu] == 0.0, 1.0,
                                               c[:, :, mu])
            # recompute exactly when a cosine vanishes at the point
            mask = c[:, :, mu] == 0.0
            if np.any(mask):
                idx = [i for i in range(4) if i != mu]
                others = np.where(mask, c[:, :, idx].prod(axis=2), others)
            out[:, :, mu] = -0.5 * np.pi * k[None, :, mu] * s[:, :, mu] * others
        return out * norm[None, :, None]


def eval_basis(spec, j, p):
    """Value of the j-th basis function at one point."""
    if not 0 <= j < spec.size:
        raise IndexOutOfRange(f"mode {j} outside 0..{spec.size - 1}")
    return float(spec.eval(np.asarray(p)[None, :])[0, j])


def _xhat(points, approach_dir, r_axis_tol=1e-9):
    """Outward spatial unit vectors; on-axis points use the supplied ray
    direction as the limit."""
    pts = np.atleast_2d(points)
    xs = spatial(pts)
    r = np.linalg.norm(xs, axis=1)
    on_axis = r < r_axis_tol
    if np.any(on_axis):
        if approach_dir is None:
            raise AxisUndefined("on-axis light-sink evaluation needs the "
                                "ray's spatial direction")
        ad = np.asarray(approach_dir, dtype=float)
        ad = ad / np.linalg.norm(ad)
    out = xs / np.where(on_axis, 1.0, r)[:, None]
    if np.any(on_axis):
        out[on_axis] = ad
    return out


@dataclass
class ConnectionField:
    """One-form with skew coefficients: coeffs[c, j] multiplies basis mode j
    in the dx^c component (c = 0 is dt)."""
    n: int
    spec: BasisSpec
    coeffs: np.ndarray   # (4, J, n, n)

    kind = "connection"

    def components(self, points):
        """Component matrices at points, shape (m, 4, n, n)."""
        e = self.spec.eval(points)
        return np.einsum("mj,cjab->mcab", e, self.coeffs)

    def along(self, points, tangent, approach_dir=None):
        """A(tangent) at each point, shape (m, n, n)."""
        e = self.spec.eval(points)
        paired = np.tensordot(np.asarray(tangent, dtype=float), self.coeffs,
                              axes=(0, 0))
        return np.tensordot(e, paired, axes=(1, 0))

    def value(self, p, v, approach_dir=None):
        return self.along(np.asarray(p)[None, :], v)[0]

    def scaled(self, factor):
        return ConnectionField(self.n, self.spec, factor * self.coeffs)


@dataclass
class LightSinkField:
    """Connection with only spatial coefficient maps; the time component is
    the outward radial component, so A(dt) = A(dr) by construction."""
    n: int
    spec: BasisSpec
    coeffs: np.ndarray   # (3, J, n, n)
    r_axis_tol: float = 1e-9

    kind = "lightsink"

    def spatial_components(self, points):
        e = self.spec.eval(points)
        return np.einsum("mj,cjab->mcab", e, self.coeffs)

    def components(self, points, approach_dir=None):
        """Full (m, 4, n, n) components with the derived time part."""
        sp = self.spatial_components(points)
        xh = _xhat(points, approach_dir, self.r_axis_tol)
        a_t = np.einsum("mcab,mc->mab", sp, xh)
        return np.concatenate([a_t[:, None], sp], axis=1)

    def along(self, points, tangent, approach_dir=None):
        sp = self.spatial_components(points)
        xh = _xhat(points, approach_dir, self.r_axis_tol)
        v = np.asarray(tangent, dtype=float)
        w = v[None, 1:] + v[0] * xh
        return np.einsum("mcab,mc->mab", sp, w)

    def value(self, p, v, approach_dir=None):
        return self.along(np.asarray(p)[None, :], v, approach_dir)[0]

    def scaled(self, factor):
        return LightSinkField(self.n, self.spec, factor * self.coeffs,
                              self.r_axis_tol)


def eval_connection(a, p, v, approach_dir=None):
    """Pair a connection-like evaluator with a 4-vector at one event."""
    return a.value(np.asarray(p, dtype=float), np.asarray(v, dtype=float),
                   approach_dir=approach_dir)


class DifferenceForm:
    """One-form evaluator for a - b, usable as the argument of attenuated
    transforms."""

    def __init__(self, a, b):
        self.a = a
        self.b = b

    def along(self, points, tangent, approach_dir=None):
        return (self.a.along(points, tangent, approach_dir=approach_dir)
                - self.b.along(points, tangent, approach_dir=approach_dir))

    def value(self, p, v, approach_dir=None):
        return self.along(np.asarray(p)[None, :], v, approach_dir)[0]


def curvature(a, p):
    """Curvature two-form of a ConnectionField at p as an antisymmetric
    (4, 4, n, n) array, from analytic basis derivatives."""
    return curvature_batch(a, np.asarray(p)[None, :])[0]


def curvature_batch(a, points):
    pts = np.atleast_2d(points)
    e = a.spec.eval(pts)
    g = a.spec.grad(pts)
    comp = np.einsum("mj,cjab->mcab", e, a.coeffs)
    deriv = np.einsum("mjd,cjab->mdcab", g, a.coeffs)   # d_mu A_c
    comm = np.einsum("muab,mvbc->muvac", comp, comp)
    f = deriv - deriv.transpose(0, 2, 1, 3, 4)
    f += comm - comm.transpose(0, 2, 1, 3, 4)
    return f


def curvature_pair(a, p, u, v):
    """F_a(u, v) at p."""
    f = curvature(a, p)
    return np.einsum("u,v,uvab->ab", np.asarray(u, float),
                     np.asarray(v, float), f)


def curvature_pair_fd(a, p, u, v, h=1e-5, approach_dir=None):
    """Curvature by central differences of the evaluator; works for any
    connection-like object, used where analytic derivatives are absent."""
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)

    def dderiv(w, direction):
        plus = a.value(p + h * w, direction, approach_dir=approach_dir)
        minus = a.value(p - h * w, direction, approach_dir=approach_dir)
        return (plus - minus) / (2.0 * h)

    au = a.value(p, u, approach_dir=approach_dir)
    av = a.value(p, v, approach_dir=approach_dir)
    return dderiv(u, v) - dderiv(v, u) + au @ av - av @ au


def sobolev_norm(a, s):
    """Spectral Sobolev norm: sqrt(sum lambda_j^s |coeff|_F^2) over stored
    components and modes. s = 0 is the L2 coefficient norm."""
    if s < 0:
        raise ValueError("order must be nonnegative")
    lam = a.spec.lambdas ** s
    sq = np.einsum("cjab,cjab,j->", a.coeffs, a.coeffs, lam)
    return float(np.sqrt(sq))


# ---------------------------------------------------------------------------
# gauge fields and the right action

class GaugeField:
    """Group-valued field on the diamond. Subclasses give values; the
    differential defaults to central differences with step H_GAUGE."""

    h = H_GAUGE

    def value(self, p):
        raise NotImplementedError

    def values(self, points):
        pts = np.atleast_2d(points)
        return np.stack([self.value(q) for q in pts])

    def dvalue(self, p, v):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        return (self.value(p + self.h * v) - self.value(p - self.h * v)) \
            / (2.0 * self.h)

    def dvalues(self, points, tangent):
        pts = np.atleast_2d(points)
        t = np.asarray(tangent, dtype=float)
        return (self.values(pts + self.h * t) - self.values(pts - self.h * t)) \
            / (2.0 * self.h)


class ConstantGauge(GaugeField):
    def __init__(self, u):
        self.u = np.asarray(u, dtype=float)

    def value(self, p):
        return self.u

    def values(self, points):
        pts = np.atleast_2d(points)
        return np.broadcast_to(self.u, (len(pts),) + self.u.shape).copy()

    def dvalue(self, p, v):
        return np.zeros_like(self.u)

    def dvalues(self, points, tangent):
        pts = np.atleast_2d(points)
        return np.zeros((len(pts),) + self.u.shape)


class RotationGauge(GaugeField):
    """phi(p) = exp(eta(p) M) for a fixed skew generator M and a scalar
    profile with exact gradient."""

    def __init__(self, generator, profile):
        self.m = np.asarray(generator, dtype=float)
        self.profile = profile

    def value(self, p):
        return self.values(np.asarray(p)[None, :])[0]

    def values(self, points):
        eta = self.profile.value(points)
        return skew_expm(eta[:, None, None] * self.m)

    def dvalue(self, p, v):
        return self.dvalues(np.asarray(p)[None, :], v)[0]

    def dvalues(self, points, tangent):
        pts = np.atleast_2d(points)
        deta = self.profile.grad(pts) @ np.asarray(tangent, dtype=float)
        return deta[:, None, None] * (self.m @ self.values(pts))


class ProductGauge(GaugeField):
    """(phi psi)(p) = phi(p) psi(p) with the exact product differential."""

    def __init__(self, phi, psi):
        self.phi = phi
        self.psi = psi

    def value(self, p):
        return self.phi.value(p) @ self.psi.value(p)

    def values(self, points):
        return self.phi.values(points) @ self.psi.values(points)

    def dvalue(self, p, v):
        return (self.phi.dvalue(p, v) @ self.psi.value(p)
                + self.phi.value(p) @ self.psi.dvalue(p, v))

    def dvalues(self, points, tangent):
        return (self.phi.dvalues(points, tangent) @ self.psi.values(points)
                + self.phi.values(points) @ self.psi.dvalues(points, tangent))


class TubeRamp:
    """Smooth scalar profile vanishing identically for r <= r0: a C-infinity
    ramp in the spatial radius, optionally modulated linearly in t."""

    def __init__(self, amplitude, r0, width, t_slope=0.0):
        self.amplitude = amplitude
        self.r0 = r0
        self.width = width
        self.t_slope = t_slope

    def _g(self, u):
        out = np.zeros_like(u)
        pos = u > 0
        out[pos] = np.exp(-1.0 / u[pos])
        return out

    def value(self, points):
        pts = np.atleast_2d(points)
        u = (radius(pts) - self.r0) / self.width
        return self.amplitude * self._g(u) * (1.0 + self.t_slope * pts[:, 0])

    def grad(self, points):
        pts = np.atleast_2d(points)
        r = radius(pts)
        u = (r - self.r0) / self.width
        g = self._g(u)
        dg = np.zeros_like(u)
        pos = u > 0
        dg[pos] = g[pos] / u[pos] ** 2 / self.width
        tmod = 1.0 + self.t_slope * pts[:, 0]
        out = np.zeros_like(pts)
        safe_r = np.where(r < 1e-14, 1.0, r)
        out[:, 1:] = (self.amplitude * dg * tmod / safe_r)[:, None] \
            * spatial(pts)
        out[:, 0] = self.amplitude * g * self.t_slope
        return out


class AxisWeighted:
    """Profile amp * r^2 (c . (1, t, x1, x2, x3)); vanishes (with its
    spatial gradient) on the axis, so exp(eta M) restricts to Id there."""

    def __init__(self, amplitude, linear=(1.0, 0.0, 0.0, 0.0, 0.0)):
        self.amplitude = amplitude
        self.linear = np.asarray(linear, dtype=float)

    def value(self, points):
        pts = np.atleast_2d(points)
        r2 = radius(pts) ** 2
        lin = self.linear[0] + pts @ self.linear[1:]
        return self.amplitude * r2 * lin

    def grad(self, points):
        pts = np.atleast_2d(points)
        r2 = radius(pts) ** 2
        lin = self.linear[0] + pts @ self.linear[1:]
        out = self.amplitude * r2[:, None] * self.linear[None, 1:].repeat(
            len(pts), axis=0)
        out[:, 1:] += self.amplitude * 2.0 * spatial(pts) * lin[:, None]
        return out


def gauge_act(a, phi, p, v, approach_dir=None):
    """Right action value (phi^-1 dphi + phi^-1 A phi)_p(v)."""
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    u = phi.value(p)
    uinv = np.linalg.inv(u)
    return uinv @ phi.dvalue(p, v) + uinv @ a.value(
        p, v, approach_dir=approach_dir) @ u


class GaugedConnection:
    """Evaluator for a <| phi, suitable for transport integration."""

    def __init__(self, a, phi):
        self.a = a
        self.phi = phi
        self.n = a.n

    def along(self, points, tangent, approach_dir=None):
        pts = np.atleast_2d(points)
        u = self.phi.values(pts)
        du = self.phi.dvalues(pts, tangent)
        av = self.a.along(pts, tangent, approach_dir=approach_dir)
        uinv = np.linalg.inv(u)
        return uinv @ du + uinv @ av @ u

    def value(self, p, v, approach_dir=None):
        return self.along(np.asarray(p)[None, :], v, approach_dir)[0]

    def components(self, points, approach_dir=None):
        pts = np.atleast_2d(points)
        return np.stack([self.along(pts, e, approach_dir=approach_dir)
                         for e in np.eye(4)], axis=1)


# ---------------------------------------------------------------------------
# constructors and persistence

def random_connection(rng, spec, n, norm=1.0):
    """Random smooth field with L2 coefficient norm equal to `norm`."""
    gens = so_basis(n)
    w = rng.standard_normal((4, spec.size, len(gens)))
    coeffs = np.einsum("cjg,gab->cjab", w, gens)
    f = ConnectionField(n, spec, coeffs)
    scale = norm / max(sobolev_norm(f, 0.0), 1e-300)
    return f.scaled(scale)


def random_lightsink(rng, spec, n, norm=1.0):
    gens = so_basis(n)
    w = rng.standard_normal((3, spec.size, len(gens)))
    coeffs = np.einsum("cjg,gab->cjab", w, gens)
    f = LightSinkField(n, spec, coeffs)
    scale = norm / max(sobolev_norm(f, 0.0), 1e-300)
    return f.scaled(scale)


def zero_connection(spec, n):
    return ConnectionField(n, spec, np.zeros((4, spec.size, n, n)))


def save_connection(a, path):
    comps = []
    axes = _AXIS_NAMES if a.kind == "connection" else _AXIS_NAMES[1:]
    for c, name in enumerate(axes):
        modes = []
        for j in range(a.spec.size):
            coeff = a.coeffs[c, j]
            if np.any(coeff != 0.0):
                modes.append({"k": [int(v) for v in a.spec.modes[j]],
                              "coeff": [float(v) for v in coeff.ravel()]})
        comps.append({"axis": name, "modes": modes})
    doc = {"n": a.n, "kind": a.kind,
           "basis": {"K": a.spec.max_index,
                     "ordering_rule": "eigenvalue_then_lex"},
           "components": comps}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_connection(path):
    with open(path) as fh:
        doc = json.load(fh)
    n = int(doc["n"])
    spec = BasisSpec.build(int(doc["basis"]["K"]))
    kind = doc.get("kind", "connection")
    naxes = 4 if kind == "connection" else 3
    coeffs = np.zeros((naxes, spec.size, n, n))
    key = {tuple(k): j for j, k in enumerate(map(tuple, spec.modes))}
    offset = 0 if kind == "connection" else 1
    for comp in doc["components"]:
        c = _AXIS_NAMES.index(comp["axis"]) - offset
        for mode in comp["modes"]:
            j = key[tuple(mode["k"])]
            coeffs[c, j] = np.asarray(mode["coeff"], dtype=float).reshape(n, n)
    if kind == "connection":
        return ConnectionField(n, spec, coeffs)
    return LightSinkField(n, spec, coeffs)
