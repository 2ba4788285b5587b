"""Numerical evaluation of both sides of the stability estimates: the
finite-difference ray operators, the direction-basis bound, Monte-Carlo
L2 quadratures over the tube and the path fibers, and the curvature factor
entering the H1 estimate.

Unknown constants are never asserted; reports carry both sides and the
empirical ratio, and tests check stability of fitted constants.
"""

from dataclasses import dataclass

import numpy as np

from .algebra import frob
from .connection import ConnectionField, curvature_batch
from .errors import SingularBasis, StepUnderflow
from .geometry import (BrokenPath, determined_endpoints, fiber_point,
                       inside_diamond, inside_tube, radius, sample_break_point,
                       spatial, tube_volume, unit_direction)
from .lightsink import delta_norm, one_form_opnorm, rho_difference_norm
from .transport import TransportOpts, scattering

DIAMOND_VOLUME = 2.0 * np.pi / 3.0
FIBER_GRAPH_FACTOR = np.sqrt(2.0)   # 3-surface measure of the fiber graph


@dataclass(frozen=True)
class FDConfig:
    h: float = 1e-4
    scheme: str = "central_2nd"   # central_2nd | richardson_4th

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("step must be positive")
        if self.scheme not in ("central_2nd", "richardson_4th"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


@dataclass
class EstimateReport:
    name: str
    epsilon: float
    lhs: float
    rhs: float
    ratio: float
    samples: int
    seed: int

    def csv_row(self):
        return (f"{self.name},{self.epsilon:.17g},{self.lhs:.17g},"
                f"{self.rhs:.17g},{self.ratio:.17g},{self.samples},"
                f"{self.seed}")


def _perturbed_path(base, which, t, cfg):
    x, y, z = (np.asarray(base.x, float), np.asarray(base.y, float),
               np.asarray(base.z, float))
    if which == "y_from_x":
        v = unit_direction(x, y).v
        y = y + t * v
    elif which == "y_from_z":
        v = unit_direction(z, y).v
        y = y + t * v
    elif which == "x_from_y":
        v = unit_direction(y, x).v
        x = x + t * v
    elif which == "z_from_y":
        v = unit_direction(y, z).v
        z = z + t * v
    else:
        raise ValueError(f"unknown derivative direction {which!r}")
    kind = base.kind
    if which in ("y_from_x", "y_from_z"):
        if kind == "future_determined":
            _, z = determined_endpoints(y, cfg)
        elif kind == "past_determined":
            x, _ = determined_endpoints(y, cfg)
    return BrokenPath(x=x, y=y, z=z, kind=kind)


def _admissible(path, cfg):
    return (inside_tube(path.x, cfg) and inside_tube(path.z, cfg)
            and inside_diamond(path.y, open_interior=True)
            and not inside_tube(path.y, cfg))


def path_derivative(f, base, which, fd=FDConfig(), cfg=None):
    """Central difference of a matrix path-functional along one of the four
    ray directions; determined paths re-derive their forced endpoint.

    The step shrinks (down to 1e-7) until all perturbed configurations stay
    admissible.
    """
    if cfg is None:
        raise ValueError("a DiamondConfig is required")
    h = fd.h
    span = 2.0 if fd.scheme == "richardson_4th" else 1.0
    while h >= 1e-7:
        try:
            probes = [_perturbed_path(base, which, s, cfg)
                      for s in (span * h, -span * h)]
            if all(_admissible(p, cfg) for p in probes):
                break
        except Exception:
            pass
        h *= 0.5
    else:
        raise StepUnderflow(f"no admissible step above 1e-7 for {which}")
    if fd.scheme == "central_2nd":
        fp = f(_perturbed_path(base, which, h, cfg))
        fm = f(_perturbed_path(base, which, -h, cfg))
        return (fp - fm) / (2.0 * h)
    f2p = f(_perturbed_path(base, which, 2 * h, cfg))
    fp = f(_perturbed_path(base, which, h, cfg))
    fm = f(_perturbed_path(base, which, -h, cfg))
    f2m = f(_perturbed_path(base, which, -2 * h, cfg))
    return (-f2p + 8.0 * fp - 8.0 * fm + f2m) / (12.0 * h)


def linalg_bound(basis_vectors):
    """sqrt(m) ||B^-1|| for the column matrix of the given unit vectors."""
    b = np.stack([np.asarray(v, float) for v in basis_vectors], axis=1)
    m = b.shape[1]
    s = np.linalg.svd(b, compute_uv=False)
    if s[0] / max(s[-1], 1e-300) > 1e12:
        raise SingularBasis("direction vectors are numerically dependent")
    return float(np.sqrt(m) / s[-1])


def sample_vectors(epsilon, spatial_dir=(1.0, 0.0, 0.0)):
    """The four lightlike unit directions of the fiber-sampling
    construction, built in the frame of the given outward direction."""
    e1 = np.asarray(spatial_dir, dtype=float)
    e1 = e1 / np.linalg.norm(e1)
    # complete to an orthonormal spatial frame
    probe = np.eye(3)[np.argmin(np.abs(e1))]
    g2 = probe - (probe @ e1) * e1
    g2 /= np.linalg.norm(g2)
    g3 = np.cross(e1, g2)
    root = np.sqrt(1.0 + epsilon**2)
    vs = [np.concatenate([[1.0], e1]),
          np.concatenate([[root], e1 + epsilon * g2]),
          np.concatenate([[root], e1 + epsilon * g3]),
          np.concatenate([[-1.0], e1])]
    return [v / np.linalg.norm(v) for v in vs]


def sample_frob_norm(epsilon):
    """Frobenius norm of the inverse direction matrix; equals
    sqrt(8 eps^2 + 8)/eps."""
    b = np.stack(sample_vectors(epsilon), axis=1)
    return float(np.linalg.norm(np.linalg.inv(b)))


def one_form_opnorms(field_a, field_b, points):
    """Batched operator norms of (A - B) at the given points."""
    ca = field_a.components(points)
    cb = field_b.components(points)
    cols = (ca - cb).reshape(len(points), 4, -1)
    return np.linalg.svd(np.swapaxes(cols, 1, 2), compute_uv=False)[:, 0]


def _tube_point(cfg, rng):
    """Tube sample with its importance weight against Lebesgue measure."""
    u = rng.standard_normal(3)
    u /= np.linalg.norm(u)
    r = cfg.epsilon * rng.uniform() ** (1.0 / 3.0)
    t = rng.uniform(-(1.0 - r), 1.0 - r)
    ball = 4.0 / 3.0 * np.pi * cfg.epsilon**3
    weight = ball * 2.0 * (1.0 - r)
    return np.concatenate([[t], r * u]), weight


def in_mho_x(p, cfg):
    """Membership in the set of admissible past endpoints: a future ray can
    leave the tube and still break inside the diamond."""
    return p[0] <= 1.0 - 2.0 * cfg.epsilon + radius(p)


def in_mho_z(p, cfg):
    return p[0] >= -1.0 + 2.0 * cfg.epsilon - radius(p)


def estimate_in(a, b, cfg, rng, n_x=2048, n_y=2048, opts=TransportOpts(),
                fd=FDConfig(), seed=0):
    """Monte-Carlo report for the inside-the-tube stability estimate:
    lhs = L2 norm of A - B over admissible past endpoints, rhs = L2 norm
    over the fiber bundle of the endpoint data derivative."""
    sq = 0.0
    for _ in range(n_x):
        p, w = _tube_point(cfg, rng)
        if in_mho_x(p, cfg):
            sq += w * one_form_opnorms(a, b, p[None])[0] ** 2
    lhs = np.sqrt(sq / n_x)

    ball = 4.0 / 3.0 * np.pi * cfg.epsilon**3
    vol_y = DIAMOND_VOLUME - tube_volume(cfg.epsilon)
    sq = 0.0
    used = 0
    for _ in range(n_y):
        y = sample_break_point(cfg, rng)
        xs = rng.standard_normal(3)
        xs *= cfg.epsilon * rng.uniform() ** (1.0 / 3.0) / np.linalg.norm(xs)
        x = fiber_point(y, xs, "FX")
        if not inside_diamond(x, open_interior=True):
            continue
        _, z_y = determined_endpoints(y, cfg)
        path = BrokenPath(x=x, y=y, z=z_y, kind="future_determined")

        def func(p):
            sa = scattering(a, p, opts)
            sb = scattering(b, p, opts)
            return sa @ np.linalg.inv(sb)

        d = path_derivative(func, path, "x_from_y", fd, cfg)
        sq += frob(d) ** 2
        used += 1
    rhs = np.sqrt(vol_y * ball * FIBER_GRAPH_FACTOR * sq / max(n_y, 1))
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf)
    return EstimateReport("estimate_in", cfg.epsilon, float(lhs), float(rhs),
                          float(ratio), n_x + n_y, seed)


def estimate_out(a, b, cfg, rng, n_y=32, n_x_per_y=16, opts=TransportOpts(),
                 fd=FDConfig(), seed=0, four_direction=True):
    """Pointwise and integrated reports for the outside-the-tube estimate.

    Pointwise rows live at break points whose whole fiber ball is inside
    the diamond (so the fiber integral is well resolved) and carry the
    discrepancy norm, the eps^-4-scaled fiber data integral, and optionally
    the four-direction bound. The integrated L2 report samples the full
    domain; fiber proposals falling outside the diamond contribute zero,
    which keeps that estimator unbiased.
    """
    ball = 4.0 / 3.0 * np.pi * cfg.epsilon**3
    vol_y = DIAMOND_VOLUME - tube_volume(cfg.epsilon)
    pointwise = []

    def data_func(p):
        sa = scattering(a, p, opts)
        sb = scattering(b, p, opts)
        return np.linalg.solve(sa, sb)

    def fiber_terms(y, agg):
        acc = 0.0
        _, z_y = determined_endpoints(y, cfg)
        for _ in range(n_x_per_y):
            xs = rng.standard_normal(3)
            xs *= cfg.epsilon * rng.uniform() ** (1.0 / 3.0) \
                / np.linalg.norm(xs)
            x = fiber_point(y, xs, "FX")
            if not inside_diamond(x, open_interior=True):
                continue
            path = BrokenPath(x=x, y=y, z=z_y, kind="future_determined")
            d = path_derivative(data_func, path, "y_from_x", fd, cfg)
            acc += agg(frob(d))
        return acc / n_x_per_y

    for _ in range(n_y):
        y = _sample_pointwise_y(cfg, rng)
        lhs_y = delta_norm(a, b, y, cfg, opts)
        rhs_y = ball * FIBER_GRAPH_FACTOR \
            * fiber_terms(y, lambda v: v) / cfg.epsilon**4
        row = {"y": y, "lhs": float(lhs_y), "rhs": float(rhs_y)}
        if four_direction:
            row["rhs_four"] = _four_direction_bound(a, b, y, cfg, opts, fd,
                                                    data_func)
        pointwise.append(row)

    lhs_sq = []
    rhs_sq = []
    for _ in range(n_y):
        y = sample_break_point(cfg, rng)
        lhs_sq.append(delta_norm(a, b, y, cfg, opts) ** 2)
        rhs_sq.append(ball * FIBER_GRAPH_FACTOR
                      * fiber_terms(y, lambda v: v ** 2))
    lhs = np.sqrt(vol_y * np.mean(lhs_sq))
    rhs = np.sqrt(vol_y * np.mean(rhs_sq)) / cfg.epsilon**4
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf)
    report = EstimateReport("estimate_out", cfg.epsilon, float(lhs),
                            float(rhs), float(ratio),
                            2 * n_y * (1 + n_x_per_y), seed)
    return pointwise, report


def _sample_pointwise_y(cfg, rng, max_tries=10**5):
    """Break point whose fiber ball and construction witnesses all lie in
    the open diamond, with margins for the finite-difference stencils."""
    root = np.sqrt(1.0 + cfg.epsilon**2)
    for _ in range(max_tries):
        p = sample_break_point(cfg, rng)
        r = radius(p)
        if r > min(p[0] + 1.0, 1.0 - p[0]) - 0.03:
            continue
        # deepest fiber point sits at t - (r + eps) with radius up to eps
        if p[0] - r - cfg.epsilon < -1.0 + cfg.epsilon + 0.02:
            continue
        if p[0] - r * root < -1.0 + 0.02:
            continue
        return p
    raise StepUnderflow("no admissible pointwise report point found")


def _four_direction_bound(a, b, y, cfg, opts, fd, data_func):
    """Direction-basis bound: sqrt(4) ||B^-1|| times the largest data
    derivative over the three admissible construction rays (the fourth
    direction is the sink ray, where the discrepancy vanishes)."""
    xhat = spatial(y) / radius(y)
    vs = sample_vectors(cfg.epsilon, xhat)
    bound = linalg_bound(vs)
    r = radius(y)
    root = np.sqrt(1.0 + cfg.epsilon**2)
    raw = [np.concatenate([[1.0], xhat]),
           None, None]
    # unnormalized construction rays towards the tube
    frame_probe = np.eye(3)[np.argmin(np.abs(xhat))]
    g2 = frame_probe - (frame_probe @ xhat) * xhat
    g2 /= np.linalg.norm(g2)
    g3 = np.cross(xhat, g2)
    raw[1] = np.concatenate([[root], xhat + cfg.epsilon * g2])
    raw[2] = np.concatenate([[root], xhat + cfg.epsilon * g3])
    best = 0.0
    _, z_y = determined_endpoints(y, cfg)
    for v in raw:
        x = y - r * v
        if not inside_diamond(x, open_interior=True):
            continue
        path = BrokenPath(x=x, y=y, z=z_y, kind="future_determined")
        d = path_derivative(data_func, path, "y_from_x", fd, cfg)
        best = max(best, float(frob(d)))
    return bound * best


def curvature_sup(field, points, h=1e-5):
    """Grid estimate of sup over points and unit vector pairs of the
    curvature, via the top singular value of the six bivector columns."""
    pts = np.atleast_2d(points)
    if isinstance(field, ConnectionField):
        f = curvature_batch(field, pts)
    else:
        comps = {}
        for mu in range(4):
            dv = np.zeros(4)
            dv[mu] = 1.0
            plus = field.components(pts + h * dv)
            minus = field.components(pts - h * dv)
            comps[mu] = (plus - minus) / (2.0 * h)
        base = field.components(pts)
        f = np.empty((len(pts), 4, 4) + base.shape[-2:])
        for mu in range(4):
            for nu in range(4):
                f[:, mu, nu] = (comps[mu][:, nu] - comps[nu][:, mu]
                                + base[:, mu] @ base[:, nu]
                                - base[:, nu] @ base[:, mu])
    iu, ju = np.triu_indices(4, k=1)
    cols = f[:, iu, ju].reshape(len(pts), 6, -1)
    tops = np.linalg.svd(np.swapaxes(cols, 1, 2), compute_uv=False)[:, 0]
    return float(np.max(tops))


def _diamond_grid(grid, r_min=0.0):
    side = np.linspace(-1.0, 1.0, grid)
    pts = np.stack(np.meshgrid(side, side, side, side,
                               indexing="ij"), axis=-1).reshape(-1, 4)
    keep = inside_diamond(pts) & (radius(pts) >= r_min)
    return pts[keep]


def worldline_time_sup(field, grid):
    """Grid sup over the central world line of |A(dt)|_F; light-sink fields
    are probed on a thin ring since their time part is radial."""
    ts = np.linspace(-0.999, 0.999, grid)
    if isinstance(field, ConnectionField):
        pts = np.stack([ts, np.zeros_like(ts), np.zeros_like(ts),
                        np.zeros_like(ts)], axis=1)
        vals = field.components(pts)[:, 0]
    else:
        pts = np.stack([ts * (1 - 0.02), np.full_like(ts, 0.02),
                        np.zeros_like(ts), np.zeros_like(ts)], axis=1)
        vals = field.components(pts)[:, 0]
    return float(np.max(frob(vals)))


def psi_factor(a, b, cfg, grid=17):
    """Curvature factor 1 + min over the pair of (curvature sup plus the
    world-line time-component sup)."""
    pts = _diamond_grid(grid, r_min=0.02)
    term_a = curvature_sup(a, pts) + worldline_time_sup(a, 4 * grid)
    term_b = curvature_sup(b, pts) + worldline_time_sup(b, 4 * grid)
    return 1.0 + min(term_a, term_b)


def sup_field_difference(a, b, grid=17):
    """Grid sup over the diamond of the pointwise operator norm of A - B
    (the sphere-bundle sup norm)."""
    pts = _diamond_grid(grid, r_min=0.02 if not (
        isinstance(a, ConnectionField) and isinstance(b, ConnectionField))
        else 0.0)
    return float(np.max(one_form_opnorms(a, b, pts)))


def h1_estimate(a, b, cfg, rng, sizes=None, opts=TransportOpts(),
                fd=FDConfig(), seed=0):
    """Report for the H1 form of the estimate: lhs is the L2 distance of
    the light-sink projections outside the tube, rhs the curvature factor
    times the eps^-4-scaled H1 norm of the data difference over the fiber
    bundle. Also carries the forward Lipschitz cross-check."""
    sizes = sizes or {}
    n_out = sizes.get("n_out", 24)
    n_fiber = sizes.get("n_fiber", 48)
    grid = sizes.get("grid", 13)

    lhs_sq = []
    for _ in range(n_out):
        y = sample_break_point(cfg, rng)
        lhs_sq.append(rho_difference_norm(a, b, y, cfg, opts) ** 2)
    vol_y = DIAMOND_VOLUME - tube_volume(cfg.epsilon)
    lhs = np.sqrt(vol_y * np.mean(lhs_sq))

    ball = 4.0 / 3.0 * np.pi * cfg.epsilon**3
    acc = 0.0
    used = 0
    sup_data = 0.0
    for _ in range(n_fiber):
        y = sample_break_point(cfg, rng)
        xs = rng.standard_normal(3)
        xs *= cfg.epsilon * rng.uniform() ** (1.0 / 3.0) / np.linalg.norm(xs)
        x = fiber_point(y, xs, "FX")
        if not inside_diamond(x, open_interior=True):
            continue
        _, z_y = determined_endpoints(y, cfg)
        path = BrokenPath(x=x, y=y, z=z_y, kind="future_determined")

        def diff_func(p):
            return scattering(a, p, opts) - scattering(b, p, opts)

        val = diff_func(path)
        sup_data = max(sup_data, float(frob(val)))
        d1 = path_derivative(diff_func, path, "y_from_x", fd, cfg)
        d2 = path_derivative(diff_func, path, "x_from_y", fd, cfg)
        acc += frob(val) ** 2 + frob(d1) ** 2 + frob(d2) ** 2
        used += 1
    h1 = np.sqrt(vol_y * ball * FIBER_GRAPH_FACTOR * acc / max(used, 1))
    psi = psi_factor(a, b, cfg, grid)
    rhs = psi * h1 / cfg.epsilon**4
    if lhs == 0.0 and h1 == 0.0:
        lhs, rhs, ratio = 0.0, 0.0, 0.0
    else:
        ratio = lhs / rhs if rhs > 0 else np.inf
    report = EstimateReport("h1_estimate", cfg.epsilon, float(lhs),
                            float(rhs), float(ratio), n_out + n_fiber, seed)
    sup_field = sup_field_difference(a, b, grid)
    forward_ok = sup_data <= 2.0 * np.sqrt(2.0) * sup_field + 1e-6
    return report, {"sup_data": sup_data, "sup_field": sup_field,
                    "forward_bound_holds": bool(forward_ok)}
