"""Causal-diamond geometry: the diamond and observation tube, lightlike
relations, determined endpoints on the central world line, fibers of
admissible broken paths and their samplers.

Events are numpy arrays (t, x1, x2, x3) in diamond units; the diamond is
|x| <= 1 - |t| and the tube is the epsilon-cylinder around the x = 0 axis.
"""

from dataclasses import dataclass

import numpy as np

from .errors import AxisPoint, DegenerateSegment, EmptyFiber

LIGHTLIKE_TOL = 1e-12


def event(t, x1=0.0, x2=0.0, x3=0.0):
    return np.array([t, x1, x2, x3], dtype=float)


def spatial(p):
    return np.asarray(p)[..., 1:]


def radius(p):
    return np.linalg.norm(spatial(p), axis=-1)


@dataclass(frozen=True)
class DiamondConfig:
    """Tube half-width and the axis-evaluation tolerance."""
    epsilon: float
    r_axis_tol: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 1/2), got {self.epsilon}")
        if self.r_axis_tol <= 0:
            raise ValueError("r_axis_tol must be positive")


def inside_diamond(p, open_interior=False):
    p = np.asarray(p)
    r = radius(p)
    t = p[..., 0]
    if open_interior:
        return (r < t + 1.0) & (r < 1.0 - t)
    return (r <= t + 1.0) & (r <= 1.0 - t)


def inside_tube(p, cfg):
    return inside_diamond(p, open_interior=True) & (radius(p) < cfg.epsilon)


def contains(p, region, cfg):
    """Membership in 'diamond', 'tube' or 'diamond_minus_tube'.

    The tube is open (strict inequalities); the diamond is closed.
    """
    if region == "diamond":
        return bool(inside_diamond(p))
    if region == "tube":
        return bool(inside_tube(p, cfg))
    if region == "diamond_minus_tube":
        return bool(inside_diamond(p)) and not bool(inside_tube(p, cfg))
    raise ValueError(f"unknown region {region!r}")


def lightlike_defect(a, b):
    """|dt^2 - |dx|^2| for the segment from a to b."""
    d = np.asarray(b) - np.asarray(a)
    return abs(d[0] ** 2 - float(np.dot(d[1:], d[1:])))


def is_future_lightlike(a, b, tol=LIGHTLIKE_TOL):
    d = np.asarray(b) - np.asarray(a)
    return d[0] > 0 and lightlike_defect(a, b) < tol


def determined_endpoints(y, cfg):
    """Forced world-line endpoints (x_y, z_y) of the break point y.

    x_y = (t - |y_s|, 0) and z_y = (t + |y_s|, 0) are the unique points of
    the axis connected to y by past/future lightlike segments.
    """
    y = np.asarray(y, dtype=float)
    r = radius(y)
    if r < cfg.r_axis_tol:
        raise AxisPoint(f"break point {y} is on the axis; z_y direction undefined")
    x_y = event(y[0] - r)
    z_y = event(y[0] + r)
    return x_y, z_y


@dataclass(frozen=True)
class UnitTangent:
    """Euclidean-unit 4-vector v based at an event."""
    v: np.ndarray
    base: np.ndarray


def unit_direction(from_, to):
    """Unit vector pointing from `from_` to `to`, based at `to`."""
    d = np.asarray(to, dtype=float) - np.asarray(from_, dtype=float)
    nrm = np.linalg.norm(d)
    if nrm < 1e-12:
        raise DegenerateSegment("coincident endpoints")
    return UnitTangent(v=d / nrm, base=np.asarray(to, dtype=float))


@dataclass(frozen=True)
class BrokenPath:
    """Admissible triple x -> y -> z of lightlike-connected events with
    x, z in the tube and y outside it."""
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    kind: str = "free"   # free | future_determined | past_determined


def path_defects(path, cfg):
    """Constraint residuals of a BrokenPath; all zero for a valid path."""
    bad = 0.0
    for a, b in ((path.x, path.y), (path.y, path.z)):
        bad = max(bad, lightlike_defect(a, b))
        if (np.asarray(b) - np.asarray(a))[0] <= 0:
            bad = max(bad, 1.0)
    if not inside_tube(path.x, cfg) or not inside_tube(path.z, cfg):
        bad = max(bad, 1.0)
    if not contains(path.y, "diamond_minus_tube", cfg):
        bad = max(bad, 1.0)
    if path.kind == "future_determined":
        _, z_y = determined_endpoints(path.y, cfg)
        bad = max(bad, float(np.max(np.abs(path.z - z_y))))
    elif path.kind == "past_determined":
        x_y, _ = determined_endpoints(path.y, cfg)
        bad = max(bad, float(np.max(np.abs(path.x - x_y))))
    return bad


def validate_path(path, cfg, tol=LIGHTLIKE_TOL):
    bad = path_defects(path, cfg)
    if bad >= tol and bad >= 1.0:
        raise ValueError("path violates membership/kind constraints")
    if bad >= tol:
        raise ValueError(f"lightlike residual {bad:.3e} exceeds {tol:.1e}")
    return True


def fiber_point(y, x_space, which):
    """Deterministic fiber map: spatial location in the tube -> endpoint
    lightlike-connected to y (past endpoint for FX, future for FZ)."""
    y = np.asarray(y, dtype=float)
    x_space = np.asarray(x_space, dtype=float)
    dt = np.linalg.norm(x_space - y[1:])
    if which == "FX":
        return np.concatenate([[y[0] - dt], x_space])
    if which == "FZ":
        return np.concatenate([[y[0] + dt], x_space])
    raise ValueError(f"unknown fiber {which!r}")


def fiber_sample(y, which, cfg, rng, max_tries=1000):
    """Endpoint with spatial part uniform in the epsilon-ball, resampled
    until the event lies in the open diamond."""
    for _ in range(max_tries):
        u = rng.standard_normal(3)
        nrm = np.linalg.norm(u)
        if nrm < 1e-14:
            continue
        r = cfg.epsilon * rng.uniform() ** (1.0 / 3.0)
        x_space = r * u / nrm
        p = fiber_point(y, x_space, which)
        if inside_diamond(p, open_interior=True):
            return p
    raise EmptyFiber(f"no admissible {which} endpoint for y={y} "
                     f"after {max_tries} tries")


def sample_break_point(cfg, rng, max_tries=10**6):
    """Uniform point of the open diamond minus the tube, by rejection from
    the bounding box [-1,1]^4."""
    for _ in range(max_tries):
        p = rng.uniform(-1.0, 1.0, size=4)
        if inside_diamond(p, open_interior=True) and not inside_tube(p, cfg):
            return p
    raise EmptyFiber("break-point rejection sampling failed")


def sample_broken_path(cfg, rng, max_tries=10**6):
    """Random admissible path: y uniform on the diamond minus the tube,
    then independent fiber draws for the endpoints."""
    for _ in range(max_tries):
        y = sample_break_point(cfg, rng)
        try:
            x = fiber_sample(y, "FX", cfg, rng)
            z = fiber_sample(y, "FZ", cfg, rng)
        except EmptyFiber:
            continue
        return BrokenPath(x=x, y=y, z=z, kind="free")
    raise EmptyFiber("path sampling failed")


def to_determined(path, which, cfg):
    """Replace an endpoint by the forced world-line point of the break."""
    x_y, z_y = determined_endpoints(path.y, cfg)
    if which == "future":
        return BrokenPath(x=path.x, y=path.y, z=z_y, kind="future_determined")
    if which == "past":
        return BrokenPath(x=x_y, y=path.y, z=path.z, kind="past_determined")
    raise ValueError(f"unknown determined kind {which!r}")


def sample_off_axis_point(cfg, rng, r_min=0.05, boundary_margin=0.02,
                          max_tries=10**5):
    """Point of the open diamond, outside the tube, away from the axis and
    from the diamond boundary (for finite-difference stencils)."""
    for _ in range(max_tries):
        p = rng.uniform(-1.0, 1.0, size=4)
        r = radius(p)
        if r < max(r_min, cfg.epsilon + boundary_margin):
            continue
        if r > min(p[0] + 1.0, 1.0 - p[0]) - boundary_margin:
            continue
        return p
    raise EmptyFiber("off-axis sampling failed")


def tube_volume(epsilon):
    """Lebesgue volume of the open tube, 8/3 pi e^3 - 2 pi e^4."""
    return 8.0 / 3.0 * np.pi * epsilon**3 - 2.0 * np.pi * epsilon**4
