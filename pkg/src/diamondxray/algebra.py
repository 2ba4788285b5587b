"""Small matrix-group helpers: so(n) bases, skew/orthogonality defects,
polar projection and batched exponentials."""

import numpy as np
import scipy.linalg

from .errors import NonInvertibleProjection


def so_basis(n):
    """Orthonormal (Frobenius) basis of so(n), shape (n(n-1)/2, n, n)."""
    gens = []
    for a in range(n):
        for b in range(a + 1, n):
            g = np.zeros((n, n))
            g[a, b] = 1.0 / np.sqrt(2.0)
            g[b, a] = -1.0 / np.sqrt(2.0)
            gens.append(g)
    return np.array(gens)


def so_dim(n):
    return n * (n - 1) // 2


def skew_defect(m):
    """Frobenius norm of the symmetric part, 0 for exactly skew matrices."""
    return np.linalg.norm(m + np.swapaxes(m, -1, -2))


def orthogonality_defect(u):
    """Frobenius norm of u^T u - Id."""
    eye = np.eye(u.shape[-1])
    return np.linalg.norm(np.swapaxes(u, -1, -2) @ u - eye)


def random_skew(rng, n, scale=1.0):
    m = rng.standard_normal((n, n))
    return scale * (m - m.T) / 2.0


def polar_project(m):
    """Nearest orthogonal matrix (polar factor) of one matrix or a batch."""
    u, s, vt = np.linalg.svd(m)
    if np.min(s) < 1e-12:
        raise NonInvertibleProjection("singular polar factor, smallest "
                                      f"singular value {np.min(s):.3e}")
    return u @ vt


def skew_expm(m):
    """exp of skew matrices, vectorized over leading axes.

    Uses the Rodrigues formula for n = 3 and scipy.linalg.expm otherwise.
    """
    m = np.asarray(m, dtype=float)
    if m.shape[-1] == 3:
        w = np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)
        theta = np.linalg.norm(w, axis=-1)
        th = theta[..., None, None]
        small = theta < 1e-12
        # series-safe coefficients sin(t)/t and (1-cos(t))/t^2
        c1 = np.where(small[..., None, None], 1.0 - th**2 / 6.0,
                      np.sin(th) / np.where(th == 0, 1.0, th))
        c2 = np.where(small[..., None, None], 0.5 - th**2 / 24.0,
                      (1.0 - np.cos(th)) / np.where(th == 0, 1.0, th**2))
        eye = np.broadcast_to(np.eye(3), m.shape)
        return eye + c1 * m + c2 * (m @ m)
    if m.ndim == 2:
        return scipy.linalg.expm(m)
    flat = m.reshape(-1, m.shape[-2], m.shape[-1])
    out = np.stack([scipy.linalg.expm(a) for a in flat])
    return out.reshape(m.shape)


def frob(m):
    """Frobenius norm over the last two axes."""
    return np.sqrt(np.sum(np.asarray(m) ** 2, axis=(-2, -1)))
