"""Dense linear algebra and scalar helpers shared by every other module.

Matrices are plain 2-D float64 numpy arrays (row-major). Every public
operation validates finiteness on the way in, so NaN/Inf never escapes
silently. Everything here is a pure function and safe to call from
concurrent client threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SvdResult",
    "svd",
    "softmax",
    "l2_normalize_rows",
    "random_orthogonal",
]


@dataclass(frozen=True)
class SvdResult:
    """Factors of m = u @ diag(sigma) @ vt with sigma sorted descending."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray


def _as_finite_matrix(m, name: str = "m") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def svd(m) -> SvdResult:
    """Full SVD of a square matrix with a deterministic sign convention.

    The first entry of each left singular vector whose magnitude exceeds
    1e-12 is made non-negative; the matching row of vt is flipped with it,
    so the product u @ diag(sigma) @ vt is unchanged and repeated calls on
    equal inputs return identical factors.
    """
    a = _as_finite_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"svd expects a square matrix, got shape {a.shape}")
    if a.shape[0] < 1:
        raise ValueError("svd expects dimension >= 1")
    u, sigma, vt = np.linalg.svd(a)
    u = u.copy()
    vt = vt.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        lead = int(np.argmax(np.abs(col) > 1e-12))
        if col[lead] < 0.0:
            u[:, j] = -col
            vt[j, :] = -vt[j, :]
    return SvdResult(u=u, sigma=sigma, vt=vt)


def softmax(v, tau: float) -> np.ndarray:
    """Temperature softmax exp(v/tau) / sum(exp(v/tau)), max-subtracted."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input contains non-finite entries")
    z = x / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def l2_normalize_rows(m) -> np.ndarray:
    """Scale every nonzero row of m to unit l2 norm.

    Exactly-zero rows pass through unchanged: isolated nodes produce zero
    aggregates and must not abort training.
    """
    a = _as_finite_matrix(m)
    out = a.copy()
    norms = np.linalg.norm(a, axis=1)
    nz = norms > 0.0
    out[nz] = a[nz] / norms[nz, None]
    return out


def random_orthogonal(d: int, seed) -> np.ndarray:
    """Seeded random d x d orthogonal matrix.

    QR of a seeded standard-normal matrix with the positive-diagonal-R
    convention, followed by the same leading-entry sign canonicalization
    the svd uses, so the result is unique per seed and d=1 always yields
    +1.
    """
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    q = q * signs[None, :]
    for j in range(d):
        col = q[:, j]
        lead = int(np.argmax(np.abs(col) > 1e-12))
        if col[lead] < 0.0:
            q[:, j] = -col
    return q
