import numpy as np
from scipy import linalg as sla


def symmetrize(a):
    return 0.5 * (a + a.T)


def sym_sqrt(a, floor=0.0):
    """Symmetric square root of a symmetric matrix, eigenvalues clipped at ``floor``."""
    w, q = np.linalg.eigh(symmetrize(np.atleast_2d(a)))
    w = np.maximum(w, floor)
    return symmetrize((q * np.sqrt(w)) @ q.T)


def sym_inv_sqrt(a):
    w, q = np.linalg.eigh(symmetrize(np.atleast_2d(a)))
    return symmetrize((q / np.sqrt(w)) @ q.T)


def jittered_cholesky(a):
    """Cholesky factor of a symmetric PSD matrix.

    On failure a jitter of ``1e-10 * trace / dim`` is added, growing tenfold
    until the factorization succeeds.
    """
    a = symmetrize(np.atleast_2d(np.asarray(a, dtype=float)))
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    dim = a.shape[0]
    scale = max(np.trace(a) / dim, np.finfo(float).tiny)
    jitter = 1e-10 * scale
    for _ in range(12):
        try:
            return np.linalg.cholesky(a + jitter * np.eye(dim))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError("matrix is not positive definite even after jitter")


def ensure_pd(a):
    """Return ``a`` (symmetrized) with a small jitter added if it is not PD."""
    a = symmetrize(np.atleast_2d(np.asarray(a, dtype=float)))
    try:
        np.linalg.cholesky(a)
        return a
    except np.linalg.LinAlgError:
        dim = a.shape[0]
        return a + 1e-10 * max(np.trace(a) / dim, 1e-300) * np.eye(dim)


def block_diag(*blocks):
    blocks = [np.atleast_2d(b) for b in blocks]
    if not blocks:
        return np.zeros((0, 0))
    return sla.block_diag(*blocks)


def is_symmetric(a, tol=1e-12):
    a = np.atleast_2d(a)
    if a.shape[0] != a.shape[1]:
        return False
    scale = max(1.0, np.max(np.abs(a)))
    return bool(np.max(np.abs(a - a.T)) <= tol * scale)
