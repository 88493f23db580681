"""Small dense linear algebra kernels.

Matrices are plain ``float64`` numpy arrays. LAPACK does the heavy lifting;
this module pins down the contracts the integrator relies on: orthonormal
output even for rank-deficient input, sorted singular values and a fixed sign
convention so that trajectories are reproducible run to run.
"""

from typing import NamedTuple

import numpy as np

from .errors import InvalidArgument


class SvdResult(NamedTuple):
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray


def as_matrix(a, name="matrix"):
    """Coerce to a finite 2-D float64 array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidArgument(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument(f"{name} contains non-finite entries")
    return a


def qr_orthonormalize(a):
    """Orthonormalize the columns of an n x k matrix (k <= n).

    Householder QR, with the sign of each column chosen so that the diagonal
    of R is non-negative. Columns that are linearly dependent on earlier ones
    still come back as unit vectors orthogonal to everything before them, so
    the result always satisfies ``Q.T @ Q = I``.
    """
    a = as_matrix(a, "A")
    n, k = a.shape
    if k > n:
        raise InvalidArgument(f"cannot orthonormalize {k} columns in dimension {n}")
    q, r = np.linalg.qr(a, mode="reduced")
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return q * signs


def orthonormal_complement(basis, directions):
    """Orthonormal columns orthogonal to ``basis`` whose span covers ``directions``.

    ``basis`` (n x r) must be orthonormal. Returns ``min(c, n - r)`` columns
    for ``c`` direction columns. Directions already inside ``range(basis)``
    contribute an arbitrary (but deterministic) orthonormal completion.
    """
    n, r = basis.shape
    c = directions.shape[1]
    if n - r <= 0 or c == 0:
        return np.zeros((n, 0))
    if r + c <= n:
        tilde = qr_orthonormalize(np.hstack([basis, directions]))[:, r:]
    else:
        # not enough room: the complement of range(basis) is the answer
        q, _ = np.linalg.qr(basis, mode="complete")
        tilde = q[:, r:]
    # second Gram-Schmidt pass against the basis, then re-normalize
    tilde = tilde - basis @ (basis.T @ tilde)
    return qr_orthonormalize(tilde)


def _fix_signs(u, vt):
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def svd(a):
    """Thin SVD with non-increasing singular values.

    Sign convention: the largest-magnitude entry of every left singular vector
    is positive (the right vector is flipped along with it).
    """
    a = as_matrix(a, "A")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails on badly scaled input; retry rescaled
        scale = np.max(np.abs(a))
        u, s, vt = np.linalg.svd(a / scale, full_matrices=False)
        s = s * scale
    u, vt = _fix_signs(u, vt)
    return SvdResult(u, s, vt.T)


def frobenius_norm(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def orthonormality_error(q):
    """``||Q^T Q - I||_F``."""
    if q.shape[1] == 0:
        return 0.0
    return frobenius_norm(q.T @ q - np.eye(q.shape[1]))
