"""Dense float64 linear algebra used by the optimizers.

Matrices and vectors are plain ``numpy.ndarray`` objects.  Every public
function copies or allocates; none mutates its inputs.
"""

import numpy as np
import scipy.linalg

from .errors import (
    DimensionError,
    EmptyBatchError,
    NotPositiveDefiniteError,
    NotSymmetricError,
)

PIVOT_FLOOR = 1e-300
SYMMETRY_TOL = 1e-10


def _as_matrix(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def symmetrize(a):
    return 0.5 * (a + a.T)


def gemm(a, b, transpose_a=False, transpose_b=False):
    """Matrix product ``op(a) @ op(b)`` with optional transposes."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if transpose_a:
        a = a.T
    if transpose_b:
        b = b.T
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def batch_outer_mean(columns):
    """Mean of ``a_i a_i^T`` over the rows (samples) of ``columns``.

    ``columns`` is either a sequence of equal-length vectors or an
    ``(m, d)`` array whose rows are the vectors.
    """
    x = np.asarray(columns, dtype=np.float64)
    if x.size == 0 or len(x) == 0:
        raise EmptyBatchError("batch_outer_mean needs at least one vector")
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"expected a batch of vectors, got shape {x.shape}")
    out = (x.T @ x) / x.shape[0]
    return symmetrize(out)


def spd_inverse(a):
    """Inverse of a symmetric positive definite matrix via Cholesky."""
    a = _as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"spd_inverse needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefiniteError("matrix has non-finite entries")
    try:
        c, lower = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from None
    pivots = np.diag(c)
    if not np.all(np.isfinite(pivots)) or np.any(pivots <= PIVOT_FLOOR):
        raise NotPositiveDefiniteError("Cholesky pivot is not positive")
    inv = scipy.linalg.cho_solve((c, lower), np.eye(a.shape[0]), check_finite=False)
    return symmetrize(inv)


def kron_sandwich(hg, v, ha):
    """Return ``hg @ v @ ha``.

    With column-stacking ``vec``, ``vec(hg V ha) = (ha^T kron hg) vec(V)``,
    which is ``(ha kron hg) vec(V)`` for symmetric ``ha``.
    """
    hg = _as_matrix(hg, "hg")
    v = _as_matrix(v, "v")
    ha = _as_matrix(ha, "ha")
    if hg.shape != (v.shape[0], v.shape[0]) or ha.shape != (v.shape[1], v.shape[1]):
        raise DimensionError(
            f"factor shapes {hg.shape}, {ha.shape} do not fit V of shape {v.shape}"
        )
    # associate so the larger dimension is multiplied once
    if v.shape[0] >= v.shape[1]:
        return hg @ (v @ ha)
    return (hg @ v) @ ha


def vec(m):
    """Column-stacking vectorization."""
    return np.asarray(m).reshape(-1, order="F")


def unvec(v, rows, cols):
    return np.asarray(v).reshape((rows, cols), order="F")


def check_symmetric(a, tol=SYMMETRY_TOL):
    a = _as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise NotSymmetricError(f"matrix of shape {a.shape} is not square")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > tol * scale:
        raise NotSymmetricError("matrix is not symmetric within tolerance")
    return a


def extreme_eigenvalue_estimate(a, which):
    """Smallest (``which='min'``) or largest (``'max'``) eigenvalue of ``a``.

    Uses a full symmetric eigensolve restricted to one index, so the
    answer is accurate to working precision.
    """
    a = check_symmetric(a)
    n = a.shape[0]
    if which == "min":
        idx = (0, 0)
    elif which == "max":
        idx = (n - 1, n - 1)
    else:
        raise ValueError(f"which must be 'min' or 'max', not {which!r}")
    w = scipy.linalg.eigh(
        symmetrize(a), eigvals_only=True, subset_by_index=idx, check_finite=False
    )
    return float(w[0])
