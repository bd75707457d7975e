"""Quasi-Newton update kernels.

``H`` always denotes an inverse-Hessian approximation.  Functions that only
need products ``H @ v`` accept either a dense array or an
:class:`LbfgsBuffer`, which implements ``@``.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import CurvatureConditionError, DegeneratePairError, DimensionError
from .linalg import spd_inverse, symmetrize

log = logging.getLogger(__name__)

DEFAULT_MU1 = 0.2


@dataclass
class CurvaturePair:
    s: np.ndarray
    y: np.ndarray
    theta1: float = 1.0
    theta2: float = 1.0
    skipped: bool = False


def bfgs_inverse_update(H, s, y):
    """BFGS update of the inverse approximation.

    ``H+ = (I - rho s y^T) H (I - rho y s^T) + rho s s^T`` expanded into
    rank-two form, then symmetrized.
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sy = float(s @ y)
    if not sy > 0.0:
        raise CurvatureConditionError(f"s^T y = {sy:.3e} is not positive")
    rho = 1.0 / sy
    hy = H @ y
    yhy = float(y @ hy)
    out = H - rho * (np.outer(s, hy) + np.outer(hy, s)) + (rho * rho * yhy + rho) * np.outer(s, s)
    return symmetrize(out)


def broyden_update(H, s, y, phi):
    """Broyden-family inverse update; ``phi=1`` is BFGS and ``phi=0`` is DFP."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sy = float(s @ y)
    hy = H @ y
    yhy = float(y @ hy)
    if not (sy > 0.0 and yhy > 0.0):
        raise CurvatureConditionError(f"degenerate denominators s^T y={sy:.3e}, y^T H y={yhy:.3e}")
    rho = 1.0 / sy
    sigma = 1.0 / yhy
    h = rho * s - sigma * hy
    out = H - sigma * np.outer(hy, hy) + rho * np.outer(s, s) + phi * yhy * np.outer(h, h)
    return symmetrize(out)


def sherman_morrison_rank1_inverse(H, a, c):
    """Return ``(H^{-1} + c a a^T)^{-1}`` given ``H``."""
    a = np.asarray(a, dtype=np.float64)
    ha = H @ a
    denom = 1.0 / c + float(a @ ha)
    return symmetrize(H - np.outer(ha, ha) / denom)


def powell_damp_H(s, y, H, mu1):
    """Powell damping of ``s`` against ``H``; returns ``(s_tilde, theta1)``."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.any(y):
        raise DegeneratePairError("y is zero")
    hy = H @ y
    yhy = float(y @ hy)
    sy = float(s @ y)
    if sy < mu1 * yhy:
        theta = (1.0 - mu1) * yhy / (yhy - sy)
        return theta * s + (1.0 - theta) * hy, theta
    return s.copy(), 1.0


def powell_damp_identity(s, y, mu2):
    """Powell damping of ``y`` with ``B = I``; returns ``(y_tilde, theta2)``."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.any(s):
        raise DegeneratePairError("damped s is zero")
    ss = float(s @ s)
    sy = float(s @ y)
    if sy < mu2 * ss:
        theta = (1.0 - mu2) * ss / (ss - sy)
        return theta * y + (1.0 - theta) * s, theta
    return y.copy(), 1.0


def powell_damp_B(s, y, B, mu):
    """Classical Powell damping of ``y`` against the Hessian approximation ``B``."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    bs = B @ s
    sbs = float(s @ bs)
    sy = float(s @ y)
    if sy < mu * sbs:
        theta = (1.0 - mu) * sbs / (sbs - sy)
        return theta * y + (1.0 - theta) * bs
    return y.copy()


def double_damp(s, y, H, mu1, mu2):
    """Damp against ``H`` with ``mu1``, then against the identity with ``mu2``."""
    s_t, theta1 = powell_damp_H(s, y, H, mu1)
    y_t, theta2 = powell_damp_identity(s_t, y, mu2)
    return CurvaturePair(s_t, y_t, theta1, theta2)


def curvature_ratio(pair, H):
    """``y^T H y / s^T y`` for a damped pair (``inf`` when ``s^T y <= 0``)."""
    sy = float(pair.s @ pair.y)
    if sy <= 0.0:
        return np.inf
    return float(pair.y @ (H @ pair.y)) / sy


def dd_skip_predicate(pair, H, mu1):
    """True when ``s^T y >= mu1 y^T H y``, i.e. the update may proceed."""
    if not np.any(pair.y):
        return False
    return float(pair.s @ pair.y) >= mu1 * float(pair.y @ (H @ pair.y))


class LbfgsBuffer:
    """Ring of at most ``capacity`` curvature pairs, oldest first.

    ``buf @ V`` applies the limited-memory inverse operator (initial
    matrix ``I``) through the compact representation.  ``S^T Y`` and
    ``Y^T Y`` are maintained incrementally on every push.
    """

    def __init__(self, capacity, dim=None):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.dim = dim
        self._S = None
        self._Y = None
        self._SY = np.zeros((0, 0))
        self._YY = np.zeros((0, 0))

    def __len__(self):
        return 0 if self._S is None else self._S.shape[1]

    @property
    def pairs(self):
        return [(self._S[:, i].copy(), self._Y[:, i].copy()) for i in range(len(self))]

    def push(self, pair):
        if isinstance(pair, CurvaturePair):
            if pair.skipped:
                raise ValueError("cannot push a skipped pair")
            s, y = pair.s, pair.y
        else:
            s, y = pair
        s = np.asarray(s, dtype=np.float64).copy()
        y = np.asarray(y, dtype=np.float64).copy()
        if s.shape != y.shape or s.ndim != 1:
            raise DimensionError("s and y must be equal-length vectors")
        if self.dim is None:
            self.dim = s.shape[0]
        elif s.shape[0] != self.dim:
            raise DimensionError(f"pair length {s.shape[0]} != buffer dim {self.dim}")
        sy = float(s @ y)
        if not sy > 0.0:
            raise CurvatureConditionError(f"s^T y = {sy:.3e} is not positive")
        if self.capacity == 0:
            return
        if self._S is None:
            self._S = s[:, None]
            self._Y = y[:, None]
            self._SY = np.array([[sy]])
            self._YY = np.array([[float(y @ y)]])
            return
        S, Y = self._S, self._Y
        k = S.shape[1]
        SY = np.empty((k + 1, k + 1))
        SY[:k, :k] = self._SY
        SY[:k, k] = S.T @ y
        SY[k, :k] = s @ Y
        SY[k, k] = sy
        YY = np.empty((k + 1, k + 1))
        YY[:k, :k] = self._YY
        yY = Y.T @ y
        YY[:k, k] = yY
        YY[k, :k] = yY
        YY[k, k] = float(y @ y)
        S = np.hstack([S, s[:, None]])
        Y = np.hstack([Y, y[:, None]])
        if k + 1 > self.capacity:
            S, Y, SY, YY = S[:, 1:], Y[:, 1:], SY[1:, 1:], YY[1:, 1:]
        self._S = np.ascontiguousarray(S)
        self._Y = np.ascontiguousarray(Y)
        self._SY, self._YY = SY, YY

    def apply_compact(self, V):
        """Return ``H @ V`` for a vector or a matrix with ``dim`` rows."""
        V = np.asarray(V, dtype=np.float64)
        if len(self) == 0:
            return V.copy()
        if V.shape[0] != self.dim:
            raise DimensionError(f"operand has {V.shape[0]} rows, buffer dim is {self.dim}")
        S, Y = self._S, self._Y
        R = np.triu(self._SY)
        D = np.diag(np.diag(self._SY))
        StV = S.T @ V
        YtV = Y.T @ V
        with np.errstate(all="ignore"):
            Z = scipy.linalg.solve_triangular(R, StV, lower=False, check_finite=False)
            W = scipy.linalg.solve_triangular(
                R, (D + self._YY) @ Z - YtV, lower=False, trans="T", check_finite=False
            )
        if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(W))):
            log.warning("compact L-BFGS middle system is singular; using two-loop recursion")
            if V.ndim == 1:
                return self.apply_two_loop(V)
            return np.column_stack([self.apply_two_loop(V[:, j]) for j in range(V.shape[1])])
        return V + S @ W - Y @ Z

    def __matmul__(self, V):
        return self.apply_compact(V)

    def apply_two_loop(self, v):
        """Classical two-loop recursion with ``H0 = I``."""
        q = np.array(v, dtype=np.float64)
        k = len(self)
        alphas = np.empty(k)
        rhos = np.empty(k)
        for i in range(k - 1, -1, -1):
            s, y = self._S[:, i], self._Y[:, i]
            rhos[i] = 1.0 / float(s @ y)
            alphas[i] = rhos[i] * float(s @ q)
            q -= alphas[i] * y
        r = q
        for i in range(k):
            s, y = self._S[:, i], self._Y[:, i]
            beta = rhos[i] * float(y @ r)
            r += (alphas[i] - beta) * s
        return r

    def to_dense(self):
        """Materialize the operator as a ``dim x dim`` matrix."""
        return symmetrize(self.apply_compact(np.eye(self.dim)))


def lbfgs_push(buf, pair):
    buf.push(pair)


def lbfgs_apply_compact(buf, V):
    return buf.apply_compact(V)


def lbfgs_apply_two_loop(buf, v):
    return buf.apply_two_loop(v)


@dataclass
class HessianActionState:
    """Moving-average activation factor ``A`` and its BFGS inverse ``Ha``."""

    A: np.ndarray
    Ha: np.ndarray
    lambda_a: float
    beta: float = 0.9

    @classmethod
    def warm(cls, A, lambda_a, beta=0.9):
        """Start from the exact damped inverse ``(A + lambda_a I)^{-1}``."""
        A = symmetrize(np.asarray(A, dtype=np.float64))
        Ha = spd_inverse(A + lambda_a * np.eye(A.shape[0]))
        return cls(A=A, Ha=Ha, lambda_a=lambda_a, beta=beta)


def hessian_action_step(state, a_outer_mean, a_bar):
    """Fold a new batch into ``A`` and update ``Ha`` by Hessian-action BFGS.

    Returns ``True`` if ``Ha`` was updated.  ``Ha`` is not rescaled by
    ``1/beta`` before the update.
    """
    a_bar = np.asarray(a_bar, dtype=np.float64)
    if not np.any(a_bar):
        return False
    state.A = symmetrize(state.beta * state.A + (1.0 - state.beta) * a_outer_mean)
    s = state.Ha @ a_bar
    y = state.A @ s + state.lambda_a * s
    try:
        state.Ha = bfgs_inverse_update(state.Ha, s, y)
    except CurvatureConditionError:
        return False
    return True
