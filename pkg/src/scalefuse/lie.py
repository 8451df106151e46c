"""Sim(3) similarity transforms and the sim(3) Lie algebra.

Tangent vectors are ordered ``(omega, upsilon, sigma)``: rotation vector,
translation part, log-scale. The 4x4 homogeneous form of an element is
``[[s R, t], [0, 1]]`` and of a tangent ``[[hat(omega) + sigma I, upsilon], [0, 0]]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np
import scipy.linalg

# Below this rotation angle the closed forms switch to their theta -> 0 limits.
SMALL = 1e-5
# Joint (angle, log-scale) radius inside which W is summed as a power series.
SERIES_SWITCH = 0.05
# Rotation angles closer than this to pi make the logarithm ill-conditioned.
PI_MARGIN = 1e-6
# Even Bernoulli numbers used by the right-Jacobian-inverse series (B_1 handled apart).
_BERNOULLI = {0: 1.0, 2: 1.0 / 6.0, 4: -1.0 / 30.0, 6: 1.0 / 42.0, 8: -1.0 / 30.0,
              10: 5.0 / 66.0, 12: -691.0 / 2730.0}
SERIES_ORDER = 8
SERIES_RADIUS = 1.0


class IllConditionedLogError(ValueError):
    """Raised when the rotation angle is too close to pi for a stable logarithm."""


class SeriesDivergenceError(ValueError):
    """Raised when a tangent lies outside the Bernoulli-series validity radius."""


def hat3(v):
    """Skew-symmetric matrix ``[v]x`` such that ``hat3(a) @ b == cross(a, b)``."""
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def vee3(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega):
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    K = hat3(omega)
    if theta < SMALL:
        K2 = K @ K
        return np.eye(3) + (1.0 - theta**2 / 6.0) * K + (0.5 - theta**2 / 24.0) * K2
    return (np.eye(3) + (np.sin(theta) / theta) * K
            + ((1.0 - np.cos(theta)) / theta**2) * (K @ K))


def so3_log(R):
    """Rotation vector of ``R``; raises near angle pi."""
    sin_vec = 0.5 * vee3(R - R.T)
    sin_theta = float(np.linalg.norm(sin_vec))
    cos_theta = float(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0))
    theta = np.arctan2(sin_theta, cos_theta)
    if theta > np.pi - PI_MARGIN:
        raise IllConditionedLogError(f"rotation angle {theta:.9f} rad too close to pi")
    if theta < SMALL:
        return sin_vec * (1.0 + theta**2 / 6.0)
    return sin_vec * (theta / sin_theta)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix in radians, valid on all of [0, pi]."""
    sin_theta = float(np.linalg.norm(0.5 * vee3(R - R.T)))
    cos_theta = float(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0))
    return float(np.arctan2(sin_theta, cos_theta))


def orthonormalize(R):
    """One Newton step of the polar decomposition; bounds drift after products."""
    return 0.5 * R @ (3.0 * np.eye(3) - R.T @ R)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def _coupling_matrix(omega, sigma):
    """The matrix W with ``t = W @ upsilon`` in the exponential map.

    W is the integral of ``exp(tau * (hat(omega) + sigma I))`` over tau in [0, 1].
    """
    theta = float(np.linalg.norm(omega))
    K = hat3(omega)
    if np.hypot(theta, sigma) < SERIES_SWITCH:
        # sum_k A^k / (k+1)!, truncation below 1e-20 in this disc
        A = K + sigma * np.eye(3)
        W = np.eye(3)
        term = np.eye(3)
        for k in range(1, 12):
            term = term @ A / (k + 1)
            W = W + term
        return W
    K2 = K @ K
    es = np.exp(sigma)
    c = np.expm1(sigma) / sigma if sigma != 0.0 else 1.0
    if theta < SMALL:
        a = (1.0 + (sigma - 1.0) * es) / sigma**2
        b = (es * (0.5 * sigma**2 - sigma + 1.0) - 1.0) / sigma**3
    else:
        st, ct = np.sin(theta), np.cos(theta)
        den = theta**2 + sigma**2
        a = (es * sigma * st + theta * (1.0 - es * ct)) / (theta * den)
        b = (c - (sigma * (es * ct - 1.0) + es * theta * st) / den) / theta**2
    return c * np.eye(3) + a * K + b * K2


@dataclass(frozen=True, eq=False)
class Sim3:
    """An immutable similarity transform acting as ``p -> s R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        s = float(self.scale)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not s > 0.0 or not np.isfinite(s):
            raise ValueError(f"scale must be positive and finite, got {s}")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), 1.0)

    @classmethod
    def from_matrix(cls, M):
        """Build from a 4x4 matrix ``[[s R, t], [0, 1]]``."""
        M = np.asarray(M, dtype=float)
        sR = M[:3, :3]
        s = float(np.cbrt(np.linalg.det(sR)))
        return cls(sR / s, M[:3, 3], s)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def __matmul__(self, other):
        if isinstance(other, Sim3):
            return compose(self, other)
        return act(self, other)

    def inverse(self):
        return inverse(self)

    def log(self):
        return log(self)

    def __repr__(self):
        return (f"Sim3(rotvec={np.round(so3_log_safe(self.rotation), 6).tolist()}, "
                f"t={np.round(self.translation, 6).tolist()}, s={self.scale:.6g})")

    def equals(self, other):
        """Bit-exact equality of all components."""
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation)
                and self.scale == other.scale)


def so3_log_safe(R):
    try:
        return so3_log(R)
    except IllConditionedLogError:
        return np.full(3, np.nan)


def compose(a: Sim3, b: Sim3) -> Sim3:
    R = orthonormalize(a.rotation @ b.rotation)
    t = a.scale * (a.rotation @ b.translation) + a.translation
    return Sim3(R, t, a.scale * b.scale)


def inverse(T: Sim3) -> Sim3:
    Rt = T.rotation.T
    return Sim3(Rt, -(Rt @ T.translation) / T.scale, 1.0 / T.scale)


def act(T: Sim3, p):
    """Apply ``T`` to a point (shape (3,)) or an array of points (shape (n, 3))."""
    p = np.asarray(p, dtype=float)
    return T.scale * (p @ T.rotation.T) + T.translation


def exp(xi) -> Sim3:
    xi = np.asarray(xi, dtype=float)
    omega, upsilon, sigma = xi[:3], xi[3:6], float(xi[6])
    R = so3_exp(omega)
    W = _coupling_matrix(omega, sigma)
    return Sim3(R, W @ upsilon, np.exp(sigma))


def log(T: Sim3):
    omega = so3_log(T.rotation)
    sigma = np.log(T.scale)
    W = _coupling_matrix(omega, sigma)
    upsilon = np.linalg.solve(W, T.translation)
    return np.concatenate([omega, upsilon, [sigma]])


def hat(xi):
    """4x4 homogeneous matrix of a tangent vector."""
    xi = np.asarray(xi, dtype=float)
    M = np.zeros((4, 4))
    M[:3, :3] = hat3(xi[:3]) + xi[6] * np.eye(3)
    M[:3, 3] = xi[3:6]
    return M


def vee(M):
    """Inverse of :func:`hat` for matrices of that form."""
    A = M[:3, :3]
    sigma = np.trace(A) / 3.0
    return np.concatenate([vee3(0.5 * (A - A.T)), M[:3, 3], [sigma]])


def adjoint(T: Sim3):
    """Group adjoint ``Ad_T`` with ``exp(Ad_T xi) == T exp(xi) T^-1``."""
    R, t, s = T.rotation, T.translation, T.scale
    Ad = np.zeros((7, 7))
    Ad[:3, :3] = R
    Ad[3:6, :3] = hat3(t) @ R
    Ad[3:6, 3:6] = s * R
    Ad[3:6, 6] = -t
    Ad[6, 6] = 1.0
    return Ad


def algebra_adjoint(xi):
    """Lie-algebra adjoint ``ad_xi`` with ``ad_xi @ eta == [xi, eta]``."""
    xi = np.asarray(xi, dtype=float)
    W = hat3(xi[:3])
    ad = np.zeros((7, 7))
    ad[:3, :3] = W
    ad[3:6, :3] = hat3(xi[3:6])
    ad[3:6, 3:6] = W + xi[6] * np.eye(3)
    ad[3:6, 6] = -xi[3:6]
    return ad


def _series_coefficients(order):
    coeffs = {0: 1.0, 1: 0.5}
    for n in range(2, order + 1, 2):
        coeffs[n] = _BERNOULLI[n] / factorial(n)
    return coeffs


def right_jacobian_inverse(xi, order=SERIES_ORDER, radius=SERIES_RADIUS):
    """Bernoulli series ``I + ad/2 + ad^2/12 - ad^4/720 + ...`` through ``ad^order``.

    Satisfies ``log(exp(xi) @ exp(d)) ~= xi + J @ d`` for small ``d``.
    """
    xi = np.asarray(xi, dtype=float)
    norm = float(np.linalg.norm(xi))
    if norm > radius:
        raise SeriesDivergenceError(f"|xi| = {norm:.4g} exceeds series radius {radius}")
    if order % 2 or order < 2 or order > max(_BERNOULLI):
        raise ValueError("order must be an even integer in [2, 12]")
    ad = algebra_adjoint(xi)
    J = np.eye(7)
    power = np.eye(7)
    coeffs = _series_coefficients(order)
    for n in range(1, order + 1):
        power = power @ ad
        if n in coeffs:
            J = J + coeffs[n] * power
    return J


def right_jacobian(xi):
    """Exact right Jacobian ``integral of exp(-tau ad_xi)`` over tau in [0, 1]."""
    ad = algebra_adjoint(xi)
    block = np.zeros((14, 14))
    block[:7, :7] = -ad
    block[:7, 7:] = np.eye(7)
    return scipy.linalg.expm(block)[:7, 7:]


def right_jacobian_inverse_exact(xi):
    """Matrix inverse of :func:`right_jacobian`; valid wherever that is invertible."""
    return np.linalg.inv(right_jacobian(xi))


def jr_inv(xi):
    """Series inside its radius, exact inverse outside."""
    try:
        return right_jacobian_inverse(xi)
    except SeriesDivergenceError:
        return right_jacobian_inverse_exact(xi)


def random_sim3(rng, rot_scale=1.0, trans_scale=1.0, log_scale_std=0.5):
    """Random element for tests and simulation."""
    omega = rng.normal(size=3)
    omega *= rng.uniform(0, min(rot_scale, 3.0)) / max(np.linalg.norm(omega), 1e-12)
    return Sim3(so3_exp(omega), rng.normal(scale=trans_scale, size=3),
                float(np.exp(rng.normal(scale=log_scale_std))))
