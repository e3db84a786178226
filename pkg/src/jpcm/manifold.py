"""SO(3) / SE(3) helpers.

Rotations are plain ``(3, 3)`` numpy arrays; every function here also accepts
stacked inputs with arbitrary leading dimensions (``(..., 3)`` vectors,
``(..., 3, 3)`` matrices) so factor batches can be evaluated without Python
loops.

Perturbations are always applied on the right: ``R <- R @ exp_so3(d)``.
Tangent vectors of SE(3) are ordered ``(rotation, translation)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
NEAR_PI_MARGIN = 1e-6
ORTHO_TOL = 1e-9


class NearPiLogError(ArithmeticError):
    """Raised when a rotation log is requested for an angle too close to pi."""

    def __init__(self, angle: float):
        super().__init__(f"rotation log near pi (angle={angle:.9f} rad)")
        self.angle = angle


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew` (uses the antisymmetric part)."""
    m = np.asarray(m, dtype=float)
    return 0.5 * np.stack(
        [m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]],
        axis=-1,
    )


def _angle_coeffs(theta: np.ndarray):
    """(sin t / t, (1 - cos t) / t^2) with a series fallback near zero."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = t * t
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    # half-angle form avoids the cancellation in 1 - cos t
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * np.sin(0.5 * t) ** 2 / t2)
    return a, b


def exp_so3(theta: np.ndarray) -> np.ndarray:
    """Rodrigues' formula."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)
    a, b = _angle_coeffs(angle)
    K = skew(theta)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rotation_angle(R: np.ndarray) -> np.ndarray:
    """Angle of ``R`` in [0, pi], computed with atan2 for accuracy at both ends."""
    R = np.asarray(R, dtype=float)
    s = np.linalg.norm(vee(R), axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(s, c)


def log_so3(R: np.ndarray, check: bool = True) -> np.ndarray:
    """Principal logarithm of a rotation matrix.

    Raises :class:`NearPiLogError` when the angle is within ``1e-6`` of pi,
    unless ``check`` is False (then the result near pi is unreliable).
    """
    R = np.asarray(R, dtype=float)
    angle = rotation_angle(R)
    if check and np.any(angle >= np.pi - NEAR_PI_MARGIN):
        raise NearPiLogError(float(np.max(angle)))
    w = vee(R)
    small = angle < SMALL_ANGLE
    t = np.where(small, 1.0, angle)
    scale = np.where(small, 1.0 + angle**2 / 6.0, t / np.sin(t))
    return scale[..., None] * w


def right_jacobian(theta: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): exp(t + d) ~= exp(t) exp(Jr(t) d)."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)
    small = angle < 1e-5
    t = np.where(small, 1.0, angle)
    b = np.where(small, 0.5 - angle**2 / 24.0, 2.0 * np.sin(0.5 * t) ** 2 / t**2)
    c = np.where(small, 1.0 / 6.0 - angle**2 / 120.0, (t - np.sin(t)) / t**3)
    K = skew(theta)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - b[..., None, None] * K + c[..., None, None] * (K @ K)


def right_jacobian_inv(theta: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: log(exp(t) exp(d)) ~= t + Jr^-1(t) d."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)
    small = angle < 1e-5
    t = np.where(small, 1.0, angle)
    # 1/t^2 - (1 + cos t) / (2 t sin t), series 1/12 + t^2/720
    d = np.where(
        small,
        1.0 / 12.0 + angle**2 / 720.0,
        1.0 / t**2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)),
    )
    K = skew(theta)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + 0.5 * K + d[..., None, None] * (K @ K)


def orthonormality_error(R: np.ndarray) -> float:
    R = np.asarray(R, dtype=float)
    return float(np.max(np.linalg.norm(np.swapaxes(R, -1, -2) @ R - np.eye(3), axis=(-2, -1))))


def normalize_rotation(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def so3_compose(A: np.ndarray, B: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    """``A @ B``, re-orthonormalized when drift exceeds ``tol``."""
    C = A @ B
    if orthonormality_error(C) > tol:
        C = normalize_rotation(C)
    return C


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping body coordinates into the parent frame."""

    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


def pose_compose(a: Pose, b: Pose) -> Pose:
    return Pose(so3_compose(a.R, b.R), a.R @ b.t + a.t)


def pose_inverse(a: Pose) -> Pose:
    Rt = a.R.T
    return Pose(Rt, -Rt @ a.t)


def _se3_v(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3), the V matrix of the SE(3) exponential."""
    angle = np.linalg.norm(phi, axis=-1)
    a, b = _angle_coeffs(angle)
    small = angle < 1e-5
    t = np.where(small, 1.0, angle)
    c = np.where(small, 1.0 / 6.0 - angle**2 / 120.0, (t - np.sin(t)) / t**3)
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def pose_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    return Pose(exp_so3(phi), _se3_v(phi) @ rho)


def pose_log(a: Pose) -> np.ndarray:
    """SE(3) logarithm, returned as ``[phi, rho]``."""
    phi = log_so3(a.R)
    V = _se3_v(phi)
    rho = np.linalg.solve(V, a.t)
    return np.concatenate([phi, rho])


def se3_adjoint(a: Pose) -> np.ndarray:
    """Adjoint for ``(rotation, translation)`` ordered twists."""
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = a.R
    Ad[3:, 3:] = a.R
    Ad[3:, :3] = skew(a.t) @ a.R
    return Ad


def _se3_q(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Off-diagonal block of the SE(3) left Jacobian."""
    angle = float(np.linalg.norm(phi))
    P, Rh = skew(phi), skew(rho)
    if angle < 1e-4:
        c1, c2, c3 = 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0
    else:
        t = angle
        s, c = np.sin(t), np.cos(t)
        c1 = (t - s) / t**3
        c2 = (t * t + 2.0 * c - 2.0) / (2.0 * t**4)
        c3 = (2.0 * t - 3.0 * s + t * c) / (2.0 * t**5)
    PR, RP, PRP = P @ Rh, Rh @ P, P @ Rh @ P
    return (
        0.5 * Rh
        + c1 * (PR + RP + PRP)
        + c2 * (P @ PR + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + P @ PRP)
    )


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SE(3): log(T exp(d)) ~= xi + J^-1 d."""
    # J_r(xi) = J_l(-xi)
    Jinv = right_jacobian_inv(xi[:3])
    Q = _se3_q(-xi[:3], -xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ Q @ Jinv
    return out
