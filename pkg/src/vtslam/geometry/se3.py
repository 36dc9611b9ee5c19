"""Rigid-body transforms: unit-quaternion poses and the se(3) exponential map.

Twists are plain length-6 arrays ordered (omega, v). Tangent updates are
applied on the right: ``pose @ se3_exp(delta)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
NEAR_PI_MARGIN = 1e-6


class AngleNearPi(ValueError):
    pass


def hat(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def hat_batch(w: np.ndarray) -> np.ndarray:
    """Skew matrices for an (N, 3) array, shape (N, 3, 3)."""
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method, branch on the largest diagonal term
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


@dataclass(frozen=True, eq=False)
class Pose:
    """SE(3) element: rotation as unit quaternion (w, x, y, z), translation in meters."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        q = q / np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose":
        return cls(matrix_to_quat(np.asarray(R, dtype=float)), t)

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), t)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
        return cls(q, t)

    @classmethod
    def from_tuple(cls, values) -> "Pose":
        """Inverse of :meth:`as_tuple` (qw qx qy qz tx ty tz)."""
        v = np.asarray(values, dtype=float)
        return cls(v[:4], v[4:7])

    def as_tuple(self) -> tuple:
        return tuple(float(x) for x in np.concatenate([self.q, self.t]))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(quat_multiply(self.q, other.q), self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(qi, -(quat_to_matrix(qi) @ self.t))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.R.T + self.t

    def rotate(self, vecs: np.ndarray) -> np.ndarray:
        return np.asarray(vecs, dtype=float) @ self.R.T

    def angle(self) -> float:
        return 2.0 * np.arctan2(np.linalg.norm(self.q[1:]), abs(self.q[0]))

    def __repr__(self) -> str:
        return f"Pose(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def transform_points(pose: Pose, pts: np.ndarray) -> np.ndarray:
    return pose.apply(pts)


def _so3_coeffs(theta: float):
    """Coefficients a=(sin t)/t, b=(1-cos t)/t^2, c=(t-sin t)/t^3."""
    if theta < SMALL_ANGLE:
        return 1.0 - theta**2 / 6.0, 0.5 - theta**2 / 24.0, 1.0 / 6.0 - theta**2 / 120.0
    if theta < 1e-3:
        t2 = theta * theta
        return (1.0 - t2 / 6.0 + t2 * t2 / 120.0,
                0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0)
    s = np.sin(theta)
    return s / theta, 2.0 * np.sin(theta / 2) ** 2 / theta**2, (theta - s) / theta**3


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    _, b, c = _so3_coeffs(theta)
    W = hat(omega)
    return np.eye(3) + b * W + c * (W @ W)


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < 1e-3:
        d = 1.0 / 12.0 + theta**2 / 720.0
    else:
        d = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * W + d * (W @ W)


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    if theta < SMALL_ANGLE:
        q = np.concatenate([[1.0], 0.5 * omega])
    else:
        q = np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) / theta * omega])
    return Pose(q, so3_left_jacobian(omega) @ v)


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    w, vec = q[0], q[1:]
    if w < 0:
        w, vec = -w, -vec
    n = np.linalg.norm(vec)
    if n < SMALL_ANGLE:
        return 2.0 * vec / w
    return 2.0 * np.arctan2(n, w) / n * vec


def se3_log(p: Pose) -> np.ndarray:
    omega = so3_log_quat(p.q)
    if np.linalg.norm(omega) >= np.pi - NEAR_PI_MARGIN:
        raise AngleNearPi(f"rotation angle {np.linalg.norm(omega):.9f} too close to pi")
    return np.concatenate([omega, so3_left_jacobian_inv(omega) @ p.t])


def se3_ad(xi: np.ndarray) -> np.ndarray:
    """Adjoint of the Lie algebra element in (omega, v) ordering."""
    A = np.zeros((6, 6))
    W = hat(xi[:3])
    A[:3, :3] = W
    A[3:, :3] = hat(xi[3:])
    A[3:, 3:] = W
    return A


def se3_left_jacobian(xi: np.ndarray, tol: float = 1e-16, max_terms: int = 80) -> np.ndarray:
    """Left Jacobian J(xi) = sum_n ad^n / (n+1)!, summed until terms vanish."""
    ad = se3_ad(np.asarray(xi, dtype=float))
    J = np.eye(6)
    term = np.eye(6)
    for n in range(1, max_terms):
        term = term @ ad / (n + 1)
        J = J + term
        if np.abs(term).max() < tol:
            break
    return J


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def adjoint(p: Pose) -> np.ndarray:
    """Ad_T in (omega, v) ordering: maps a right twist to the equivalent left twist."""
    R = p.R
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, :3] = hat(p.t) @ R
    A[3:, 3:] = R
    return A


def random_pose(rng: np.random.Generator, max_angle: float = np.pi - 1e-3,
                max_trans: float = 1.0) -> Pose:
    axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle)
    return Pose.from_axis_angle(axis, angle, rng.uniform(-max_trans, max_trans, size=3))


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose (x right, y down, z forward) at ``position`` facing ``target``.

    Falls back to +x as the up vector when the view direction is parallel to ``up``.
    """
    position = np.asarray(position, dtype=float)
    f = np.asarray(target, dtype=float) - position
    f /= np.linalg.norm(f)
    up = np.asarray(up, dtype=float)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        r = np.cross(f, np.array([1.0, 0.0, 0.0]))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return Pose.from_rt(np.stack([r, d, f], axis=1), position)


def rotation_distance(a: Pose, b: Pose) -> float:
    return (a.inverse() @ b).angle()
