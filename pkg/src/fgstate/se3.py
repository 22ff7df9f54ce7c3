"""Rotation and rigid-transform algebra on SO(3) and SE(3).

Conventions used throughout the package:

- A ``Rot3`` stored on a state is ``world_from_body``: ``R @ v_body`` gives the
  vector in world axes. The inverse view (world to body) is ``R.inverse()``.
- Quaternions are Hamilton, scalar first ``(w, x, y, z)``.
- Rotation perturbations are applied on the right: ``R * exp(dtheta)``.
- Twists are ordered rotation first: ``(wx, wy, wz, vx, vy, vz)``.
- Euler angles are reported as ZYX yaw-pitch-roll.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Return the 3x3 cross-product matrix of ``v``."""
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_mul(a: tuple, b: tuple) -> tuple:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def _normalized(q: tuple) -> tuple:
    w, x, y, z = q
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n == 0.0 or not math.isfinite(n):
        raise ValueError(f"cannot normalize quaternion {q}")
    if w < 0.0:
        n = -n
    return (w / n, x / n, y / n, z / n)


@dataclass(frozen=True, eq=False)
class Rot3:
    """Unit-quaternion rotation. Matrix view is computed on demand and cached."""

    q: tuple = (1.0, 0.0, 0.0, 0.0)
    _m: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "q", _normalized(tuple(float(c) for c in self.q)))

    @classmethod
    def identity(cls) -> Rot3:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> Rot3:
        """Shepperd's method: branch on the largest of trace and diagonal."""
        m = np.asarray(m, dtype=float)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        branch = int(np.argmax([tr, m[0, 0], m[1, 1], m[2, 2]]))
        if branch == 0:
            s = 2.0 * math.sqrt(1.0 + tr)
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif branch == 1:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif branch == 2:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return cls(q)

    @classmethod
    def from_ypr(cls, yaw: float, pitch: float = 0.0, roll: float = 0.0) -> Rot3:
        """ZYX Euler angles: ``Rz(yaw) * Ry(pitch) * Rx(roll)``."""
        cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
        cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
        cr, sr = math.cos(roll / 2), math.sin(roll / 2)
        return cls(
            (
                cy * cp * cr + sy * sp * sr,
                cy * cp * sr - sy * sp * cr,
                cy * sp * cr + sy * cp * sr,
                sy * cp * cr - cy * sp * sr,
            )
        )

    @classmethod
    def yaw_rotation(cls, yaw: float) -> Rot3:
        return cls((math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)))

    def matrix(self) -> np.ndarray:
        if self._m is None:
            w, x, y, z = self.q
            m = np.array(
                [
                    [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                    [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                    [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
                ]
            )
            m.flags.writeable = False
            object.__setattr__(self, "_m", m)
        return self._m

    def __mul__(self, other: Rot3) -> Rot3:
        return Rot3(_quat_mul(self.q, other.q))

    def inverse(self) -> Rot3:
        w, x, y, z = self.q
        return Rot3((w, -x, -y, -z))

    def rotate(self, v) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def unrotate(self, v) -> np.ndarray:
        return self.matrix().T @ np.asarray(v, dtype=float)

    def log(self) -> np.ndarray:
        return so3_log(self)

    def yaw(self) -> float:
        m = self.matrix()
        return math.atan2(m[1, 0], m[0, 0])

    def pitch(self) -> float:
        m = self.matrix()
        return math.asin(max(-1.0, min(1.0, -m[2, 0])))

    def roll(self) -> float:
        m = self.matrix()
        return math.atan2(m[2, 1], m[2, 2])

    def ypr(self) -> np.ndarray:
        return np.array([self.yaw(), self.pitch(), self.roll()])

    def as_array(self) -> np.ndarray:
        return np.array(self.q)

    def __repr__(self) -> str:
        return "Rot3(w={:.6g}, x={:.6g}, y={:.6g}, z={:.6g})".format(*self.q)


def so3_exp(omega) -> Rot3:
    """Rotation by ``|omega|`` radians about ``omega / |omega|``."""
    wx, wy, wz = (float(c) for c in omega)
    if not (math.isfinite(wx) and math.isfinite(wy) and math.isfinite(wz)):
        raise ValueError(f"so3_exp of non-finite tangent {omega!r}")
    theta2 = wx * wx + wy * wy + wz * wz
    theta = math.sqrt(theta2)
    if theta < SMALL_ANGLE:
        c = 1.0 - theta2 / 8.0
        s = 0.5 - theta2 / 48.0
    else:
        c = math.cos(0.5 * theta)
        s = math.sin(0.5 * theta) / theta
    return Rot3((c, s * wx, s * wy, s * wz))


def so3_log(r: Rot3) -> np.ndarray:
    """Principal axis-angle vector of ``r``; the norm never exceeds pi."""
    w, x, y, z = r.q  # normalized with w >= 0
    n = math.sqrt(x * x + y * y + z * z)
    if n < SMALL_ANGLE:
        k = 2.0 / w * (1.0 - n * n / (3.0 * w * w))
    else:
        k = 2.0 * math.atan2(n, w) / n
    return np.array([k * x, k * y, k * z])


# Series switch for the Jacobian coefficients: the closed forms lose about
# eps / theta^2 to cancellation, the truncated series errs by theta^6.
_SERIES_THETA2 = 1e-6


def _jacobian_coeffs(theta2: float) -> tuple[float, float]:
    if theta2 < _SERIES_THETA2:
        return 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0, 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    theta = math.sqrt(theta2)
    return (1.0 - math.cos(theta)) / theta2, (theta - math.sin(theta)) / (theta2 * theta)


def so3_right_jacobian(omega) -> np.ndarray:
    """``Jr`` with ``exp(omega + d) ~= exp(omega) * exp(Jr @ d)``."""
    omega = np.asarray(omega, dtype=float)
    a, b = _jacobian_coeffs(float(omega @ omega))
    k = skew(omega)
    return np.eye(3) - a * k + b * (k @ k)


def so3_left_jacobian(omega) -> np.ndarray:
    """``Jl`` with ``exp(omega + d) ~= exp(Jl @ d) * exp(omega)``."""
    omega = np.asarray(omega, dtype=float)
    a, b = _jacobian_coeffs(float(omega @ omega))
    k = skew(omega)
    return np.eye(3) + a * k + b * (k @ k)


def so3_right_jacobian_inv(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    k = skew(omega)
    if theta2 < _SERIES_THETA2:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        theta = math.sqrt(theta2)
        c = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * k + c * (k @ k)


class Pose3:
    """Rigid transform ``a_from_b``: maps points in frame b to frame a."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rot3 | None = None, translation=None):
        self.rotation = rotation if rotation is not None else Rot3()
        t = np.zeros(3) if translation is None else np.array(translation, dtype=float).reshape(3)
        t.flags.writeable = False
        self.translation = t

    @classmethod
    def identity(cls) -> Pose3:
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> Pose3:
        return cls(Rot3(), (x, y, z))

    @classmethod
    def from_matrix(cls, m) -> Pose3:
        m = np.asarray(m, dtype=float)
        return cls(Rot3.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def exp(cls, xi) -> Pose3:
        """SE(3) exponential of a rotation-first twist."""
        xi = np.asarray(xi, dtype=float)
        omega, rho = xi[:3], xi[3:]
        return cls(so3_exp(omega), so3_left_jacobian(omega) @ rho)

    def log(self) -> np.ndarray:
        omega = so3_log(self.rotation)
        rho = np.linalg.solve(so3_left_jacobian(omega), self.translation)
        return np.concatenate([omega, rho])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def compose(self, other: Pose3) -> Pose3:
        return Pose3(self.rotation * other.rotation, self.translation + self.rotation.rotate(other.translation))

    __mul__ = compose

    def inverse(self) -> Pose3:
        rinv = self.rotation.inverse()
        return Pose3(rinv, -rinv.rotate(self.translation))

    def between(self, other: Pose3) -> Pose3:
        """``inverse(self) * other``."""
        return pose_between(self, other)

    def transform_point(self, p) -> np.ndarray:
        return self.rotation.rotate(p) + self.translation

    def transform_points(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        return pts @ self.rotation.matrix().T + self.translation

    def __repr__(self) -> str:
        t = self.translation
        return f"Pose3({self.rotation!r}, t=({t[0]:.6g}, {t[1]:.6g}, {t[2]:.6g}))"


def pose_compose(a: Pose3, b: Pose3) -> Pose3:
    return a.compose(b)


def pose_inverse(a: Pose3) -> Pose3:
    return a.inverse()


def pose_between(a: Pose3, b: Pose3) -> Pose3:
    ainv = a.rotation.inverse()
    return Pose3(ainv * b.rotation, ainv.rotate(b.translation - a.translation))


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def random_rotation(rng: np.random.Generator) -> Rot3:
    q = rng.standard_normal(4)
    return Rot3(tuple(q))


# Batched SO(3) helpers over a leading axis, used by the vectorized factor paths.


def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _coeffs_batch(theta2: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``sin(t)/t``, ``(1 - cos t)/t^2`` and ``(t - sin t)/t^3`` with series near zero."""
    small = theta2 < _SERIES_THETA2
    t2 = np.where(small, 1.0, theta2)
    t = np.sqrt(t2)
    s, c = np.sin(t), np.cos(t)
    c1 = np.where(small, 1.0 - theta2 / 6.0 + theta2**2 / 120.0, s / t)
    c2 = np.where(small, 0.5 - theta2 / 24.0 + theta2**2 / 720.0, (1.0 - c) / t2)
    c3 = np.where(small, 1.0 / 6.0 - theta2 / 120.0 + theta2**2 / 5040.0, (t - s) / (t2 * t))
    return c1, c2, c3


def so3_exp_batch(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula for an ``(N, 3)`` array; returns ``(N, 3, 3)``."""
    omega = np.asarray(omega, dtype=float)
    theta2 = np.einsum("...i,...i->...", omega, omega)
    c1, c2, _ = _coeffs_batch(theta2)
    K = skew_batch(omega)
    return np.eye(3) + c1[..., None, None] * K + c2[..., None, None] * (K @ K)


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    """Axis-angle vectors of ``(N, 3, 3)`` rotation matrices."""
    R = np.asarray(R, dtype=float)
    tr = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    cos_t = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    w = 0.5 * np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    sin_t = np.linalg.norm(w, axis=-1)
    theta = np.arctan2(sin_t, cos_t)
    small = sin_t < 1e-7
    k = np.where(small, 1.0 + sin_t**2 / 6.0, theta / np.where(small, 1.0, sin_t))
    out = w * k[..., None]
    near_pi = cos_t < -0.99
    if np.any(near_pi):
        flat = out.reshape(-1, 3)
        for i in np.flatnonzero(near_pi.ravel()):
            flat[i] = so3_log(Rot3.from_matrix(R.reshape(-1, 3, 3)[i]))
    return out


def so3_right_jacobian_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta2 = np.einsum("...i,...i->...", omega, omega)
    _, c2, c3 = _coeffs_batch(theta2)
    K = skew_batch(omega)
    return np.eye(3) - c2[..., None, None] * K + c3[..., None, None] * (K @ K)


def so3_right_jacobian_inv_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta2 = np.einsum("...i,...i->...", omega, omega)
    small = theta2 < _SERIES_THETA2
    t2 = np.where(small, 1.0, theta2)
    t = np.sqrt(t2)
    c = np.where(small, 1.0 / 12.0 + theta2 / 720.0, 1.0 / t2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)))
    K = skew_batch(omega)
    return np.eye(3) + 0.5 * K + c[..., None, None] * (K @ K)
