"""Navigation state at one timestamp and its 15-dimensional tangent space.

Tangent (error-state) layout, used by every Jacobian and covariance in the
package::

    [0:3]   position, world axes, additive (m)
    [3:6]   rotation, body axes, right perturbation R * exp(d) (rad)
    [6:9]   velocity, world axes, additive (m/s)
    [9:12]  gyro bias, additive (rad/s)
    [12:15] accel bias, additive (m/s^2)

The stored velocity is in body axes, but its perturbation is applied to the
world-axes velocity. A rotation update then leaves the world velocity
unchanged, which keeps the inertial residuals close to linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from fgstate.se3 import Pose3, Rot3, so3_exp, so3_log

P, TH, V, BG, BA = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)
DIM = 15


def _vec3(v) -> np.ndarray:
    return np.array(v, dtype=float).reshape(3)


@dataclass(frozen=True)
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "gyro", _vec3(self.gyro))
        object.__setattr__(self, "accel", _vec3(self.accel))
        if not (np.all(np.isfinite(self.gyro)) and np.all(np.isfinite(self.accel))):
            raise ValueError("IMU bias must be finite")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])

    def __sub__(self, other: ImuBias) -> np.ndarray:
        return self.vector() - other.vector()


@dataclass(frozen=True)
class NavState:
    """Pose, body-frame velocity and IMU biases of the IMU at time ``t``.

    ``R`` is world_from_body. ``v`` is the IMU velocity expressed in body
    axes; :meth:`v_world` gives the world-axes view.
    """

    t: float
    p: np.ndarray
    R: Rot3
    v: np.ndarray
    bias: ImuBias = field(default_factory=ImuBias)

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "p", _vec3(self.p))
        object.__setattr__(self, "v", _vec3(self.v))
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.v))):
            raise ValueError("NavState must be finite")

    @classmethod
    def from_world_velocity(cls, t, p, R: Rot3, v_world, bias: ImuBias | None = None) -> NavState:
        return cls(t, p, R, R.unrotate(v_world), bias or ImuBias())

    def v_world(self) -> np.ndarray:
        return self.R.rotate(self.v)

    def pose(self) -> Pose3:
        return Pose3(self.R, self.p)

    def with_time(self, t: float) -> NavState:
        return replace(self, t=t)

    def retract(self, d) -> NavState:
        d = np.asarray(d, dtype=float)
        R = self.R * so3_exp(d[TH])
        return NavState(
            self.t,
            self.p + d[P],
            R,
            R.unrotate(self.v_world() + d[V]),
            ImuBias(self.bias.gyro + d[BG], self.bias.accel + d[BA]),
        )

    def local(self, other: NavState) -> np.ndarray:
        """Tangent ``d`` with ``self.retract(d) == other``."""
        return np.concatenate(
            [
                other.p - self.p,
                so3_log(self.R.inverse() * other.R),
                other.v_world() - self.v_world(),
                other.bias.gyro - self.bias.gyro,
                other.bias.accel - self.bias.accel,
            ]
        )

    @property
    def dim(self) -> int:
        return DIM


def _unchecked(cls, **fields):
    """Instance of a frozen dataclass built from already-validated fields."""
    obj = object.__new__(cls)
    for k, v in fields.items():
        object.__setattr__(obj, k, v)
    return obj


def quat_matrices(q: np.ndarray) -> np.ndarray:
    """Rotation matrices of unit Hamilton quaternions ``(w, x, y, z)``, shape (n, 3, 3)."""
    w, x, y, z = np.asarray(q, dtype=float).T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def retract_states(states: list, deltas: np.ndarray) -> list:
    """``[s.retract(d) for s, d in zip(states, deltas)]`` with array math.

    Rotation updates compose unit quaternions directly; non-finite input is
    rejected as in :meth:`NavState.retract`.
    """
    deltas = np.asarray(deltas, dtype=float).reshape(len(states), DIM)
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite state update")
    q = np.array([s.R.q for s in states])
    p = np.array([s.p for s in states]) + deltas[:, P]
    v_world = np.einsum("nij,nj->ni", quat_matrices(q), np.array([s.v for s in states])) + deltas[:, V]
    bg = np.array([s.bias.gyro for s in states]) + deltas[:, BG]
    ba = np.array([s.bias.accel for s in states]) + deltas[:, BA]
    w = deltas[:, TH]
    theta2 = np.einsum("ij,ij->i", w, w)
    theta = np.sqrt(theta2)
    small = theta < 1e-8
    c = np.where(small, 1.0 - theta2 / 8.0, np.cos(0.5 * theta))
    k = np.where(small, 0.5 - theta2 / 48.0, np.sin(0.5 * theta) / np.where(small, 1.0, theta))
    d = np.column_stack([c, k[:, None] * w])
    aw, ax, ay, az = q.T
    bw, bx, by, bz = d.T
    out = np.column_stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )
    out /= np.linalg.norm(out, axis=1)[:, None] * np.where(out[:, 0] < 0, -1.0, 1.0)[:, None]
    mats = quat_matrices(out)
    mats.flags.writeable = False
    v = np.einsum("nji,nj->ni", mats, v_world)
    result = []
    for i, s in enumerate(states):
        R = _unchecked(Rot3, q=tuple(out[i].tolist()), _m=mats[i])
        bias = _unchecked(ImuBias, gyro=bg[i], accel=ba[i])
        result.append(_unchecked(NavState, t=s.t, p=p[i], R=R, v=v[i], bias=bias))
    return result
