"""Residuals, Jacobians and measurement preprocessing for every factor type.

All factors expose ``keys`` and ``linearize(values) -> (r, [J_k])`` where the
residual and Jacobians are whitened by the factor's square-root information
matrix. Jacobian columns follow the 15-dimensional tangent layout of
:mod:`fgstate.state`.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from fgstate import imu as imu_mod
from fgstate.se3 import (
    Pose3,
    Rot3,
    skew,
    skew_batch,
    so3_exp_batch,
    so3_log,
    so3_log_batch,
    so3_right_jacobian_batch,
    so3_right_jacobian_inv,
    so3_right_jacobian_inv_batch,
    wrap_angle,
)
from fgstate.sensor_log import EncoderSample, Extrinsics, GnssFix
from fgstate.state import BG, DIM, P, TH, V, NavState

DEFAULT_GATE_THRESHOLD = 25.0  # m^2
DUAL_GNSS_MAX_DT = 0.05
DUAL_GNSS_MIN_BASELINE = 0.5
_E0 = np.array([1.0, 0.0, 0.0])


def whitener(covariance) -> np.ndarray:
    """Square-root information ``W`` with ``W.T @ W == inv(covariance)``."""
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    chol = np.linalg.cholesky(cov)
    return solve_triangular(chol, np.eye(len(cov)), lower=True)


class Factor:
    """Base class: subclasses implement :meth:`unwhitened`."""

    keys: tuple
    sqrt_info: np.ndarray

    @property
    def dim(self) -> int:
        return self.sqrt_info.shape[0]

    def unwhitened(self, values: Sequence, jacobians: bool = True):
        raise NotImplementedError

    def _states(self, values: Mapping) -> list:
        try:
            return [values[k] for k in self.keys]
        except KeyError as exc:
            raise KeyError(f"{type(self).__name__} references missing key {exc.args[0]!r}") from None

    def error(self, values: Mapping) -> np.ndarray:
        r, _ = self.unwhitened(self._states(values), jacobians=False)
        return self.sqrt_info @ r

    def linearize(self, values: Mapping) -> tuple[np.ndarray, list[np.ndarray]]:
        r, jacs = self.unwhitened(self._states(values))
        W = self.sqrt_info
        return W @ r, [W @ J for J in jacs]

    def cost(self, values: Mapping) -> float:
        e = self.error(values)
        return 0.5 * float(e @ e)


class PriorFactor(Factor):
    """Gaussian prior on a full state, in tangent coordinates at ``prior_state``."""

    def __init__(self, key, prior_state: NavState, covariance=None, sqrt_information=None):
        self.keys = (key,)
        self.prior_state = prior_state
        if sqrt_information is not None:
            self.sqrt_info = np.asarray(sqrt_information, dtype=float)
        else:
            self.sqrt_info = whitener(covariance)

    def unwhitened(self, states, jacobians=True):
        (x,) = states
        r = self.prior_state.local(x)
        if not jacobians:
            return r, None
        J = np.eye(DIM)
        J[TH, TH] = so3_right_jacobian_inv(r[TH])
        return r, [J]


class ImuFactor(Factor):
    def __init__(self, key_i, key_j, preint: imu_mod.PreintegratedImu):
        self.keys = (key_i, key_j)
        self.preint = preint
        self.sqrt_info = whitener(imu_mod.residual_covariance(preint))

    def unwhitened(self, states, jacobians=True):
        r, Hi, Hj = imu_mod.residual(states[0], states[1], self.preint, jacobians)
        return r, (None if Hi is None else [Hi, Hj])


class GnssUnaryFactor(Factor):
    """IMU position measured through a lever-arm-corrected GNSS fix."""

    def __init__(self, key, measured_imu_position, covariance):
        self.keys = (key,)
        self.measured = np.asarray(measured_imu_position, dtype=float)
        self.sqrt_info = whitener(covariance)

    def unwhitened(self, states, jacobians=True):
        (x,) = states
        r = x.p - self.measured
        if not jacobians:
            return r, None
        J = np.zeros((3, DIM))
        J[:, P] = np.eye(3)
        return r, [J]


def _heading_elevation(u: np.ndarray) -> tuple[float, float]:
    return math.atan2(u[1], u[0]), math.atan2(u[2], math.hypot(u[0], u[1]))


def _heading_elevation_jacobian(u: np.ndarray) -> np.ndarray:
    """2x3 derivative of (heading, elevation) of direction ``u``."""
    h2 = u[0] * u[0] + u[1] * u[1]
    h = math.sqrt(h2)
    n2 = h2 + u[2] * u[2]
    return np.array(
        [
            [-u[1] / h2, u[0] / h2, 0.0],
            [-u[2] * u[0] / (n2 * h), -u[2] * u[1] / (n2 * h), h / n2],
        ]
    )


class GnssAttitudeFactor(Factor):
    """Heading and elevation of a body-fixed antenna baseline.

    ``yaw``/``pitch`` are the measured world heading and elevation of the
    baseline minus its body-frame heading and elevation, which for a
    baseline along the body x axis are the body yaw and nose-up pitch.
    """

    def __init__(self, key, yaw: float, pitch: float, covariance, baseline_body=_E0):
        self.keys = (key,)
        self.yaw = wrap_angle(yaw)
        self.pitch = float(pitch)
        self.baseline = np.asarray(baseline_body, dtype=float)
        self.baseline_heading, self.baseline_elevation = _heading_elevation(self.baseline)
        self.sqrt_info = whitener(covariance)

    def unwhitened(self, states, jacobians=True):
        (x,) = states
        u = x.R.rotate(self.baseline)
        heading, elevation = _heading_elevation(u)
        r = np.array(
            [
                wrap_angle(heading - self.baseline_heading - self.yaw),
                elevation - self.baseline_elevation - self.pitch,
            ]
        )
        if not jacobians:
            return r, None
        J = np.zeros((2, DIM))
        J[:, TH] = _heading_elevation_jacobian(u) @ (-x.R.matrix() @ skew(self.baseline))
        return r, [J]


class BetweenPoseFactor(Factor):
    """Relative IMU pose ``between(T_i, T_j)``; residual is (rotation log, translation)."""

    def __init__(self, key_i, key_j, measured_delta: Pose3, covariance):
        self.keys = (key_i, key_j)
        self.measured = measured_delta
        self.sqrt_info = whitener(covariance)

    def unwhitened(self, states, jacobians=True):
        xi, xj = states
        Rm_T = self.measured.rotation.matrix().T
        Ri_T = xi.R.matrix().T
        dp = Ri_T @ (xj.p - xi.p)
        E = self.measured.rotation.inverse() * xi.R.inverse() * xj.R
        r_rot = so3_log(E)
        r = np.concatenate([r_rot, Rm_T @ (dp - self.measured.translation)])
        if not jacobians:
            return r, None
        jr_inv = so3_right_jacobian_inv(r_rot)
        Hi = np.zeros((6, DIM))
        Hj = np.zeros((6, DIM))
        Hi[0:3, TH] = -jr_inv @ xj.R.matrix().T @ xi.R.matrix()
        Hj[0:3, TH] = jr_inv
        Hi[3:6, P] = -Rm_T @ Ri_T
        Hi[3:6, TH] = Rm_T @ skew(dp)
        Hj[3:6, P] = Rm_T @ Ri_T
        return r, [Hi, Hj]


class KinematicBetweenFactor(Factor):
    """Planar rear-axle motion (dx, dy, dyaw) plus forward speed at ``key_j``."""

    def __init__(self, key_i, key_j, delta_pose_2d, measured_vx: float, covariance, imu_from_axle: Pose3):
        self.keys = (key_i, key_j)
        self.delta = np.asarray(delta_pose_2d, dtype=float).reshape(3)
        self.measured_vx = float(measured_vx)
        self.imu_from_axle = imu_from_axle
        self.sqrt_info = whitener(covariance)

    def unwhitened(self, states, jacobians=True):
        xi, xj = states
        Ra = self.imu_from_axle.rotation.matrix()
        ta = self.imu_from_axle.translation
        Ri = xi.R.matrix()
        Rj = xj.R.matrix()
        RB = Ri.T @ Rj
        tB = Ri.T @ (xj.p - xi.p)
        rel_R = Ra.T @ RB @ Ra
        w = RB @ ta + tB
        rel_t = Ra.T @ (w - ta)
        u = rel_R[:, 0]
        r = np.array(
            [
                rel_t[0] - self.delta[0],
                rel_t[1] - self.delta[1],
                wrap_angle(math.atan2(u[1], u[0]) - self.delta[2]),
                Ra[:, 0] @ xj.v - self.measured_vx,
            ]
        )
        if not jacobians:
            return r, None
        h2 = u[0] * u[0] + u[1] * u[1]
        d_yaw_du = np.array([-u[1] / h2, u[0] / h2, 0.0])
        # yaw of rel_R under right perturbation eps: du = -rel_R [e0]x eps
        d_yaw_deps = d_yaw_du @ (-rel_R @ skew(_E0))
        Hi = np.zeros((4, DIM))
        Hj = np.zeros((4, DIM))
        Hi[0:2, P] = -(Ra.T @ Ri.T)[0:2]
        Hj[0:2, P] = (Ra.T @ Ri.T)[0:2]
        Hi[0:2, TH] = (Ra.T @ skew(w))[0:2]
        Hj[0:2, TH] = (-Ra.T @ RB @ skew(ta))[0:2]
        Hi[2, TH] = d_yaw_deps @ (-Ra.T @ RB.T)
        Hj[2, TH] = d_yaw_deps @ Ra.T
        Hj[3, TH] = Ra[:, 0] @ skew(xj.v)
        Hj[3, V] = Ra[:, 0] @ Rj.T
        return r, [Hi, Hj]


def lever_arm(extrinsics: Extrinsics, sensor_id: str) -> np.ndarray:
    """Body-frame vector from the GNSS antenna to the IMU."""
    return -extrinsics.imu_from_gnss(sensor_id).translation


def gnss_to_imu_position(fix: GnssFix, R_t: Rot3, extrinsics: Extrinsics) -> np.ndarray:
    """Move a GNSS fix to the IMU location using the orientation estimate ``R_t``."""
    return fix.position + R_t.rotate(lever_arm(extrinsics, fix.sensor_id))


def gate_gnss(fix: GnssFix, threshold: float = DEFAULT_GATE_THRESHOLD) -> bool:
    """Accept unless any diagonal covariance entry exceeds ``threshold`` (m^2)."""
    return bool(np.max(np.diag(fix.position_cov)) <= threshold)


def antenna_baseline(extrinsics: Extrinsics) -> np.ndarray:
    """Body-frame vector from the rear to the front antenna."""
    return extrinsics.imu_from_gnss_front.translation - extrinsics.imu_from_gnss_rear.translation


def dual_gnss_attitude(front: GnssFix, rear: GnssFix, extrinsics: Extrinsics) -> tuple[float, float] | None:
    """Body yaw and nose-up pitch from a front/rear antenna pair, or ``None`` to skip."""
    if abs(front.t - rear.t) >= DUAL_GNSS_MAX_DT:
        return None
    d = front.position - rear.position
    if math.hypot(d[0], d[1]) <= DUAL_GNSS_MIN_BASELINE:
        return None
    heading, elevation = _heading_elevation(d)
    b_heading, b_elevation = _heading_elevation(antenna_baseline(extrinsics))
    return wrap_angle(heading - b_heading), elevation - b_elevation


def attitude_covariance(front: GnssFix, rear: GnssFix, extrinsics: Extrinsics) -> np.ndarray:
    """Yaw/pitch covariance from antenna position sigmas: ``sigma = atan(2 sigma_pos / baseline)``."""
    baseline = float(np.linalg.norm(antenna_baseline(extrinsics)))
    cov = front.position_cov + rear.position_cov
    sigma_h = math.sqrt(0.5 * max(cov[0, 0], cov[1, 1]))
    sigma_v = math.sqrt(0.5 * cov[2, 2])
    s_yaw = math.atan(2.0 * sigma_h / baseline)
    s_pitch = math.atan(2.0 * max(sigma_v, 1e-6) / baseline)
    return np.diag([s_yaw**2, s_pitch**2])


def kinematic_delta(enc: EncoderSample, dt: float, wheelbase: float) -> tuple[float, float, float, float]:
    """Rear-axle planar motion over ``dt`` from speed and steering.

    Yaw rate is ``v_x tan(steer) / wheelbase``; the motion follows a circular
    arc of radius ``v_x / yaw_rate`` (a straight line below 1e-9 rad).
    """
    if not dt > 0 or not wheelbase > 0:
        raise ValueError("dt and wheelbase must be positive")
    yaw_rate = enc.v_x * math.tan(enc.steer) / wheelbase
    dyaw = yaw_rate * dt
    if abs(dyaw) < 1e-9:
        return enc.v_x * dt, 0.0, dyaw, yaw_rate
    radius = enc.v_x / yaw_rate
    return radius * math.sin(dyaw), radius * (1.0 - math.cos(dyaw)), dyaw, yaw_rate


def lidar_to_imu(delta_lidar: Pose3, imu_from_lidar: Pose3) -> Pose3:
    """Conjugate a lidar-frame relative motion into the IMU frame."""
    return imu_from_lidar * delta_lidar * imu_from_lidar.inverse()


def lidar_covariance_to_imu(cov: np.ndarray, imu_from_lidar: Pose3) -> np.ndarray:
    """Rotate a (rotation, translation) covariance into IMU axes."""
    Q = imu_from_lidar.rotation.matrix()
    M = np.zeros((6, 6))
    M[:3, :3] = Q
    M[3:, 3:] = Q
    out = M @ np.asarray(cov, dtype=float) @ M.T
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------- batches
#
# Vectorized linearization of many factors of one type. The solver groups
# factors whose class defines ``batch`` and evaluates each group with a few
# array operations instead of a Python call per factor.


def stack_states(values: Mapping, keys) -> tuple[np.ndarray, ...]:
    """``t, p, R, v, b`` arrays for the states at ``keys``."""
    states = [values[k] for k in keys]
    t = np.array([s.t for s in states])
    p = np.array([s.p for s in states])
    R = np.array([s.R.matrix() for s in states])
    v = np.array([s.v for s in states])
    b = np.array([np.concatenate([s.bias.gyro, s.bias.accel]) for s in states])
    return t, p, R, v, b


class FactorBatch:
    """Whitened residuals and Jacobians of ``N`` same-type factors at once."""

    def __init__(self, factors: Sequence[Factor]):
        self.factors = list(factors)
        self.slots = [np.array([f.keys[i] for f in self.factors], dtype=object) for i in range(len(self.factors[0].keys))]
        self.W = np.array([f.sqrt_info for f in self.factors])

    def unwhitened(self, values: Mapping, jacobians: bool):
        raise NotImplementedError

    def error(self, values: Mapping) -> np.ndarray:
        r, _ = self.unwhitened(values, False)
        return np.einsum("nij,nj->ni", self.W, r)

    def linearize(self, values: Mapping) -> tuple[np.ndarray, list[np.ndarray]]:
        r, jacs = self.unwhitened(values, True)
        return np.einsum("nij,nj->ni", self.W, r), [self.W @ J for J in jacs]


class ImuBatch(FactorBatch):
    def __init__(self, factors):
        super().__init__(factors)
        pre = [f.preint for f in self.factors]
        self.dt = np.array([p.dt_total for p in pre])
        self.dR = np.array([p.delta_R.matrix() for p in pre])
        self.dv = np.array([p.delta_v for p in pre])
        self.dp = np.array([p.delta_p for p in pre])
        self.J = np.array([p.bias_jacobians for p in pre])
        self.b_lin = np.array([p.linearization_bias.vector() for p in pre])
        self.g = np.array([p.noise.gravity for p in pre])
        position = {}
        for k in (k for slot in self.slots for k in slot):
            position.setdefault(k, len(position))
        self.union = list(position)
        self.slot_index = [np.array([position[k] for k in slot]) for slot in self.slots]

    def unwhitened(self, values, jacobians):
        # consecutive IMU factors share states: stack each state once
        stacked = stack_states(values, self.union)
        ti, pi, Ri, vi, bi = (a[self.slot_index[0]] for a in stacked)
        tj, pj, Rj, vj, bj = (a[self.slot_index[1]] for a in stacked)
        if np.any(np.abs(tj - ti - self.dt) > imu_mod.TIME_TOLERANCE):
            raise ValueError("IMU factor states do not span their preintegration intervals")
        dt = self.dt[:, None]
        J = self.J
        db = bi - self.b_lin
        phi = np.einsum("nij,nj->ni", J[:, 0:3, 0:3], db[:, :3])
        dRc = self.dR @ so3_exp_batch(phi)
        dvc = self.dv + np.einsum("nij,nj->ni", J[:, 3:6], db)
        dpc = self.dp + np.einsum("nij,nj->ni", J[:, 6:9], db)
        RiT = np.swapaxes(Ri, 1, 2)
        RiT_Rj = RiT @ Rj
        E = np.swapaxes(dRc, 1, 2) @ RiT_Rj
        r_R = so3_log_batch(E)
        vi_w = np.einsum("nij,nj->ni", Ri, vi)
        vj_w = np.einsum("nij,nj->ni", Rj, vj)
        vel_term = np.einsum("nij,nj->ni", RiT, vj_w - vi_w - self.g * dt)
        pos_term = np.einsum("nij,nj->ni", RiT, pj - pi - vi_w * dt - 0.5 * self.g * dt * dt)
        r = np.concatenate([r_R, vel_term - dvc, pos_term - dpc, bj - bi], axis=1)
        if not jacobians:
            return r, None
        n = len(self.factors)
        jr_inv = so3_right_jacobian_inv_batch(r_R)
        Hi = np.zeros((n, 15, DIM))
        Hj = np.zeros((n, 15, DIM))
        Hi[:, 0:3, TH] = -jr_inv @ np.swapaxes(RiT_Rj, 1, 2)
        Hi[:, 0:3, BG] = -jr_inv @ np.swapaxes(E, 1, 2) @ so3_right_jacobian_batch(phi) @ J[:, 0:3, 0:3]
        Hj[:, 0:3, TH] = jr_inv
        Hi[:, 3:6, TH] = skew_batch(vel_term)
        Hi[:, 3:6, V] = -RiT
        Hi[:, 3:6, 9:15] = -J[:, 3:6]
        Hj[:, 3:6, V] = RiT
        Hi[:, 6:9, P] = -RiT
        Hi[:, 6:9, TH] = skew_batch(pos_term)
        Hi[:, 6:9, V] = -RiT * dt[:, :, None]
        Hi[:, 6:9, 9:15] = -J[:, 6:9]
        Hj[:, 6:9, P] = RiT
        Hi[:, 9:15, 9:15] = -np.eye(6)
        Hj[:, 9:15, 9:15] = np.eye(6)
        return r, [Hi, Hj]


class GnssUnaryBatch(FactorBatch):
    def __init__(self, factors):
        super().__init__(factors)
        self.measured = np.array([f.measured for f in self.factors])

    def unwhitened(self, values, jacobians):
        p = np.array([values[k].p for k in self.slots[0]])
        r = p - self.measured
        if not jacobians:
            return r, None
        J = np.zeros((len(self.factors), 3, DIM))
        J[:, :, P] = np.eye(3)
        return r, [J]


ImuFactor.batch = ImuBatch
GnssUnaryFactor.batch = GnssUnaryBatch


def _wrap_batch(a: np.ndarray) -> np.ndarray:
    """Elementwise wrap to (-pi, pi]."""
    return math.pi - np.mod(math.pi - a, 2.0 * math.pi)


def _rot_batch(values: Mapping, keys) -> np.ndarray:
    return np.array([values[k].R.matrix() for k in keys])


class GnssAttitudeBatch(FactorBatch):
    def __init__(self, factors):
        super().__init__(factors)
        self.baseline = np.array([f.baseline for f in self.factors])
        self.offset = np.array([[f.baseline_heading + f.yaw, f.baseline_elevation + f.pitch] for f in self.factors])

    def unwhitened(self, values, jacobians):
        R = _rot_batch(values, self.slots[0])
        u = np.einsum("nij,nj->ni", R, self.baseline)
        h2 = u[:, 0] ** 2 + u[:, 1] ** 2
        h = np.sqrt(h2)
        r = np.column_stack(
            [
                _wrap_batch(np.arctan2(u[:, 1], u[:, 0]) - self.offset[:, 0]),
                np.arctan2(u[:, 2], h) - self.offset[:, 1],
            ]
        )
        if not jacobians:
            return r, None
        n2 = h2 + u[:, 2] ** 2
        D = np.zeros((len(u), 2, 3))
        D[:, 0, 0], D[:, 0, 1] = -u[:, 1] / h2, u[:, 0] / h2
        D[:, 1, 0], D[:, 1, 1] = -u[:, 2] * u[:, 0] / (n2 * h), -u[:, 2] * u[:, 1] / (n2 * h)
        D[:, 1, 2] = h / n2
        J = np.zeros((len(u), 2, DIM))
        J[:, :, TH] = D @ (-R @ skew_batch(self.baseline))
        return r, [J]


class BetweenPoseBatch(FactorBatch):
    def __init__(self, factors):
        super().__init__(factors)
        self.Rm = np.array([f.measured.rotation.matrix() for f in self.factors])
        self.tm = np.array([f.measured.translation for f in self.factors])

    def unwhitened(self, values, jacobians):
        Ri = _rot_batch(values, self.slots[0])
        Rj = _rot_batch(values, self.slots[1])
        pi = np.array([values[k].p for k in self.slots[0]])
        pj = np.array([values[k].p for k in self.slots[1]])
        RmT = np.swapaxes(self.Rm, 1, 2)
        RiT = np.swapaxes(Ri, 1, 2)
        dp = np.einsum("nij,nj->ni", RiT, pj - pi)
        RiT_Rj = RiT @ Rj
        r_rot = so3_log_batch(RmT @ RiT_Rj)
        r = np.concatenate([r_rot, np.einsum("nij,nj->ni", RmT, dp - self.tm)], axis=1)
        if not jacobians:
            return r, None
        n = len(r)
        jr_inv = so3_right_jacobian_inv_batch(r_rot)
        Hi = np.zeros((n, 6, DIM))
        Hj = np.zeros((n, 6, DIM))
        Hi[:, 0:3, TH] = -jr_inv @ np.swapaxes(RiT_Rj, 1, 2)
        Hj[:, 0:3, TH] = jr_inv
        RmT_RiT = RmT @ RiT
        Hi[:, 3:6, P] = -RmT_RiT
        Hi[:, 3:6, TH] = RmT @ skew_batch(dp)
        Hj[:, 3:6, P] = RmT_RiT
        return r, [Hi, Hj]


class KinematicBatch(FactorBatch):
    def __init__(self, factors):
        super().__init__(factors)
        self.delta = np.array([f.delta for f in self.factors])
        self.vx = np.array([f.measured_vx for f in self.factors])
        self.Ra = np.array([f.imu_from_axle.rotation.matrix() for f in self.factors])
        self.ta = np.array([f.imu_from_axle.translation for f in self.factors])

    def unwhitened(self, values, jacobians):
        Ri = _rot_batch(values, self.slots[0])
        Rj = _rot_batch(values, self.slots[1])
        pi = np.array([values[k].p for k in self.slots[0]])
        pj = np.array([values[k].p for k in self.slots[1]])
        vj = np.array([values[k].v for k in self.slots[1]])
        Ra, ta = self.Ra, self.ta
        RaT = np.swapaxes(Ra, 1, 2)
        RiT = np.swapaxes(Ri, 1, 2)
        RB = RiT @ Rj
        tB = np.einsum("nij,nj->ni", RiT, pj - pi)
        rel_R = RaT @ RB @ Ra
        w = np.einsum("nij,nj->ni", RB, ta) + tB
        rel_t = np.einsum("nij,nj->ni", RaT, w - ta)
        u = rel_R[:, :, 0]
        r = np.column_stack(
            [
                rel_t[:, 0] - self.delta[:, 0],
                rel_t[:, 1] - self.delta[:, 1],
                _wrap_batch(np.arctan2(u[:, 1], u[:, 0]) - self.delta[:, 2]),
                np.einsum("ni,ni->n", Ra[:, :, 0], vj) - self.vx,
            ]
        )
        if not jacobians:
            return r, None
        n = len(r)
        h2 = u[:, 0] ** 2 + u[:, 1] ** 2
        d_yaw_du = np.column_stack([-u[:, 1] / h2, u[:, 0] / h2, np.zeros(n)])
        d_yaw_deps = np.einsum("ni,nij->nj", d_yaw_du, -rel_R @ skew(_E0))
        Hi = np.zeros((n, 4, DIM))
        Hj = np.zeros((n, 4, DIM))
        RaT_RiT = RaT @ RiT
        Hi[:, 0:2, P] = -RaT_RiT[:, 0:2]
        Hj[:, 0:2, P] = RaT_RiT[:, 0:2]
        Hi[:, 0:2, TH] = (RaT @ skew_batch(w))[:, 0:2]
        Hj[:, 0:2, TH] = (-RaT @ RB @ skew_batch(ta))[:, 0:2]
        Hi[:, 2, TH] = np.einsum("nj,njk->nk", d_yaw_deps, -RaT @ np.swapaxes(RB, 1, 2))
        Hj[:, 2, TH] = np.einsum("nj,njk->nk", d_yaw_deps, RaT)
        Hj[:, 3, TH] = np.einsum("ni,nij->nj", Ra[:, :, 0], skew_batch(vj))
        Hj[:, 3, V] = np.einsum("ni,nji->nj", Ra[:, :, 0], Rj)
        return r, [Hi, Hj]


GnssAttitudeFactor.batch = GnssAttitudeBatch
BetweenPoseFactor.batch = BetweenPoseBatch
KinematicBetweenFactor.batch = KinematicBatch
