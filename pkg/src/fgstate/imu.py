"""IMU preintegration between consecutive graph values.

Measurement model: the gyro reads body rate plus bias plus white noise; the
accelerometer reads specific force ``R^T (a_world - g)`` plus bias plus white
noise. Gravity therefore never enters the accumulated deltas, only
:func:`predict` and :func:`residual`.

Preintegrated covariance and bias Jacobians use the rotation, velocity,
position row order. Residuals returned by :func:`residual` are ordered
rotation, velocity, position, gyro-bias walk, accel-bias walk; Jacobian
columns follow the state tangent layout of :mod:`fgstate.state`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fgstate.se3 import (
    Rot3,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)
from fgstate.state import BA, BG, DIM, P, TH, V, ImuBias, NavState

MAX_DT = 0.1
TIME_TOLERANCE = 1e-6


@dataclass
class ImuNoiseModel:
    """Continuous-time IMU noise densities (SI units per sqrt(Hz))."""

    gyro_noise_density: float = 1e-3
    accel_noise_density: float = 1e-2
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    # Position random walk added during integration; keeps the 9x9 delta
    # covariance full rank for single-sample intervals.
    integration_sigma: float = 1e-4

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        for name in ("gyro_noise_density", "accel_noise_density", "gyro_bias_walk", "accel_bias_walk"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def bias_walk_covariance(self, dt: float) -> np.ndarray:
        return np.diag([self.gyro_bias_walk**2 * dt] * 3 + [self.accel_bias_walk**2 * dt] * 3)


class PreintegratedImu:
    """Accumulated rotation, velocity and position deltas since the last value.

    The accumulator is mutable and single-owner: :meth:`integrate` updates it
    in place and returns ``self``.
    """

    def __init__(self, noise: ImuNoiseModel | None = None, bias: ImuBias | None = None):
        self.noise = noise or ImuNoiseModel()
        self.linearization_bias = bias or ImuBias()
        self.dt_total = 0.0
        self.delta_R = Rot3()
        self.delta_v = np.zeros(3)
        self.delta_p = np.zeros(3)
        self.covariance = np.zeros((9, 9))
        self.bias_jacobians = np.zeros((9, 6))
        self.num_samples = 0

    def copy(self) -> PreintegratedImu:
        out = PreintegratedImu(self.noise, self.linearization_bias)
        out.dt_total = self.dt_total
        out.delta_R = self.delta_R
        out.delta_v = self.delta_v.copy()
        out.delta_p = self.delta_p.copy()
        out.covariance = self.covariance.copy()
        out.bias_jacobians = self.bias_jacobians.copy()
        out.num_samples = self.num_samples
        return out

    def integrate(self, gyro, accel, dt: float) -> PreintegratedImu:
        if not dt > 0:
            raise ValueError(f"integration step must be positive, got {dt}")
        if dt >= MAX_DT:
            raise ValueError(f"integration step {dt} s exceeds {MAX_DT} s")
        w = np.asarray(gyro, dtype=float) - self.linearization_bias.gyro
        a = np.asarray(accel, dtype=float) - self.linearization_bias.accel
        dR = self.delta_R.matrix()
        step = so3_exp(w * dt)
        step_T = step.matrix().T
        jr = so3_right_jacobian(w * dt)
        dR_a_skew = dR @ skew(a)
        half_dt2 = 0.5 * dt * dt

        A = np.eye(9)
        A[0:3, 0:3] = step_T
        A[3:6, 0:3] = -dR_a_skew * dt
        A[6:9, 0:3] = -dR_a_skew * half_dt2
        A[6:9, 3:6] = np.eye(3) * dt
        B = np.zeros((9, 6))
        B[0:3, 0:3] = jr * dt
        B[3:6, 3:6] = dR * dt
        B[6:9, 3:6] = dR * half_dt2
        gq = self.noise.gyro_noise_density**2 / dt
        aq = self.noise.accel_noise_density**2 / dt
        cov = A @ self.covariance @ A.T
        cov[0:3, 0:3] += (gq * dt * dt) * (jr @ jr.T)
        cov[3:9, 3:9] += aq * (B[3:9, 3:6] @ B[3:9, 3:6].T)
        idx = np.arange(6, 9)
        cov[idx, idx] += self.noise.integration_sigma**2 * dt
        self.covariance = 0.5 * (cov + cov.T)

        J = self.bias_jacobians
        dR_dbg = J[0:3, 0:3]
        dv_dbg, dv_dba = J[3:6, 0:3], J[3:6, 3:6]
        dp_dbg, dp_dba = J[6:9, 0:3], J[6:9, 3:6]
        Jn = np.zeros((9, 6))
        Jn[6:9, 0:3] = dp_dbg + dv_dbg * dt - dR_a_skew @ dR_dbg * half_dt2
        Jn[6:9, 3:6] = dp_dba + dv_dba * dt - dR * half_dt2
        Jn[3:6, 0:3] = dv_dbg - dR_a_skew @ dR_dbg * dt
        Jn[3:6, 3:6] = dv_dba - dR * dt
        Jn[0:3, 0:3] = step_T @ dR_dbg - jr * dt
        self.bias_jacobians = Jn

        acc_world = dR @ a
        self.delta_p = self.delta_p + self.delta_v * dt + acc_world * half_dt2
        self.delta_v = self.delta_v + acc_world * dt
        self.delta_R = self.delta_R * step
        self.dt_total += dt
        self.num_samples += 1
        return self

    def corrected(self, bias: ImuBias) -> tuple[Rot3, np.ndarray, np.ndarray]:
        """First-order bias-corrected deltas for ``bias``."""
        db = bias - self.linearization_bias
        J = self.bias_jacobians
        dR = self.delta_R * so3_exp(J[0:3, 0:3] @ db[:3])
        dv = self.delta_v + J[3:6] @ db
        dp = self.delta_p + J[6:9] @ db
        return dR, dv, dp


def integrate(acc: PreintegratedImu, sample, dt: float) -> PreintegratedImu:
    """Integrate one :class:`~fgstate.sensor_log.ImuSample` held over ``dt``."""
    return acc.integrate(sample.gyro, sample.accel, dt)


def predict(state: NavState, preint: PreintegratedImu) -> NavState:
    """State at ``state.t + preint.dt_total``; biases carried forward."""
    g = preint.noise.gravity
    dt = preint.dt_total
    dR, dv, dp = preint.corrected(state.bias)
    v_world = state.R.rotate(state.v)
    R_j = state.R * dR
    v_world_j = v_world + g * dt + state.R.rotate(dv)
    p_j = state.p + v_world * dt + 0.5 * g * dt * dt + state.R.rotate(dp)
    return NavState(state.t + dt, p_j, R_j, R_j.unrotate(v_world_j), state.bias)


def residual_covariance(preint: PreintegratedImu) -> np.ndarray:
    cov = np.zeros((15, 15))
    cov[:9, :9] = preint.covariance
    cov[9:, 9:] = preint.noise.bias_walk_covariance(preint.dt_total)
    return cov


def residual(
    state_i: NavState, state_j: NavState, preint: PreintegratedImu, jacobians: bool = True
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Unwhitened 15-vector residual and its Jacobians w.r.t. both states."""
    if abs(state_j.t - state_i.t - preint.dt_total) > TIME_TOLERANCE:
        raise ValueError(
            f"states {state_i.t:.6f}->{state_j.t:.6f} do not span preintegration interval {preint.dt_total:.6f}"
        )
    g = preint.noise.gravity
    dt = preint.dt_total
    db = state_i.bias - preint.linearization_bias
    J = preint.bias_jacobians
    phi_b = J[0:3, 0:3] @ db[:3]
    dR_corr = preint.delta_R * so3_exp(phi_b)
    dv_corr = preint.delta_v + J[3:6] @ db
    dp_corr = preint.delta_p + J[6:9] @ db

    Ri = state_i.R.matrix()
    RiT = Ri.T
    vi_w = state_i.v_world()
    vj_w = state_j.v_world()
    E = dR_corr.inverse() * state_i.R.inverse() * state_j.R
    r_R = so3_log(E)
    vel_term = RiT @ (vj_w - vi_w - g * dt)
    pos_term = RiT @ (state_j.p - state_i.p - vi_w * dt - 0.5 * g * dt * dt)
    r_v = vel_term - dv_corr
    r_p = pos_term - dp_corr
    r_b = state_j.bias.vector() - state_i.bias.vector()
    r = np.concatenate([r_R, r_v, r_p, r_b])
    if not jacobians:
        return r, None, None

    jr_inv = so3_right_jacobian_inv(r_R)
    Hi = np.zeros((15, DIM))
    Hj = np.zeros((15, DIM))
    Hi[0:3, TH] = -jr_inv @ (RiT @ state_j.R.matrix()).T
    Hi[0:3, BG] = -jr_inv @ E.matrix().T @ so3_right_jacobian(phi_b) @ J[0:3, 0:3]
    Hj[0:3, TH] = jr_inv

    Hi[3:6, TH] = skew(vel_term)
    Hi[3:6, V] = -RiT
    Hi[3:6, BG] = -J[3:6, 0:3]
    Hi[3:6, BA] = -J[3:6, 3:6]
    Hj[3:6, V] = RiT

    Hi[6:9, P] = -RiT
    Hi[6:9, TH] = skew(pos_term)
    Hi[6:9, V] = -RiT * dt
    Hi[6:9, BG] = -J[6:9, 0:3]
    Hi[6:9, BA] = -J[6:9, 3:6]
    Hj[6:9, P] = RiT

    Hi[9:15, 9:15] = -np.eye(6)
    Hj[9:15, 9:15] = np.eye(6)
    return r, Hi, Hj


def propagate_covariance(
    cov_i: np.ndarray, state_i: NavState, state_j: NavState, preint: PreintegratedImu
) -> np.ndarray:
    """First-order covariance of ``state_j = predict(state_i, preint)``.

    Implicit-function form of the residual, ``Hj dxj + Hi dxi + n = 0``,
    evaluated at the consistent pair where the rotation residual vanishes;
    ``Hj`` then reduces to rotations by ``R_i^T`` and inverts in closed form.
    """
    dt = preint.dt_total
    J = preint.bias_jacobians
    db = state_i.bias - preint.linearization_bias
    phi_b = J[0:3, 0:3] @ db[:3]
    dv = preint.delta_v + J[3:6] @ db
    dp = preint.delta_p + J[6:9] @ db
    Ri = state_i.R.matrix()
    # M = Hj^-1 Hi, rows in tangent order
    M = np.zeros((DIM, DIM))
    M[P, P] = -np.eye(3)
    M[P, TH] = Ri @ skew(dp)
    M[P, V] = -np.eye(3) * dt
    M[P, 9:15] = -Ri @ J[6:9]
    M[TH, TH] = -state_j.R.matrix().T @ Ri
    M[TH, BG] = -so3_right_jacobian(phi_b) @ J[0:3, 0:3]
    M[V, TH] = Ri @ skew(dv)
    M[V, V] = -np.eye(3)
    M[V, 9:15] = -Ri @ J[3:6]
    M[9:15, 9:15] = -np.eye(6)
    # Hj^-1 maps residual rows (rotation, velocity, position, bias) to the tangent
    N = np.zeros((DIM, 9))
    N[TH, 0:3] = np.eye(3)
    N[V, 3:6] = Ri
    N[P, 6:9] = Ri
    cov = M @ cov_i @ M.T
    cov += N @ preint.covariance @ N.T
    cov[9:15, 9:15] += preint.noise.bias_walk_covariance(dt)
    return 0.5 * (cov + cov.T)
