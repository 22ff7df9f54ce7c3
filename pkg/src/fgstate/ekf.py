"""Planar EKF baseline: unicycle motion on the rear axle, GNSS position updates.

State ``[x, y, yaw, v, yaw_rate_bias]`` describes the rear-axle midpoint,
which moves exactly as a unicycle at the encoder speed. GNSS fixes are
mapped through the axle-to-antenna lever arm, so yaw is observable from a
single antenna once the vehicle moves. Outputs can be shifted to the IMU
point for comparison with the factor-graph estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fgstate.se3 import wrap_angle
from fgstate.sensor_log import EncoderSample, Extrinsics, GnssFix, ImuSample

GATE_CHI2 = 13.8  # 2 dof, 0.999
DEFAULT_Q = (1e-4, 1e-4, 1e-5, 1e-2, 1e-8)


@dataclass(frozen=True)
class EkfState:
    t: float
    x: float
    y: float
    yaw: float
    v: float
    yaw_rate_bias: float
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float).reshape(5, 5)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.v, self.yaw_rate_bias])

    @classmethod
    def from_vector(cls, t: float, x, covariance) -> EkfState:
        return cls(t, float(x[0]), float(x[1]), float(x[2]), float(x[3]), float(x[4]), covariance)


def ekf_predict(state: EkfState, enc: EncoderSample | None, gyro_z: float, dt: float, q=DEFAULT_Q) -> EkfState:
    """Propagate by ``dt``; the speed is replaced by the encoder reading when given.

    Position advances along the mid-interval heading, which keeps constant-rate
    arcs second-order accurate.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x, y, yaw, v, b = state.vector
    mid = yaw + 0.5 * (gyro_z - b) * dt
    c, s = math.cos(mid), math.sin(mid)
    F = np.eye(5)
    F[0, 2] = -v * s * dt
    F[0, 3] = c * dt
    F[0, 4] = 0.5 * v * s * dt * dt
    F[1, 2] = v * c * dt
    F[1, 3] = s * dt
    F[1, 4] = -0.5 * v * c * dt * dt
    F[2, 4] = -dt
    if enc is not None:
        F[3, 3] = 0.0
        v_next = enc.v_x
    else:
        v_next = v
    P = F @ state.covariance @ F.T + np.diag(q) * dt
    P = 0.5 * (P + P.T)
    xn = [x + v * c * dt, y + v * s * dt, yaw + (gyro_z - b) * dt, v_next, b]
    return EkfState.from_vector(state.t + dt, xn, P)


def ekf_update_gnss(state: EkfState, fix: GnssFix, lever_xy=(0.0, 0.0), gate: float = GATE_CHI2) -> EkfState | None:
    """Kalman update on the antenna position; ``None`` when the fix fails the gate.

    ``lever_xy`` is the antenna offset from the tracked point in the body frame.
    """
    lx, ly = lever_xy
    c, s = math.cos(state.yaw), math.sin(state.yaw)
    h = np.array([state.x + c * lx - s * ly, state.y + s * lx + c * ly])
    H = np.zeros((2, 5))
    H[0, 0] = H[1, 1] = 1.0
    H[0, 2] = -s * lx - c * ly
    H[1, 2] = c * lx - s * ly
    Rm = fix.position_cov[:2, :2]
    r = fix.position[:2] - h
    S = H @ state.covariance @ H.T + Rm
    if float(r @ np.linalg.solve(S, r)) > gate:
        return None
    K = np.linalg.solve(S, H @ state.covariance).T
    x = state.vector + K @ r
    A = np.eye(5) - K @ H
    P = A @ state.covariance @ A.T + K @ Rm @ K.T
    return EkfState.from_vector(state.t, x, 0.5 * (P + P.T))


@dataclass
class EkfConfig:
    q: tuple = DEFAULT_Q
    initial_yaw: float = 0.0
    initial_yaw_sigma: float = 0.2
    initial_position_sigma: float = 1.0
    initial_speed_sigma: float = 1.0
    initial_bias_sigma: float = 0.01
    gate: float = GATE_CHI2


@dataclass
class EkfOutput:
    t: float
    position: np.ndarray
    yaw: float
    v: float
    covariance: np.ndarray


@dataclass
class EkfRunner:
    """Event-driven wrapper: predicts on IMU samples, updates on GNSS fixes.

    Positions are reported at the IMU origin using ``imu_from_rear_axle``.
    """

    extrinsics: Extrinsics
    config: EkfConfig = field(default_factory=EkfConfig)
    state: EkfState | None = None
    gated: int = 0
    _last_enc: EncoderSample | None = None
    _last_imu: ImuSample | None = None

    def _lever(self, sensor_id: str) -> tuple[float, float]:
        axle_from_gnss = self.extrinsics.imu_from_rear_axle.inverse() * self.extrinsics.imu_from_gnss(sensor_id)
        return float(axle_from_gnss.translation[0]), float(axle_from_gnss.translation[1])

    def _initialize(self, fix: GnssFix) -> None:
        cfg = self.config
        lx, ly = self._lever(fix.sensor_id)
        yaw = cfg.initial_yaw
        c, s = math.cos(yaw), math.sin(yaw)
        x = fix.position[0] - (c * lx - s * ly)
        y = fix.position[1] - (s * lx + c * ly)
        v = self._last_enc.v_x if self._last_enc is not None else 0.0
        P = np.diag(
            [
                cfg.initial_position_sigma**2,
                cfg.initial_position_sigma**2,
                cfg.initial_yaw_sigma**2,
                cfg.initial_speed_sigma**2,
                cfg.initial_bias_sigma**2,
            ]
        )
        self.state = EkfState(fix.t, x, y, yaw, v, 0.0, P)

    def _advance(self, t: float) -> None:
        if self.state is None or self._last_imu is None:
            return
        dt = t - self.state.t
        if dt > 1e-12:
            self.state = ekf_predict(self.state, self._last_enc, float(self._last_imu.gyro[2]), dt, self.config.q)

    def process(self, event) -> EkfOutput | None:
        if isinstance(event, ImuSample):
            self._advance(event.t)
            self._last_imu = event
            return self.output() if self.state is not None else None
        if isinstance(event, EncoderSample):
            self._advance(event.t)
            self._last_enc = event
        elif isinstance(event, GnssFix):
            if self.state is None:
                self._initialize(event)
                return None
            self._advance(event.t)
            updated = ekf_update_gnss(self.state, event, self._lever(event.sensor_id), self.config.gate)
            if updated is None:
                self.gated += 1
            else:
                self.state = updated
        return None

    def output(self) -> EkfOutput:
        st = self.state
        off = self.extrinsics.imu_from_rear_axle.inverse().translation
        c, s = math.cos(st.yaw), math.sin(st.yaw)
        pos = np.array([st.x + c * off[0] - s * off[1], st.y + s * off[0] + c * off[1]])
        return EkfOutput(st.t, pos, st.yaw, st.v, st.covariance)


def run_ekf(events, extrinsics: Extrinsics, config: EkfConfig | None = None) -> list[EkfOutput]:
    runner = EkfRunner(extrinsics, config or EkfConfig())
    out = []
    for ev in events:
        o = runner.process(ev)
        if o is not None:
            out.append(o)
    return out


__all__ = ["EkfState", "EkfConfig", "EkfOutput", "EkfRunner", "ekf_predict", "ekf_update_gnss", "run_ekf"]
