"""Sliding-window factor-graph estimator with IMU-rate prediction.

One graph value is created per IMU sample and linked to its predecessor by a
single-sample preintegrated IMU factor. GNSS, lidar-odometry and encoder
measurements attach to the values nearest their timestamps. Between solves
the newest value is predicted from the last optimized one and its
covariance is propagated EKF-style, so a state estimate is available at IMU
rate; after each solve the predictor is rebased on the optimized window.

Estimation runs in a local odometry frame O. The frame transform
``global_from_odom`` is fixed at initialization (origin at the first IMU
position, x axis along the initial heading) and every public output is
mapped back to the global frame G.
"""

from __future__ import annotations

import bisect
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from fgstate import factors as fac
from fgstate.imu import ImuNoiseModel, PreintegratedImu, predict, propagate_covariance
from fgstate.se3 import Pose3, Rot3, skew
from fgstate.sensor_log import (
    EncoderSample,
    Extrinsics,
    GnssFix,
    GroundTruth,
    ImuSample,
    LidarOdom,
)
from fgstate.solver import LMParams, Problem, banded_to_dense, levenberg_marquardt
from fgstate.state import DIM, P, TH, V, ImuBias, NavState

log = logging.getLogger(__name__)

TIME_EPS = 1e-9


class EstimatorError(RuntimeError):
    pass


@dataclass
class EstimatorConfig:
    window_length: float = 1.0
    solve_every_n_imu: int = 10
    gate_threshold: float = fac.DEFAULT_GATE_THRESHOLD
    imu_noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)
    extrinsics: Extrinsics = field(default_factory=Extrinsics)
    use_attitude: bool = True
    # heading of the odometry frame when only one antenna is available
    initial_yaw: float = 0.0
    prior_position_sigma: float = 1.0
    prior_roll_pitch_sigma: float = 0.05
    prior_yaw_sigma: float = 0.1
    prior_velocity_sigma: float = 1.0
    prior_gyro_bias_sigma: float = 0.01
    prior_accel_bias_sigma: float = 0.2
    kinematic_interval: float = 0.1
    kinematic_sigma_xy: float = 0.02
    kinematic_sigma_yaw: float = 0.005
    kinematic_sigma_v: float = 0.05
    imu_period: float = 0.01
    association_periods: float = 2.0
    lm: LMParams = field(default_factory=LMParams)

    def prior_covariance(self) -> np.ndarray:
        s = np.concatenate(
            [
                [self.prior_position_sigma] * 3,
                [self.prior_roll_pitch_sigma] * 2 + [self.prior_yaw_sigma],
                [self.prior_velocity_sigma] * 3,
                [self.prior_gyro_bias_sigma] * 3,
                [self.prior_accel_bias_sigma] * 3,
            ]
        )
        return np.diag(s**2)


@dataclass
class StateWithCovariance:
    state: NavState
    covariance: np.ndarray


@dataclass
class TrajectoryEstimate:
    """Optimized window (odometry frame) and the newest marginal covariance (global frame)."""

    odom_states: list
    global_from_odom: Pose3
    newest_covariance: np.ndarray
    cost: float
    iterations: int
    gradient_norm: float
    converged: bool
    degenerate: bool

    @property
    def states(self) -> list:
        """Window states mapped to the global frame."""
        T = self.global_from_odom
        return [NavState(s.t, T.transform_point(s.p), T.rotation * s.R, s.v, s.bias) for s in self.odom_states]


@dataclass
class EstimatorStats:
    solves: int = 0
    dropped_measurements: int = 0
    gated_gnss: int = 0
    dropped_crossing_factors: int = 0
    degenerate_solves: int = 0
    predict_latency: list = field(default_factory=list)
    solve_latency: list = field(default_factory=list)
    solve_sizes: list = field(default_factory=list)
    gradient_norms: list = field(default_factory=list)
    converged: list = field(default_factory=list)


def rotate_covariance(cov: np.ndarray, Rz: np.ndarray) -> np.ndarray:
    """Map a state covariance across a frame rotation (world-axes blocks only)."""
    M = np.eye(DIM)
    M[P, P] = Rz
    M[V, V] = Rz
    return M @ cov @ M.T


def body_velocity_covariance(state: NavState, cov: np.ndarray) -> np.ndarray:
    """3x3 covariance of the body-axes velocity given a full state covariance."""
    J = np.zeros((3, DIM))
    J[:, TH] = skew(state.v)
    J[:, V] = state.R.matrix().T
    return J @ cov @ J.T


class SlidingWindowEstimator:
    def __init__(self, config: EstimatorConfig | None = None):
        self.config = config or EstimatorConfig()
        self.global_from_odom: Pose3 | None = None
        self._init_state: NavState | None = None
        self.values: dict[int, NavState] = {}
        self.times: list[float] = []
        self.keys: list[int] = []
        self.factors: list = []
        self._next_key = 0
        self._last_imu: ImuSample | None = None
        self._covariance: np.ndarray | None = None
        self._imu_since_solve = 0
        self._dirty = False
        self._last_fix: dict[str, GnssFix] = {}
        self._enc_prev: EncoderSample | None = None
        self._enc_acc: tuple[float, np.ndarray] | None = None  # (t_start, [x, y, yaw])
        self.degenerate = False
        self.stats = EstimatorStats()
        self.last_solve = None
        self.imu_period = self.config.imu_period
        self._deferred: list = []

    # ------------------------------------------------------------------ setup

    @property
    def initialized(self) -> bool:
        return self._init_state is not None

    def initialize(self, first_fixes, config: EstimatorConfig | None = None) -> None:
        """Set the odometry frame and initial state from the first GNSS fixes.

        With a front/rear pair the heading comes from the antenna baseline;
        with a single antenna the configured ``initial_yaw`` is used.
        """
        if config is not None:
            self.config = config
        cfg = self.config
        fixes = [f for f in first_fixes if fac.gate_gnss(f, cfg.gate_threshold)]
        if not fixes:
            raise EstimatorError("no gated GNSS fix available for initialization")
        by_id = {f.sensor_id: f for f in fixes}
        yaw, pitch = cfg.initial_yaw, 0.0
        if "front" in by_id and "rear" in by_id:
            att = fac.dual_gnss_attitude(by_id["front"], by_id["rear"], cfg.extrinsics)
            if att is not None:
                yaw, pitch = att
        ref = by_id.get("front") or by_id.get("center") or fixes[0]
        R_global = Rot3.from_ypr(yaw, -pitch, 0.0)
        p0 = fac.gnss_to_imu_position(ref, R_global, cfg.extrinsics)
        self.global_from_odom = Pose3(Rot3.yaw_rotation(yaw), p0)
        R_odom = Rot3.yaw_rotation(yaw).inverse() * R_global
        self._init_state = NavState(ref.t, np.zeros(3), R_odom, np.zeros(3), ImuBias())
        log.debug("initialized at t=%.3f yaw=%.4f p0=%s", ref.t, yaw, p0)

    # ------------------------------------------------------------- frames

    def _rz(self) -> np.ndarray:
        return self.global_from_odom.rotation.matrix()

    def to_global(self, s: NavState) -> NavState:
        T = self.global_from_odom
        return NavState(s.t, T.transform_point(s.p), T.rotation * s.R, s.v, s.bias)

    def to_global_cov(self, cov: np.ndarray) -> np.ndarray:
        return rotate_covariance(cov, self._rz())

    def _to_odom_position(self, p) -> np.ndarray:
        return self.global_from_odom.inverse().transform_point(p)

    def _to_odom_fix(self, fix: GnssFix) -> GnssFix:
        Rz = self._rz()
        return GnssFix(fix.t, self._to_odom_position(fix.position), Rz.T @ fix.position_cov @ Rz, fix.sensor_id)

    # ------------------------------------------------------------ window

    @property
    def newest_key(self) -> int:
        return self.keys[-1]

    def _add_value(self, state: NavState) -> int:
        key = self._next_key
        self._next_key += 1
        self.values[key] = state
        self.keys.append(key)
        self.times.append(state.t)
        return key

    def nearest_key(self, t: float) -> int | None:
        """Value nearest ``t`` (ties toward the earlier value); ``None`` if before the window."""
        if not self.keys:
            return None
        tol = self.config.association_periods * self.imu_period
        if t < self.times[0] - tol:
            return None
        i = bisect.bisect_left(self.times, t)
        if i == 0:
            return self.keys[0]
        if i == len(self.times):
            return self.keys[-1]
        before, after = self.times[i - 1], self.times[i]
        return self.keys[i - 1] if t - before <= after - t else self.keys[i]

    # ------------------------------------------------------------- events

    def on_imu(self, sample: ImuSample) -> StateWithCovariance:
        if not self.initialized:
            raise EstimatorError("estimator not initialized")
        if self._last_imu is not None and not sample.t > self._last_imu.t:
            raise EstimatorError(f"IMU sample at t={sample.t} not after t={self._last_imu.t}")
        if not self.keys:
            state = self._init_state.with_time(sample.t)
            key = self._add_value(state)
            cov = self.config.prior_covariance()
            self.factors.append(fac.PriorFactor(key, state, cov))
            self._covariance = cov
            self._last_imu = sample
            return self._output(state, cov)

        if self._dirty or self._imu_since_solve >= self.config.solve_every_n_imu:
            self.optimize()

        t0 = time.perf_counter()
        prev = self._last_imu
        last_key = self.newest_key
        last_state = self.values[last_key]
        preint = PreintegratedImu(self.config.imu_noise, last_state.bias)
        preint.integrate(prev.gyro, prev.accel, sample.t - prev.t)
        # keep value timestamps exactly consistent with the integrated interval
        new_state = predict(last_state, preint)
        key = self._add_value(new_state)
        self.factors.append(fac.ImuFactor(last_key, key, preint))
        self._covariance = propagate_covariance(self._covariance, last_state, new_state, preint)
        self._last_imu = sample
        self._imu_since_solve += 1
        self.imu_period = sample.t - prev.t
        out = self._output(new_state, self._covariance)
        self.stats.predict_latency.append(time.perf_counter() - t0)
        return out

    def _output(self, state: NavState, cov: np.ndarray) -> StateWithCovariance:
        return StateWithCovariance(self.to_global(state), self.to_global_cov(cov))

    def _attach_ok(self, key) -> bool:
        if key is None:
            self.stats.dropped_measurements += 1
            return False
        return True

    def on_gnss(self, fix: GnssFix) -> None:
        if not self.initialized:
            raise EstimatorError("estimator not initialized")
        if not fac.gate_gnss(fix, self.config.gate_threshold):
            self.stats.gated_gnss += 1
            return
        key = self.nearest_key(fix.t)
        if not self._attach_ok(key):
            return
        fix_o = self._to_odom_fix(fix)
        R_t = self.values[key].R
        p_imu = fac.gnss_to_imu_position(fix_o, R_t, self.config.extrinsics)
        self.factors.append(fac.GnssUnaryFactor(key, p_imu, fix_o.position_cov))
        self._dirty = True

        self._last_fix[fix.sensor_id] = fix_o
        if self.config.use_attitude and fix.sensor_id in ("front", "rear"):
            other = self._last_fix.get("rear" if fix.sensor_id == "front" else "front")
            if other is not None:
                front, rear = (fix_o, other) if fix.sensor_id == "front" else (other, fix_o)
                att = fac.dual_gnss_attitude(front, rear, self.config.extrinsics)
                if att is not None:
                    cov = fac.attitude_covariance(front, rear, self.config.extrinsics)
                    baseline = fac.antenna_baseline(self.config.extrinsics)
                    self.factors.append(fac.GnssAttitudeFactor(key, att[0], att[1], cov, baseline))
                    del self._last_fix["front"], self._last_fix["rear"]

    def on_lidar_odom(self, odom: LidarOdom) -> None:
        if not self.initialized:
            raise EstimatorError("estimator not initialized")
        ki, kj = self.nearest_key(odom.t_prev), self.nearest_key(odom.t_curr)
        if not (self._attach_ok(ki) and self._attach_ok(kj)):
            return
        if kj <= ki:
            self.stats.dropped_measurements += 1
            return
        ext = self.config.extrinsics.lidar(odom.sensor_id)
        delta = fac.lidar_to_imu(odom.delta, ext)
        cov = fac.lidar_covariance_to_imu(odom.covariance, ext)
        self.factors.append(fac.BetweenPoseFactor(ki, kj, delta, cov))
        self._dirty = True

    def on_encoder(self, sample: EncoderSample) -> None:
        """Accumulate rear-axle arcs; emit one kinematic factor per ``kinematic_interval``."""
        if not self.initialized:
            raise EstimatorError("estimator not initialized")
        prev = self._enc_prev
        self._enc_prev = sample
        if prev is None or not self.keys:
            self._enc_acc = None
            return
        dt = sample.t - prev.t
        if not dt > 0:
            return
        mid = EncoderSample(sample.t, 0.5 * (prev.v_x + sample.v_x), 0.5 * (prev.steer + sample.steer))
        dx, dy, dyaw, _ = fac.kinematic_delta(mid, dt, self.config.extrinsics.wheelbase)
        if self._enc_acc is None:
            self._enc_acc = (prev.t, np.zeros(3))
        t_start, acc = self._enc_acc
        c, s = math.cos(acc[2]), math.sin(acc[2])
        acc = np.array([acc[0] + c * dx - s * dy, acc[1] + s * dx + c * dy, acc[2] + dyaw])
        self._enc_acc = (t_start, acc)
        if sample.t - t_start < self.config.kinematic_interval - 1e-9:
            return
        self._enc_acc = None
        ki, kj = self.nearest_key(t_start), self.nearest_key(sample.t)
        if not (self._attach_ok(ki) and self._attach_ok(kj)) or kj <= ki:
            return
        cfg = self.config
        cov = np.diag([cfg.kinematic_sigma_xy**2] * 2 + [cfg.kinematic_sigma_yaw**2, cfg.kinematic_sigma_v**2])
        self.factors.append(
            fac.KinematicBetweenFactor(ki, kj, acc, sample.v_x, cov, cfg.extrinsics.imu_from_rear_axle)
        )
        self._dirty = True

    def process(self, event):
        """Dispatch one log event; returns the IMU-rate output for IMU samples.

        Measurements stamped after the newest value wait until the IMU sample
        that reaches their timestamp has been integrated.
        """
        if isinstance(event, ImuSample):
            if not self.initialized:
                return None
            out = self.on_imu(event)
            if self._deferred and self._deferred[0].t <= self.times[-1] + TIME_EPS:
                ready = [e for e in self._deferred if e.t <= self.times[-1] + TIME_EPS]
                self._deferred = [e for e in self._deferred if e.t > self.times[-1] + TIME_EPS]
                for e in ready:
                    self._dispatch(e)
            return out
        if self.keys and event.t > self.times[-1] + TIME_EPS and not isinstance(event, GroundTruth):
            self._deferred.append(event)
            return None
        self._dispatch(event)
        return None

    def _dispatch(self, event) -> None:
        if isinstance(event, GnssFix):
            if not self.initialized:
                self._pending_init(event)
            else:
                self.on_gnss(event)
        elif isinstance(event, LidarOdom):
            if self.initialized and self.keys:
                self.on_lidar_odom(event)
        elif isinstance(event, EncoderSample):
            if self.initialized:
                self.on_encoder(event)

    def _pending_init(self, fix: GnssFix) -> None:
        if not fac.gate_gnss(fix, self.config.gate_threshold):
            return
        pending = getattr(self, "_init_fixes", {})
        pending[fix.sensor_id] = fix
        self._init_fixes = pending
        if self.config.use_attitude and "front" in pending and "rear" in pending:
            if abs(pending["front"].t - pending["rear"].t) < fac.DUAL_GNSS_MAX_DT:
                self.initialize([pending["front"], pending["rear"]])
            return
        if not (self.config.use_attitude and fix.sensor_id in ("front", "rear")):
            self.initialize([fix])

    # ---------------------------------------------------------- optimize

    def optimize(self) -> TrajectoryEstimate:
        if len(self.keys) < 2:
            raise EstimatorError("need at least two values to optimize")
        t0 = time.perf_counter()
        dims = {k: DIM for k in self.keys}
        problem = Problem(self.keys, dims, self.factors)
        result = levenberg_marquardt(problem, self.values, self.config.lm)
        self.values = {k: result.values[k] for k in self.keys}
        cov = result.marginal_covariance(self.newest_key)
        if result.degenerate:
            self.degenerate = True
            self.stats.degenerate_solves += 1
        self._covariance = cov
        self._dirty = False
        self._imu_since_solve = 0
        self.last_solve = result
        self.stats.solves += 1
        self.stats.solve_sizes.append(len(self.keys))
        self.stats.gradient_norms.append(result.gradient_norm)
        self.stats.converged.append(bool(result.converged))
        window = [self.values[k] for k in self.keys]
        self.slide_window()
        self.stats.solve_latency.append(time.perf_counter() - t0)
        return TrajectoryEstimate(
            window,
            self.global_from_odom,
            self.to_global_cov(cov),
            result.cost,
            result.iterations,
            result.gradient_norm,
            result.converged,
            result.degenerate,
        )

    def current(self) -> StateWithCovariance:
        return self._output(self.values[self.newest_key], self._covariance)

    def slide_window(self) -> None:
        """Marginalize values older than ``window_length`` into a prior on the new oldest value.

        The cut moves forward to the first value no between-factor spans, so
        lidar and kinematic factors are never split; the removed factors are
        folded into a Gaussian prior on the cut value by a Schur complement
        of their linearization at the current estimate.
        """
        if len(self.keys) < 2 or self.times[-1] - self.times[0] <= self.config.window_length:
            return
        target = self.times[-1] - self.config.window_length
        start = bisect.bisect_left(self.times, target - 1e-9)
        start = min(start, len(self.keys) - 1)
        pos = {k: i for i, k in enumerate(self.keys)}
        spans = [(pos[min(f.keys)], pos[max(f.keys)]) for f in self.factors if len(f.keys) > 1]
        crossing = np.zeros(len(self.keys) + 1, dtype=int)
        for a, b in spans:
            if b - a > 1:
                crossing[a + 1] += 1
                crossing[b] -= 1
        inside = np.cumsum(crossing)  # inside[i] > 0: some factor spans strictly across index i
        cut = start
        while cut < len(self.keys) - 1 and inside[cut] > 0:
            cut += 1
        if inside[cut] > 0:
            cut = start
        if cut == 0:
            return
        cut_key = self.keys[cut]
        removed = set(self.keys[:cut])
        marg_keys = self.keys[:cut] + [cut_key]
        marg_set = set(marg_keys)
        to_marg, kept = [], []
        for f in self.factors:
            ks = set(f.keys)
            if ks & removed:
                if ks <= marg_set:
                    to_marg.append(f)
                else:
                    self.stats.dropped_crossing_factors += 1
            else:
                kept.append(f)
        self.factors = [self._marginal_prior(marg_keys, to_marg)] + kept
        for k in self.keys[:cut]:
            del self.values[k]
        self.keys = self.keys[cut:]
        self.times = self.times[cut:]

    def _marginal_prior(self, marg_keys: list, factors: list) -> fac.PriorFactor:
        problem = Problem(marg_keys, {k: DIM for k in marg_keys}, factors)
        ab, g, _ = problem.linearize(self.values)
        H = banded_to_dense(ab)
        n = problem.n
        r = slice(0, n - DIM)
        k = slice(n - DIM, n)
        Hrr = H[r, r]
        Hrk = H[r, k]
        chol = np.linalg.cholesky(Hrr)
        X = np.linalg.solve(chol, np.column_stack([Hrk, g[r]]))
        S = H[k, k] - X[:, :DIM].T @ X[:, :DIM]
        gk = g[k] - X[:, :DIM].T @ X[:, DIM]
        S = 0.5 * (S + S.T)
        cut_key = marg_keys[-1]
        mean = self.values[cut_key].retract(-np.linalg.solve(S, gk))
        L = np.linalg.cholesky(S)
        return fac.PriorFactor(cut_key, mean, sqrt_information=L.T)
