"""Ground-truth trajectories and synthetic sensor logs.

The reference point of every trajectory is the rear axle, which moves along
a planar path without side slip (kinematic bicycle). The IMU rides at a fixed
offset from the axle, so its velocity, acceleration and angular rate follow
from rigid-body kinematics. All derivatives are analytic; only the
clothoid-cornered block path needs quadrature for positions.

IMU samples are the mean angular rate and mean specific force over the
following sample interval (integrating-IMU convention). Forward-Euler
preintegration of noise-free samples therefore reproduces the true rotation
and velocity increments exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fgstate.se3 import Pose3, Rot3, so3_log
from fgstate.sensor_log import (
    EncoderSample,
    Extrinsics,
    GnssFix,
    GroundTruth,
    ImuSample,
    LidarFrame,
    PointCloudWriter,
    order_events,
    write_log,
)
from fgstate.state import ImuBias, NavState

GRAVITY = np.array([0.0, 0.0, -9.81])
MAX_STEER = 0.7  # rad


class SimulationError(ValueError):
    pass


# ---------------------------------------------------------------- paths


class Path2D:
    """Planar curve ``r(u)`` with derivatives up to third order."""

    period: float

    def derivatives(self, u: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        raise NotImplementedError


class CirclePath(Path2D):
    def __init__(self, radius: float):
        self.radius = radius
        self.period = 2 * math.pi

    def derivatives(self, u):
        R = self.radius
        c, s = math.cos(u), math.sin(u)
        return (
            np.array([R * c, R * s]),
            np.array([-R * s, R * c]),
            np.array([-R * c, -R * s]),
            np.array([R * s, -R * c]),
        )


class LinePath(Path2D):
    def __init__(self):
        self.period = math.inf

    def derivatives(self, u):
        return np.array([u, 0.0]), np.array([1.0, 0.0]), np.zeros(2), np.zeros(2)


class FigureEightPath(Path2D):
    """Lemniscate of Gerono: ``(a sin u, a sin u cos u)``."""

    def __init__(self, half_width: float):
        self.a = half_width
        self.period = 2 * math.pi

    def derivatives(self, u):
        a = self.a
        s, c = math.sin(u), math.cos(u)
        s2, c2 = math.sin(2 * u), math.cos(2 * u)
        return (
            np.array([a * s, 0.5 * a * s2]),
            np.array([a * c, a * c2]),
            np.array([-a * s, -2 * a * s2]),
            np.array([-a * c, -4 * a * c2]),
        )


class BlockPath(Path2D):
    """Rectangle with clothoid-blended circular corners, parametrized by arc length.

    Curvature ramps up with a half-cosine over ``ramp`` meters, holds
    ``1 / corner_radius`` and ramps down; each corner turns exactly 90 deg.
    """

    def __init__(self, length: float, width: float, corner_radius: float = 8.0, ramp: float = 4.0):
        k0 = 1.0 / corner_radius
        arc = math.pi / (2 * k0) - ramp
        if arc < 0:
            raise SimulationError("corner ramp too long for the corner radius")
        self.k0, self.ramp, self.arc = k0, ramp, arc
        self.sides = [length, width, length, width]
        self.segments = []  # (start_s, kind, length, heading0)
        s, heading = 0.0, 0.0
        for side in self.sides:
            for kind, seg_len in (("line", side), ("up", ramp), ("arc", arc), ("down", ramp)):
                self.segments.append((s, kind, seg_len, heading))
                heading += self._turn(kind, seg_len)
                s += seg_len
        self.period = s
        self._starts = np.array([seg[0] for seg in self.segments])
        self._knot_h = 0.25
        n = int(math.ceil(self.period / self._knot_h)) + 1
        knots = np.zeros((n, 2))
        for i in range(1, n):
            a, b = (i - 1) * self._knot_h, i * self._knot_h
            knots[i] = knots[i - 1] + self._integrate(a, b)
        self._knots = knots

    def _turn(self, kind: str, length: float) -> float:
        if kind == "line":
            return 0.0
        if kind == "arc":
            return self.k0 * length
        return 0.5 * self.k0 * length

    def _local(self, s: float):
        s = s % self.period
        i = int(np.searchsorted(self._starts, s, side="right")) - 1
        s0, kind, _, h0 = self.segments[i]
        x = s - s0
        k0, L = self.k0, self.ramp
        if kind == "line":
            return h0, 0.0, 0.0, 0.0
        if kind == "arc":
            return h0 + k0 * x, k0, 0.0, 0.0
        w = math.pi / L
        if kind == "up":
            heading = h0 + 0.5 * k0 * (x - math.sin(w * x) / w)
            return heading, 0.5 * k0 * (1 - math.cos(w * x)), 0.5 * k0 * w * math.sin(w * x), 0.5 * k0 * w * w * math.cos(w * x)
        heading = h0 + 0.5 * k0 * (x + math.sin(w * x) / w)
        return heading, 0.5 * k0 * (1 + math.cos(w * x)), -0.5 * k0 * w * math.sin(w * x), -0.5 * k0 * w * w * math.cos(w * x)

    _GL_X, _GL_W = np.polynomial.legendre.leggauss(10)

    def _integrate(self, a: float, b: float) -> np.ndarray:
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        out = np.zeros(2)
        for x, w in zip(self._GL_X, self._GL_W):
            h = self._local(mid + half * x)[0]
            out += w * np.array([math.cos(h), math.sin(h)])
        return out * half

    def derivatives(self, u):
        laps, s = divmod(u, self.period)
        i = min(int(s // self._knot_h), len(self._knots) - 1)
        r = self._knots[i] + self._integrate(i * self._knot_h, s)
        h, k, dk, _ = self._local(s)
        t = np.array([math.cos(h), math.sin(h)])
        nrm = np.array([-math.sin(h), math.cos(h)])
        return r, t, k * nrm, dk * nrm - k * k * t


# ------------------------------------------------------------ trajectory


@dataclass
class TrajectorySpec:
    kind: str = "figure_eight"
    speed: float = 5.0
    duration: float = 120.0
    size: float = 40.0  # circle radius, figure-eight half width, block length
    width: float = 30.0  # block width
    ramp_time: float = 3.0
    start_stationary: float = 1.0
    imu_rate: float = 100.0
    gnss_rate: float = 10.0
    encoder_rate: float = 50.0
    lidar_rate: float = 10.0

    def __post_init__(self):
        for name in ("duration", "imu_rate", "gnss_rate", "encoder_rate", "lidar_rate"):
            if not getattr(self, name) > 0:
                raise SimulationError(f"{name} must be positive")

    def path(self) -> Path2D:
        if self.kind == "circle":
            return CirclePath(self.size)
        if self.kind in ("figure_eight", "figure-eight"):
            return FigureEightPath(self.size)
        if self.kind in ("block", "polyline", "polyline-with-fillets"):
            return BlockPath(self.size, self.width)
        if self.kind in ("line", "straight"):
            return LinePath()
        raise SimulationError(f"unknown trajectory kind {self.kind!r}")


@dataclass
class AxleState:
    """Planar rear-axle kinematics at one instant."""

    t: float
    position: np.ndarray
    yaw: float
    yaw_rate: float
    yaw_accel: float
    velocity: np.ndarray
    accel: np.ndarray
    speed: float
    curvature: float


class Trajectory:
    """Time-parametrized path: ``u(t)`` ramps smoothly from rest to a constant rate."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        self.path = spec.path()
        if math.isfinite(self.path.period):
            n = 2000
            us = np.linspace(0, self.path.period, n, endpoint=False)
            mean_norm = np.mean([np.linalg.norm(self.path.derivatives(u)[1]) for u in us])
        else:
            mean_norm = 1.0
        self.rate = spec.speed / mean_norm

    def warp(self, t: float) -> tuple[float, float, float]:
        """``u, du/dt, d2u/dt2``: stationary, smoothstep ramp, then constant rate."""
        W, T0, Tr = self.rate, self.spec.start_stationary, self.spec.ramp_time
        x = t - T0
        if x <= 0:
            return 0.0, 0.0, 0.0
        if x < Tr:
            tau = x / Tr
            return W * Tr * (tau**3 - 0.5 * tau**4), W * (3 * tau**2 - 2 * tau**3), W * (6 * tau - 6 * tau**2) / Tr
        return W * (0.5 * Tr + (x - Tr)), W, 0.0

    def axle(self, t: float) -> AxleState:
        u, ud, udd = self.warp(t)
        r, r1, r2, r3 = self.path.derivatives(u)
        D = r1 @ r1
        N = r1[0] * r2[1] - r1[1] * r2[0]
        k = N / D
        dN = r1[0] * r3[1] - r1[1] * r3[0]
        dD = 2 * (r1 @ r2)
        dk = (dN * D - N * dD) / (D * D)
        norm = math.sqrt(D)
        return AxleState(
            t=t,
            position=r,
            yaw=math.atan2(r1[1], r1[0]),
            yaw_rate=ud * k,
            yaw_accel=udd * k + ud * ud * dk,
            velocity=r1 * ud,
            accel=r2 * ud * ud + r1 * udd,
            speed=norm * ud,
            curvature=N / (D * norm),
        )

    def imu_state(self, t: float, axle_from_imu: Pose3, bias: ImuBias | None = None) -> tuple[NavState, np.ndarray]:
        """True IMU state and body angular rate at ``t``."""
        a = self.axle(t)
        R_axle = Rot3.yaw_rotation(a.yaw)
        lever = R_axle.rotate(axle_from_imu.translation)
        w = np.array([0.0, 0.0, a.yaw_rate])
        alpha = np.array([0.0, 0.0, a.yaw_accel])
        p_axle = np.array([a.position[0], a.position[1], 0.0])
        v_axle = np.array([a.velocity[0], a.velocity[1], 0.0])
        acc_axle = np.array([a.accel[0], a.accel[1], 0.0])
        p = p_axle + lever
        v = v_axle + np.cross(w, lever)
        acc = acc_axle + np.cross(alpha, lever) + np.cross(w, np.cross(w, lever))
        R = R_axle * axle_from_imu.rotation
        state = NavState.from_world_velocity(t, p, R, v, bias or ImuBias())
        return state, (acc, R.unrotate(w))


def generate_truth(spec: TrajectorySpec, extrinsics: Extrinsics | None = None, rate: float = 1000.0) -> list[NavState]:
    """Dense (default 1 kHz) ground-truth IMU states."""
    extrinsics = extrinsics or Extrinsics()
    traj = Trajectory(spec)
    axle_from_imu = extrinsics.imu_from_rear_axle.inverse()
    n = int(round(spec.duration * rate)) + 1
    return [traj.imu_state(i / rate, axle_from_imu)[0] for i in range(n)]


# ----------------------------------------------------------------- world


@dataclass
class WorldModel:
    """Axis-aligned boxes ``[xmin, ymin, zmin, xmax, ymax, zmax]`` and a lidar model."""

    boxes: np.ndarray
    ring_elevations: np.ndarray = field(default_factory=lambda: np.deg2rad(np.linspace(-8.0, 15.0, 16)))
    azimuth_count: int = 450
    max_range: float = 60.0
    range_sigma: float = 0.01

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 6)
        if len(self.boxes) == 0:
            raise SimulationError("world must contain at least one box")

    def ray_directions(self, azimuth_offset: float = 0.0) -> np.ndarray:
        az = azimuth_offset + np.arange(self.azimuth_count) * (2 * math.pi / self.azimuth_count)
        el = self.ring_elevations
        A, E = np.meshgrid(az, el)
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)

    def cast(self, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Hit distance per ray (inf on miss)."""
        lo, hi = self.boxes[:, :3], self.boxes[:, 3:]
        centers = 0.5 * (lo + hi)
        radius = 0.5 * np.linalg.norm(hi - lo, axis=1)
        near = np.linalg.norm(centers - origin, axis=1) - radius < self.max_range
        lo, hi = lo[near], hi[near]
        best = np.full(len(directions), np.inf)
        if len(lo) == 0:
            return best
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / directions
        for chunk in range(0, len(lo), 16):
            l, h = lo[chunk : chunk + 16], hi[chunk : chunk + 16]
            with np.errstate(invalid="ignore"):
                t1 = (l[None, :, :] - origin) * inv[:, None, :]
                t2 = (h[None, :, :] - origin) * inv[:, None, :]
            tmin = np.nanmax(np.minimum(t1, t2), axis=2)
            tmax = np.nanmin(np.maximum(t1, t2), axis=2)
            hit = (tmax >= tmin) & (tmin > 0)
            d = np.where(hit, tmin, np.inf).min(axis=1)
            best = np.minimum(best, d)
        best[best > self.max_range] = np.inf
        return best

    def scan(self, sensor_pose: Pose3, rng: np.random.Generator, noise: bool = True) -> np.ndarray:
        """Point cloud in the sensor frame; azimuths start at a random offset each scan."""
        offset = rng.uniform(0, 2 * math.pi / self.azimuth_count)
        dirs_s = self.ray_directions(offset)
        dirs_w = dirs_s @ sensor_pose.rotation.matrix().T
        d = self.cast(sensor_pose.translation, dirs_w)
        ok = np.isfinite(d)
        rng_d = d[ok]
        if noise and self.range_sigma > 0:
            rng_d = rng_d + rng.normal(0, self.range_sigma, len(rng_d))
        return dirs_s[ok] * rng_d[:, None]


def urban_world(traj: Trajectory, duration: float, seed: int = 0, clearance: float = 7.0, spacing: float = 14.0) -> WorldModel:
    """Buildings and poles on a jittered grid, kept clear of the driven path."""
    rng = np.random.default_rng(seed)
    ts = np.linspace(0, duration, 4000)
    pts = np.array([traj.axle(t).position for t in ts])
    lo, hi = pts.min(axis=0) - 35, pts.max(axis=0) + 35
    boxes = []
    for x in np.arange(lo[0], hi[0], spacing):
        for y in np.arange(lo[1], hi[1], spacing):
            cx, cy = x + rng.uniform(-3, 3), y + rng.uniform(-3, 3)
            if rng.random() < 0.3:
                hx = hy = 0.25  # pole
                height = rng.uniform(3, 6)
            else:
                hx, hy = rng.uniform(1.5, 5.0), rng.uniform(1.5, 5.0)
                height = rng.uniform(4, 15)
            dist = np.min(np.maximum(np.abs(pts - [cx, cy]) - [hx, hy], 0).sum(axis=1) ** 1)
            if dist < clearance:
                continue
            boxes.append([cx - hx, cy - hy, 0.0, cx + hx, cy + hy, height])
    return WorldModel(np.array(boxes))


# --------------------------------------------------------------- sensors


@dataclass
class SensorNoise:
    gyro_noise_density: float = 1e-3
    accel_noise_density: float = 1e-2
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4
    gyro_bias_sigma: float = 2e-3
    accel_bias_sigma: float = 5e-2
    gnss_sigma: float = 0.02
    encoder_speed_sigma: float = 0.02
    encoder_steer_sigma: float = 0.002
    lidar_range_sigma: float = 0.01

    @classmethod
    def noise_free(cls) -> SensorNoise:
        return cls(*([0.0] * 10))


def vehicle_extrinsics(vehicle: str = "quadricycle") -> Extrinsics:
    """Default sensor layout of the two simulated vehicles."""
    if vehicle == "quadricycle":
        return Extrinsics(
            imu_from_gnss_front=Pose3(Rot3(), (0.9, 0.0, 1.0)),
            imu_from_gnss_rear=Pose3(Rot3(), (-0.9, 0.0, 1.0)),
            imu_from_gnss_center=Pose3(Rot3(), (0.0, 0.0, 1.0)),
            imu_from_lidar={"front": Pose3(Rot3.from_ypr(0.02, 0.0, 0.0), (0.2, 0.0, 1.2))},
            imu_from_rear_axle=Pose3(Rot3(), (-0.8, 0.0, -0.5)),
            wheelbase=1.7,
        )
    if vehicle == "shuttle":
        return Extrinsics(
            imu_from_gnss_front=Pose3(Rot3(), (1.5, 0.0, 2.0)),
            imu_from_gnss_rear=Pose3(Rot3(), (-1.5, 0.0, 2.0)),
            imu_from_gnss_center=Pose3(Rot3(), (0.0, 0.0, 2.0)),
            imu_from_lidar={
                "front": Pose3(Rot3(), (2.0, 0.0, 0.4)),
                "rear": Pose3(Rot3.from_ypr(math.pi, 0.0, 0.0), (-2.0, 0.0, 0.4)),
            },
            imu_from_rear_axle=Pose3(Rot3(), (-1.4, 0.0, -0.6)),
            wheelbase=2.8,
        )
    raise SimulationError(f"unknown vehicle {vehicle!r}")


@dataclass
class SimulationSetup:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: SensorNoise = field(default_factory=SensorNoise)
    extrinsics: Extrinsics = field(default_factory=vehicle_extrinsics)
    gnss_sensors: tuple = ("front", "rear")
    lidar_sensors: tuple = ("front",)
    encoders: bool = True
    seed: int = 0


def _steer_for(curvature: float, wheelbase: float) -> float:
    steer = math.atan(wheelbase * curvature)
    if abs(steer) > MAX_STEER:
        raise SimulationError(
            f"trajectory needs steering {steer:.3f} rad beyond {MAX_STEER} rad; spec too aggressive"
        )
    return steer


def synthesize_sensors(setup: SimulationSetup, world: WorldModel | None = None, lidar_writer=None) -> list:
    """Measurement events plus GT records, time ordered and deterministic per seed.

    ``lidar_writer(t, sensor_id, points)`` receives each scan and returns the
    event to put in the log; when omitted, in-memory :class:`LidarFrame`
    events are returned.
    """
    spec, noise, ext = setup.trajectory, setup.noise, setup.extrinsics
    traj = Trajectory(spec)
    axle_from_imu = ext.imu_from_rear_axle.inverse()
    rng_imu = np.random.default_rng([setup.seed, 1])
    rng_gnss = np.random.default_rng([setup.seed, 2])
    rng_enc = np.random.default_rng([setup.seed, 3])
    rng_lidar = np.random.default_rng([setup.seed, 4])
    events = []

    dt = 1.0 / spec.imu_rate
    n_imu = int(math.floor(spec.duration * spec.imu_rate + 1e-9)) + 1
    bias_g = rng_imu.normal(0, noise.gyro_bias_sigma, 3) if noise.gyro_bias_sigma > 0 else np.zeros(3)
    bias_a = rng_imu.normal(0, noise.accel_bias_sigma, 3) if noise.accel_bias_sigma > 0 else np.zeros(3)
    states = [traj.imu_state(k / spec.imu_rate, axle_from_imu)[0] for k in range(n_imu + 1)]
    for k in range(n_imu):
        s0, s1 = states[k], states[k + 1]
        t = k / spec.imu_rate
        gyro = so3_log(s0.R.inverse() * s1.R) / dt
        accel = s0.R.unrotate((s1.v_world() - s0.v_world()) / dt - GRAVITY)
        bias = ImuBias(bias_g, bias_a)
        events.append(GroundTruth(t, NavState(t, s0.p, s0.R, s0.v, bias)))
        g_noise = rng_imu.normal(0, noise.gyro_noise_density / math.sqrt(dt), 3)
        a_noise = rng_imu.normal(0, noise.accel_noise_density / math.sqrt(dt), 3)
        events.append(ImuSample(t, gyro + bias_g + g_noise, accel + bias_a + a_noise))
        bias_g = bias_g + rng_imu.normal(0, noise.gyro_bias_walk * math.sqrt(dt), 3)
        bias_a = bias_a + rng_imu.normal(0, noise.accel_bias_walk * math.sqrt(dt), 3)

    n_gnss = int(math.floor(spec.duration * spec.gnss_rate + 1e-9)) + 1
    for k in range(n_gnss):
        t = k / spec.gnss_rate
        s, _ = traj.imu_state(t, axle_from_imu)
        for sid in setup.gnss_sensors:
            antenna = s.p + s.R.rotate(ext.imu_from_gnss(sid).translation)
            pos = antenna + (rng_gnss.normal(0, noise.gnss_sigma, 3) if noise.gnss_sigma > 0 else 0.0)
            var = max(noise.gnss_sigma, 1e-3) ** 2
            events.append(GnssFix(t, pos, np.eye(3) * var, sid))

    if setup.encoders:
        n_enc = int(math.floor(spec.duration * spec.encoder_rate + 1e-9)) + 1
        for k in range(n_enc):
            t = k / spec.encoder_rate
            a = traj.axle(t)
            v = a.speed + (rng_enc.normal(0, noise.encoder_speed_sigma) if noise.encoder_speed_sigma > 0 else 0.0)
            steer = _steer_for(a.curvature, ext.wheelbase)
            if noise.encoder_steer_sigma > 0:
                steer += rng_enc.normal(0, noise.encoder_steer_sigma)
            events.append(EncoderSample(t, v, steer))

    if setup.lidar_sensors:
        if world is None:
            world = urban_world(traj, spec.duration, seed=setup.seed)
        world.range_sigma = noise.lidar_range_sigma
        n_lidar = int(math.floor(spec.duration * spec.lidar_rate + 1e-9)) + 1
        for k in range(n_lidar):
            t = k / spec.lidar_rate
            s, _ = traj.imu_state(t, axle_from_imu)
            for sid in setup.lidar_sensors:
                pose = s.pose() * ext.lidar(sid)
                pts = world.scan(pose, rng_lidar, noise=noise.lidar_range_sigma > 0)
                if lidar_writer is None:
                    events.append(LidarFrame(t, pts, sid))
                else:
                    events.append(lidar_writer(t, sid, pts))
    return order_events(events)


def simulate_to_log(setup: SimulationSetup, log_path: str | Path, world: WorldModel | None = None) -> Path:
    """Write a full log; lidar scans go to ``<log>.<sensor>.pcd`` sidecars."""
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    writers = {}

    def write_scan(t, sid, pts):
        if sid not in writers:
            writers[sid] = PointCloudWriter(log_path.with_name(f"{log_path.name}.{sid}.pcd"))
        return writers[sid].write(t, sid, pts)

    try:
        events = synthesize_sensors(setup, world, write_scan)
    finally:
        for w in writers.values():
            w.close()
    header = f"synthetic {setup.trajectory.kind} run, seed {setup.seed}, duration {setup.trajectory.duration} s"
    write_log(log_path, events, header)
    return log_path
