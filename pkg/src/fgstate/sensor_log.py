"""Sensor records, the flat text log format, and scenario degradations.

Log format (UTF-8, one record per line, ``#`` starts a comment)::

    IMU      t gx gy gz ax ay az
    GNSS     t sensor_id x y z c00 c01 c02 c11 c12 c22
    ENC      t v_x steer
    LIDARODO t sensor_id t_prev qw qx qy qz x y z c(36 values, row major)
    LIDARPCD t sensor_id path offset count
    GT       t x y z qw qx qy qz vx vy vz bgx bgy bgz bax bay baz

``t`` is double-precision seconds. GNSS positions are local ENU meters with
the upper triangle of the 3x3 covariance. LIDARPCD points live in a sidecar
file of little-endian float32 xyz triplets; ``path`` is relative to the log
file, ``offset`` is a byte offset and ``count`` a number of points. GT carries
the IMU ground-truth state (velocity in body axes) for simulated logs.

Events are ordered by timestamp; ties break by the fixed sensor priority
IMU < GNSS < ENC < LIDAR, then GT last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from fgstate.se3 import Pose3, Rot3
from fgstate.state import ImuBias, NavState

CEP_TO_SIGMA = 1.1774  # Rayleigh: CEP = sqrt(2 ln 2) * sigma

GNSS_SENSORS = ("front", "rear", "center")


class LogFormatError(ValueError):
    """Malformed or non-monotone sensor log."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))
        if not (math.isfinite(self.t) and np.all(np.isfinite(self.gyro)) and np.all(np.isfinite(self.accel))):
            raise ValueError("IMU sample must be finite")
        if np.linalg.norm(self.accel) >= 200.0 or np.linalg.norm(self.gyro) >= 50.0:
            raise ValueError(f"IMU sample at t={self.t} outside sanity bounds")


@dataclass(frozen=True)
class GnssFix:
    t: float
    position: np.ndarray
    position_cov: np.ndarray
    sensor_id: str = "front"

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        cov = np.asarray(self.position_cov, dtype=float).reshape(3, 3)
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("GNSS covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("GNSS covariance must be positive semidefinite")
        object.__setattr__(self, "position_cov", cov)
        if self.sensor_id not in GNSS_SENSORS:
            raise ValueError(f"unknown GNSS sensor id {self.sensor_id!r}")


@dataclass(frozen=True)
class EncoderSample:
    t: float
    v_x: float
    steer: float

    def __post_init__(self):
        if not abs(self.steer) < math.pi / 2:
            raise ValueError(f"steering angle {self.steer} outside (-pi/2, pi/2)")


@dataclass(frozen=True, eq=False)
class LidarFrame:
    t: float
    points: np.ndarray
    sensor_id: str = "front"

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float).reshape(-1, 3))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class LidarOdom:
    """Relative transform ``prev_from_curr`` of the lidar between two frames."""

    t_prev: float
    t_curr: float
    delta: Pose3
    covariance: np.ndarray
    sensor_id: str = "front"

    @property
    def t(self) -> float:
        return self.t_curr

    def __post_init__(self):
        if not self.t_curr > self.t_prev:
            raise ValueError("lidar odometry must span forward in time")
        object.__setattr__(self, "covariance", np.asarray(self.covariance, dtype=float).reshape(6, 6))


@dataclass(frozen=True, eq=False)
class LidarFrameRef:
    """Lazy reference to a point cloud stored in a sidecar file."""

    t: float
    sensor_id: str
    path: Path
    offset: int
    count: int

    def load(self) -> LidarFrame:
        pts = np.fromfile(self.path, dtype="<f4", count=3 * self.count, offset=self.offset)
        return LidarFrame(self.t, pts.astype(float).reshape(-1, 3), self.sensor_id)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    t: float
    state: NavState


SensorEvent = Union[ImuSample, GnssFix, EncoderSample, LidarOdom, LidarFrame, LidarFrameRef, GroundTruth]

_PRIORITY = {ImuSample: 0, GnssFix: 1, EncoderSample: 2, LidarOdom: 3, LidarFrame: 3, LidarFrameRef: 3, GroundTruth: 4}


def priority(event) -> int:
    return _PRIORITY[type(event)]


def sort_key(event) -> tuple[float, int]:
    return (event.t, _PRIORITY[type(event)])


def stream_key(event) -> tuple:
    """Events sharing a key form one sensor stream (monotone timestamps)."""
    sid = getattr(event, "sensor_id", None)
    return ("LidarFrame" if isinstance(event, (LidarFrame, LidarFrameRef)) else type(event).__name__, sid)


@dataclass
class Extrinsics:
    """Static transforms ``imu_from_<sensor>`` and the vehicle wheelbase."""

    imu_from_gnss_front: Pose3 = field(default_factory=Pose3)
    imu_from_gnss_rear: Pose3 = field(default_factory=Pose3)
    imu_from_gnss_center: Pose3 = field(default_factory=Pose3)
    imu_from_lidar: dict[str, Pose3] = field(default_factory=lambda: {"front": Pose3()})
    imu_from_rear_axle: Pose3 = field(default_factory=Pose3)
    wheelbase: float = 2.0

    def __post_init__(self):
        if not self.wheelbase > 0:
            raise ValueError("wheelbase must be positive")
        if isinstance(self.imu_from_lidar, Pose3):
            self.imu_from_lidar = {"front": self.imu_from_lidar}

    def imu_from_gnss(self, sensor_id: str) -> Pose3:
        try:
            return getattr(self, f"imu_from_gnss_{sensor_id}")
        except AttributeError:
            raise KeyError(f"no extrinsic configured for GNSS sensor {sensor_id!r}") from None

    def lidar(self, sensor_id: str) -> Pose3:
        try:
            return self.imu_from_lidar[sensor_id]
        except KeyError:
            raise KeyError(f"no extrinsic configured for lidar {sensor_id!r}") from None


@dataclass
class Scenario:
    """Degradations applied to a clean log before estimation.

    ``gnss_noise_cep`` is a circular error probable in meters (0 disables
    injection). ``gnss_outage`` is ``(t_start, t_end)``; ``t_end`` may be inf.
    """

    gnss_noise_cep: float = 0.0
    gnss_outage: tuple[float, float] | None = None
    disabled_sensors: frozenset = frozenset()
    rng_seed: int = 0

    def __post_init__(self):
        if self.gnss_outage is not None:
            a, b = self.gnss_outage
            if not b > a:
                raise ValueError(f"outage end {b} must follow start {a}")
            self.gnss_outage = (float(a), float(b))
        self.disabled_sensors = frozenset(self.disabled_sensors)
        if self.gnss_noise_cep < 0:
            raise ValueError("CEP must be non-negative")

    @property
    def gnss_noise_sigma(self) -> float:
        return self.gnss_noise_cep / CEP_TO_SIGMA

    def in_outage(self, t: float) -> bool:
        return self.gnss_outage is not None and self.gnss_outage[0] <= t <= self.gnss_outage[1]


def sensor_name(event) -> str:
    """Name used by ``Scenario.disabled_sensors``: imu, gnss_<id>, encoder, lidar_<id>, gt."""
    if isinstance(event, ImuSample):
        return "imu"
    if isinstance(event, GnssFix):
        return f"gnss_{event.sensor_id}"
    if isinstance(event, EncoderSample):
        return "encoder"
    if isinstance(event, (LidarOdom, LidarFrameRef)):
        return f"lidar_{event.sensor_id}"
    return "gt"


def _is_disabled(event, disabled: frozenset) -> bool:
    name = sensor_name(event)
    return name in disabled or name.split("_")[0] in disabled


def apply_scenario(stream: Iterable, scenario: Scenario) -> list:
    """Drop disabled sensors and GNSS fixes inside the outage, then add GNSS noise.

    Noise is zero-mean Gaussian with the per-axis sigma implied by the CEP
    (applied to all three axes); the reported covariance of every perturbed
    fix is replaced by ``sigma^2 I``. Draws are consumed in stream order, so
    a fixed seed reproduces the output exactly.
    """
    rng = np.random.default_rng(scenario.rng_seed)
    sigma = scenario.gnss_noise_sigma
    out = []
    for ev in stream:
        if _is_disabled(ev, scenario.disabled_sensors):
            continue
        if isinstance(ev, GnssFix):
            if scenario.in_outage(ev.t):
                continue
            if sigma > 0:
                ev = replace(
                    ev,
                    position=ev.position + rng.normal(0.0, sigma, 3),
                    position_cov=np.eye(3) * sigma**2,
                )
        out.append(ev)
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def _floats(tokens: Sequence[str], n: int, line_no: int, tag: str) -> list[float]:
    if len(tokens) != n:
        raise LogFormatError(f"{tag} expects {n} numeric fields, got {len(tokens)}", line_no)
    try:
        return [float(tok) for tok in tokens]
    except ValueError as exc:
        raise LogFormatError(f"{tag}: {exc}", line_no) from None


def _upper(cov: np.ndarray) -> list[float]:
    return [cov[0, 0], cov[0, 1], cov[0, 2], cov[1, 1], cov[1, 2], cov[2, 2]]


def _from_upper(u: Sequence[float]) -> np.ndarray:
    c00, c01, c02, c11, c12, c22 = u
    return np.array([[c00, c01, c02], [c01, c11, c12], [c02, c12, c22]])


def format_event(ev, base_dir: Path | None = None) -> str:
    if isinstance(ev, ImuSample):
        vals = [ev.t, *ev.gyro, *ev.accel]
        return "IMU " + " ".join(map(_fmt, vals))
    if isinstance(ev, GnssFix):
        vals = [*ev.position, *_upper(ev.position_cov)]
        return f"GNSS {_fmt(ev.t)} {ev.sensor_id} " + " ".join(map(_fmt, vals))
    if isinstance(ev, EncoderSample):
        return f"ENC {_fmt(ev.t)} {_fmt(ev.v_x)} {_fmt(ev.steer)}"
    if isinstance(ev, LidarOdom):
        vals = [*ev.delta.rotation.q, *ev.delta.translation, *ev.covariance.ravel()]
        return f"LIDARODO {_fmt(ev.t_curr)} {ev.sensor_id} {_fmt(ev.t_prev)} " + " ".join(map(_fmt, vals))
    if isinstance(ev, LidarFrameRef):
        path = ev.path
        if base_dir is not None:
            try:
                path = Path(ev.path).resolve().relative_to(base_dir.resolve())
            except ValueError:
                pass
        return f"LIDARPCD {_fmt(ev.t)} {ev.sensor_id} {path} {ev.offset} {ev.count}"
    if isinstance(ev, GroundTruth):
        s = ev.state
        vals = [*s.p, *s.R.q, *s.v, *s.bias.gyro, *s.bias.accel]
        return f"GT {_fmt(ev.t)} " + " ".join(map(_fmt, vals))
    raise TypeError(f"cannot serialize {type(ev).__name__}")


def parse_line(line: str, line_no: int, base_dir: Path):
    tokens = line.split()
    tag = tokens[0]
    try:
        t = float(tokens[1])
    except (IndexError, ValueError):
        raise LogFormatError(f"{tag} record needs a numeric timestamp", line_no) from None
    if not math.isfinite(t):
        raise LogFormatError("timestamp must be finite", line_no)
    rest = tokens[2:]
    try:
        if tag == "IMU":
            v = _floats(rest, 6, line_no, tag)
            return ImuSample(t, v[:3], v[3:])
        if tag == "GNSS":
            if not rest:
                raise LogFormatError("GNSS record needs a sensor id", line_no)
            v = _floats(rest[1:], 9, line_no, tag)
            return GnssFix(t, v[:3], _from_upper(v[3:]), rest[0])
        if tag == "ENC":
            v = _floats(rest, 2, line_no, tag)
            return EncoderSample(t, v[0], v[1])
        if tag == "LIDARODO":
            if len(rest) < 2:
                raise LogFormatError("LIDARODO record too short", line_no)
            v = _floats(rest[1:], 1 + 7 + 36, line_no, tag)
            delta = Pose3(Rot3(tuple(v[1:5])), v[5:8])
            return LidarOdom(v[0], t, delta, np.array(v[8:]).reshape(6, 6), rest[0])
        if tag == "LIDARPCD":
            if len(rest) != 4:
                raise LogFormatError("LIDARPCD expects sensor_id path offset count", line_no)
            return LidarFrameRef(t, rest[0], base_dir / rest[1], int(rest[2]), int(rest[3]))
        if tag == "GT":
            v = _floats(rest, 16, line_no, tag)
            state = NavState(t, v[0:3], Rot3(tuple(v[3:7])), v[7:10], ImuBias(v[10:13], v[13:16]))
            return GroundTruth(t, state)
    except LogFormatError:
        raise
    except ValueError as exc:
        raise LogFormatError(f"{tag}: {exc}", line_no) from None
    raise LogFormatError(f"unknown record tag {tag!r}", line_no)


def order_events(events: Iterable) -> list:
    """Stable sort by (timestamp, sensor priority)."""
    return sorted(events, key=sort_key)


def parse_log(path: str | Path) -> list:
    """Read a log file into a time-ordered list of events."""
    path = Path(path)
    base_dir = path.parent
    events = []
    last_t: dict[tuple, tuple[float, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            ev = parse_line(line, line_no, base_dir)
            key = stream_key(ev)
            prev = last_t.get(key)
            if prev is not None and ev.t <= prev[0]:
                raise LogFormatError(
                    f"timestamp {ev.t!r} not after {prev[0]!r} (line {prev[1]}) in the same sensor stream", line_no
                )
            last_t[key] = (ev.t, line_no)
            events.append(ev)
    return order_events(events)


def write_log(path: str | Path, events: Iterable, header: str | None = None) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for ev in events:
            fh.write(format_event(ev, path.parent))
            fh.write("\n")


class PointCloudWriter:
    """Appends float32 point clouds to one sidecar file per lidar."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "wb")
        self._offset = 0

    def write(self, t: float, sensor_id: str, points: np.ndarray) -> LidarFrameRef:
        data = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
        self._fh.write(data.tobytes())
        ref = LidarFrameRef(t, sensor_id, self.path, self._offset, len(data))
        self._offset += data.nbytes
        return ref

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def iter_type(events: Iterable, kind) -> Iterator:
    return (ev for ev in events if isinstance(ev, kind))
