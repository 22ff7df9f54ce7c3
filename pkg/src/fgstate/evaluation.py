"""Replay, scoring and report generation.

A run prepares one event stream (simulated in memory or read from a log),
turns lidar frames into odometry, applies the scenario degradations, then
replays the stream through the factor-graph estimator and the EKF baseline.
Metrics and the trajectory CSV depend only on the configuration and seed;
timing goes to a separate runtime file so reports stay byte-identical.

Trajectory CSV columns, one row per IMU sample::

    t, truth_x, truth_y, truth_yaw, truth_v,
    fg_x, fg_y, fg_yaw, fg_v, fg_sigma_x, fg_sigma_y, fg_sigma_yaw, fg_sigma_v,
    ekf_x, ekf_y, ekf_yaw, ekf_v

Positions are meters in the local ENU frame, yaw in radians, ``v`` the
longitudinal body velocity of the IMU in m/s. Missing values are empty.
"""

from __future__ import annotations

import csv
import gc
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fgstate.config import RunConfig
from fgstate.ekf import EkfConfig, EkfRunner
from fgstate.estimator import (
    EstimatorConfig,
    EstimatorError,
    EstimatorStats,
    SlidingWindowEstimator,
    body_velocity_covariance,
)
from fgstate.icp import OdometryConfig, run_odometry
from fgstate.imu import ImuNoiseModel
from fgstate.se3 import wrap_angle
from fgstate.sensor_log import (
    GroundTruth,
    LidarFrame,
    LidarFrameRef,
    Scenario,
    apply_scenario,
    format_event,
    order_events,
    parse_line,
    parse_log,
)
from fgstate.simulation import (
    SensorNoise,
    SimulationSetup,
    TrajectorySpec,
    synthesize_sensors,
    vehicle_extrinsics,
)

log = logging.getLogger(__name__)

COMPONENTS = ("x", "y", "yaw", "v")
MATCH_TOLERANCE = 1e-3
EKF_NOTE = (
    "EKF baseline uses a planar unicycle model on the rear axle with encoder speed, "
    "gyro yaw rate and GNSS position updates; no tire-force or side-slip model."
)


class EvaluationError(RuntimeError):
    pass


class DegenerateEstimate(EvaluationError):
    pass


# ------------------------------------------------------------------ tracks


@dataclass
class Track:
    """Planar trajectory samples; ``sigma`` columns are optional."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    yaw: np.ndarray
    v: np.ndarray
    sigma: np.ndarray | None = None  # (n, 4) for x, y, yaw, v

    @classmethod
    def from_rows(cls, rows, with_sigma: bool = False) -> Track:
        a = np.asarray(rows, dtype=float).reshape(-1, 9 if with_sigma else 5)
        return cls(a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4], a[:, 5:9] if with_sigma else None)

    def __len__(self) -> int:
        return len(self.t)

    def component(self, name: str) -> np.ndarray:
        if name not in COMPONENTS:
            raise KeyError(f"unknown component {name!r}")
        return getattr(self, name)

    def window(self, t0: float, t1: float) -> Track:
        m = (self.t >= t0) & (self.t <= t1)
        return Track(self.t[m], self.x[m], self.y[m], self.yaw[m], self.v[m], None if self.sigma is None else self.sigma[m])


def match_times(est_t: np.ndarray, truth_t: np.ndarray, tol: float = MATCH_TOLERANCE) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (estimate, nearest truth) whose stamps differ by at most ``tol``."""
    est_t = np.asarray(est_t, dtype=float)
    truth_t = np.asarray(truth_t, dtype=float)
    if len(est_t) == 0 or len(truth_t) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    j = np.clip(np.searchsorted(truth_t, est_t), 1, len(truth_t) - 1) if len(truth_t) > 1 else np.zeros(len(est_t), int)
    if len(truth_t) > 1:
        left = j - 1
        j = np.where(np.abs(truth_t[left] - est_t) <= np.abs(truth_t[j] - est_t), left, j)
    ok = np.abs(truth_t[j] - est_t) <= tol
    return np.nonzero(ok)[0], j[ok]


def errors(estimate: Track, truth: Track, component: str) -> np.ndarray:
    i, j = match_times(estimate.t, truth.t)
    if len(i) == 0:
        raise EvaluationError("estimate and truth share no timestamps")
    e = estimate.component(component)[i] - truth.component(component)[j]
    if component == "yaw":
        e = np.array([wrap_angle(x) for x in e])
    return e


def rmse(estimate: Track, truth: Track, component: str) -> float:
    """Root mean square error over matched timestamps; yaw errors are wrapped."""
    e = errors(estimate, truth, component)
    return float(np.sqrt(np.mean(e**2)))


# -------------------------------------------------------------- data setup


def simulation_setup(cfg: RunConfig) -> SimulationSetup:
    tr, nz, sn = cfg["trajectory"], cfg["noise"], cfg["sensors"]
    spec = TrajectorySpec(kind=tr["kind"], speed=tr["speed"], duration=tr["duration"], size=tr["size"], width=tr["width"])
    noise = SensorNoise(**nz)
    return SimulationSetup(
        trajectory=spec,
        noise=noise,
        extrinsics=vehicle_extrinsics(tr["vehicle"]),
        gnss_sensors=sn["gnss"],
        lidar_sensors=sn["lidars"],
        encoders=sn["encoders"],
        seed=cfg.get("run", "seed"),
    )


def odometry_config(cfg: RunConfig) -> OdometryConfig:
    return OdometryConfig(voxel_size=cfg.get("lidar", "voxel_size"), initial_corr_dist=cfg.get("lidar", "initial_corr_dist"))


def _odometry_cache_header(ocfg: OdometryConfig) -> str:
    return f"# lidar odometry voxel={ocfg.voxel_size!r} corr={ocfg.initial_corr_dist!r}"


def cached_odometry(frames, ocfg: OdometryConfig, cache_path: Path | None) -> list:
    """Run lidar odometry, reusing ``cache_path`` when it was made with the same settings."""
    header = _odometry_cache_header(ocfg)
    if cache_path is not None and cache_path.exists():
        lines = cache_path.read_text(encoding="utf-8").splitlines()
        if lines and lines[0] == header:
            return [parse_line(line, n, cache_path.parent) for n, line in enumerate(lines[1:], start=2) if line]
    loaded = (f.load() if isinstance(f, LidarFrameRef) else f for f in frames)
    odom = run_odometry(loaded, ocfg)
    if cache_path is not None:
        text = "\n".join([header] + [format_event(o) for o in odom]) + "\n"
        cache_path.write_text(text, encoding="utf-8")
    return odom


@dataclass
class Dataset:
    """Measurement events with lidar already converted to odometry, plus truth."""

    events: list
    truth: Track
    truth_states: dict = field(repr=False, default_factory=dict)
    odometry_steps: int = 0
    prepare_seconds: float = 0.0


def truth_track(events) -> Track:
    rows = []
    for ev in events:
        if isinstance(ev, GroundTruth):
            s = ev.state
            rows.append((ev.t, s.p[0], s.p[1], s.R.yaw(), s.v[0]))
    return Track.from_rows(rows)


def prepare_dataset(cfg: RunConfig, log_path: str | Path | None = None) -> Dataset:
    """Load or simulate the raw stream and convert lidar frames to odometry."""
    t0 = time.perf_counter()
    log_path = log_path or cfg.get("run", "log") or None
    if log_path:
        log_path = Path(log_path)
        try:
            raw = parse_log(log_path)
        except OSError as exc:
            raise EvaluationError(f"cannot read log {log_path}: {exc}") from None
        cache = log_path.with_name(log_path.name + ".lidarodo")
    else:
        raw = synthesize_sensors(simulation_setup(cfg))
        cache = None
    frames = [e for e in raw if isinstance(e, (LidarFrame, LidarFrameRef))]
    others = [e for e in raw if not isinstance(e, (LidarFrame, LidarFrameRef))]
    odom = cached_odometry(frames, odometry_config(cfg), cache) if frames else []
    events = order_events(others + odom)
    gt = {round(e.t, 9): e.state for e in events if isinstance(e, GroundTruth)}
    return Dataset(events, truth_track(events), gt, len(odom), time.perf_counter() - t0)


def scenario(cfg: RunConfig) -> Scenario:
    sc = cfg["scenario"]
    outage = None if sc["outage_start"] is None else (sc["outage_start"], sc["outage_end"])
    return Scenario(gnss_noise_cep=sc["gnss_cep"], gnss_outage=outage, rng_seed=cfg.get("run", "seed"))


def degraded_streams(cfg: RunConfig, data: Dataset) -> tuple[list, list]:
    """Scenario-degraded streams for the factor graph and the EKF (same noise draws)."""
    common = apply_scenario(data.events, scenario(cfg))
    sc = cfg["scenario"]
    fg = apply_scenario(common, Scenario(disabled_sensors=frozenset(sc["fg_disabled"]) | {"gt"}))
    ekf = apply_scenario(common, Scenario(disabled_sensors=frozenset(sc["ekf_disabled"]) | {"gt"}))
    return fg, ekf


# ------------------------------------------------------------- estimation


def initial_yaw(cfg: RunConfig, data: Dataset) -> float:
    value = cfg.get("estimator", "initial_yaw")
    if value != "truth":
        return float(value)
    if len(data.truth) == 0:
        raise EvaluationError("initial_yaw = truth needs ground-truth records in the log")
    return float(data.truth.yaw[0])


def estimator_config(cfg: RunConfig, yaw0: float) -> EstimatorConfig:
    e = cfg["estimator"]
    noise = ImuNoiseModel(
        gyro_noise_density=e["gyro_noise_density"],
        accel_noise_density=e["accel_noise_density"],
        gyro_bias_walk=e["gyro_bias_walk"],
        accel_bias_walk=e["accel_bias_walk"],
    )
    return EstimatorConfig(
        window_length=e["window_length"],
        solve_every_n_imu=e["solve_every_n_imu"],
        gate_threshold=e["gate_threshold"],
        imu_noise=noise,
        extrinsics=vehicle_extrinsics(cfg.get("trajectory", "vehicle")),
        use_attitude=e["use_attitude"],
        initial_yaw=yaw0,
        prior_position_sigma=e["prior_position_sigma"],
        prior_yaw_sigma=e["prior_yaw_sigma"],
        prior_velocity_sigma=e["prior_velocity_sigma"],
        prior_gyro_bias_sigma=e["prior_gyro_bias_sigma"],
        prior_accel_bias_sigma=e["prior_accel_bias_sigma"],
    )


@dataclass
class FgRun:
    track: Track
    estimator: SlidingWindowEstimator
    wall_seconds: float


def run_factor_graph(events, config: EstimatorConfig) -> FgRun:
    est = SlidingWindowEstimator(config)
    rows = []
    # the event list is long-lived; keep full collections from rescanning it mid-replay
    gc.collect()
    gc.freeze()
    t0 = time.perf_counter()
    try:
        for ev in events:
            out = est.process(ev)
            if out is None:
                continue
            s, P = out.state, out.covariance
            var = [P[0, 0], P[1, 1], P[5, 5], body_velocity_covariance(s, P)[0, 0]]
            rows.append((s.t, s.p[0], s.p[1], s.R.yaw(), s.v[0], *np.sqrt(np.maximum(var, 0.0))))
        wall = time.perf_counter() - t0
    finally:
        gc.unfreeze()
    return FgRun(Track.from_rows(rows, with_sigma=True), est, wall)


def run_ekf_baseline(events, cfg: RunConfig, yaw0: float) -> tuple[Track, EkfRunner]:
    ecfg = EkfConfig(q=cfg.get("ekf", "q"), initial_yaw=yaw0, initial_yaw_sigma=cfg.get("ekf", "initial_yaw_sigma"))
    runner = EkfRunner(vehicle_extrinsics(cfg.get("trajectory", "vehicle")), ecfg)
    rows = []
    for ev in events:
        out = runner.process(ev)
        if out is not None:
            rows.append((out.t, out.position[0], out.position[1], out.yaw, out.v))
    return Track.from_rows(rows), runner


# ---------------------------------------------------------------- metrics


def _r(x: float, digits: int = 6) -> float:
    return float(round(float(x), digits))


def rmse_row(estimate: Track, truth: Track) -> dict:
    return {c: _r(rmse(estimate, truth, c)) for c in COMPONENTS}


def outage_window(cfg: RunConfig, truth: Track) -> tuple[float, float] | None:
    sc = cfg["scenario"]
    if sc["outage_start"] is None or len(truth) == 0:
        return None
    return sc["outage_start"], min(sc["outage_end"], float(truth.t[-1]))


def outage_metrics(estimate: Track, truth: Track, window: tuple[float, float]) -> dict:
    """RMSE strictly inside the outage and the per-axis error at its last sample."""
    part = estimate.window(*window)
    if len(part) == 0:
        raise EvaluationError("no estimates inside the outage window")
    row = rmse_row(part, truth)
    last = Track(part.t[-1:], part.x[-1:], part.y[-1:], part.yaw[-1:], part.v[-1:])
    row["drift_x"] = _r(abs(errors(last, truth, "x")[0]))
    row["drift_y"] = _r(abs(errors(last, truth, "y")[0]))
    return row


def travelled(truth: Track, window: tuple[float, float]) -> float:
    w = truth.window(*window)
    return float(np.sum(np.hypot(np.diff(w.x), np.diff(w.y))))


@dataclass
class MetricsReport:
    setup: int
    seed: int
    window_length: float
    rmse: dict
    outage: dict | None
    diagnostics: dict
    notes: list

    def to_dict(self) -> dict:
        d = {
            "setup": self.setup,
            "seed": self.seed,
            "window_length": self.window_length,
            "rmse": self.rmse,
            "diagnostics": self.diagnostics,
            "notes": self.notes,
        }
        if self.outage is not None:
            d["outage"] = self.outage
        return d

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        """Side-by-side RMSE table for the terminal."""
        lines = [f"{'state':<6}" + "".join(f"{name:>12}" for name in self.rmse)]
        for c in COMPONENTS:
            lines.append(f"{c:<6}" + "".join(f"{row[c]:>12.4f}" for row in self.rmse.values()))
        if self.outage:
            lines.append(f"outage {self.outage['start']:.1f}-{self.outage['end']:.1f} s, {self.outage['distance_m']:.1f} m")
            for name, row in self.outage["estimators"].items():
                vals = " ".join(f"{k}={row[k]:.4f}" for k in (*COMPONENTS, "drift_x", "drift_y"))
                lines.append(f"  {name}: {vals}")
        return "\n".join(lines)


def horizontal_rmse(row: dict) -> float:
    return math.hypot(row["x"], row["y"])


@dataclass
class RunOutput:
    report: MetricsReport
    fg: Track
    ekf: Track | None
    truth: Track
    runtime: dict
    degenerate: bool
    estimator_stats: EstimatorStats | None = None


def _percentile(values, q) -> float | None:
    return float(np.percentile(values, q)) if len(values) else None


def runtime_stats(fg: FgRun, data: Dataset) -> dict:
    st = fg.estimator.stats
    sim_span = float(fg.track.t[-1] - fg.track.t[0]) if len(fg.track) > 1 else 0.0
    solves = np.array(st.solve_latency)
    sizes = np.array(st.solve_sizes)
    return {
        "predict_p50_ms": _percentile(np.array(st.predict_latency) * 1e3, 50),
        "predict_p99_ms": _percentile(np.array(st.predict_latency) * 1e3, 99),
        "solve_p50_ms": _percentile(solves * 1e3, 50),
        "solve_p99_ms": _percentile(solves * 1e3, 99),
        "solve_max_values": int(sizes.max()) if len(sizes) else 0,
        "replay_wall_s": fg.wall_seconds,
        "replay_span_s": sim_span,
        "realtime_factor": sim_span / fg.wall_seconds if fg.wall_seconds > 0 else None,
        "prepare_wall_s": data.prepare_seconds,
    }


@dataclass
class Replay:
    fg: FgRun
    ekf: Track | None
    ekf_runner: EkfRunner | None


def replay(cfg: RunConfig, data: Dataset) -> Replay:
    """Run the factor graph (and the EKF when enabled) over the degraded streams."""
    yaw0 = initial_yaw(cfg, data)
    fg_events, ekf_events = degraded_streams(cfg, data)
    try:
        fg = run_factor_graph(fg_events, estimator_config(cfg, yaw0))
    except EstimatorError as exc:
        raise DegenerateEstimate(str(exc)) from exc
    if len(fg.track) == 0:
        raise DegenerateEstimate("factor graph produced no output (no usable GNSS fix)")
    if not cfg.get("run", "run_ekf"):
        return Replay(fg, None, None)
    ekf_track, ekf_runner = run_ekf_baseline(ekf_events, cfg, yaw0)
    return Replay(fg, ekf_track, ekf_runner)


def evaluate_run(cfg: RunConfig, data: Dataset) -> RunOutput:
    """Replay ``data`` through both estimators and score them against the truth."""
    if len(data.truth) == 0:
        raise EvaluationError("scoring needs ground-truth records in the log")
    rp = replay(cfg, data)
    fg, ekf_track, ekf_runner = rp.fg, rp.ekf, rp.ekf_runner
    truth = data.truth
    rows = {"fg": rmse_row(fg.track, truth)}
    if ekf_track is not None and len(ekf_track):
        rows["ekf"] = rmse_row(ekf_track, truth)
    outage = None
    window = outage_window(cfg, truth)
    if window is not None:
        per = {"fg": outage_metrics(fg.track, truth, window)}
        if "ekf" in rows:
            per["ekf"] = outage_metrics(ekf_track, truth, window)
        outage = {"start": _r(window[0]), "end": _r(window[1]), "distance_m": _r(travelled(truth, window), 3), "estimators": per}
    st = fg.estimator.stats
    grad = max(st.gradient_norms) if st.gradient_norms else 0.0
    diagnostics = {
        "fg_solves": st.solves,
        "fg_gated_gnss": st.gated_gnss,
        "fg_dropped_measurements": st.dropped_measurements,
        "fg_degenerate": bool(fg.estimator.degenerate),
        "fg_max_gradient_norm": f"{grad:.3e}",
        "lidar_odometry_steps": data.odometry_steps,
        "imu_outputs": len(fg.track),
    }
    if ekf_runner is not None:
        diagnostics["ekf_gated_gnss"] = ekf_runner.gated
    report = MetricsReport(
        setup=cfg.get("run", "setup"),
        seed=cfg.get("run", "seed"),
        window_length=cfg.get("estimator", "window_length"),
        rmse=rows,
        outage=outage,
        diagnostics=diagnostics,
        notes=[EKF_NOTE] if ekf_track is not None else [],
    )
    return RunOutput(report, fg.track, ekf_track, truth, runtime_stats(fg, data), bool(fg.estimator.degenerate), st)


# ---------------------------------------------------------------- outputs

CSV_COLUMNS = (
    "t",
    "truth_x", "truth_y", "truth_yaw", "truth_v",
    "fg_x", "fg_y", "fg_yaw", "fg_v",
    "fg_sigma_x", "fg_sigma_y", "fg_sigma_yaw", "fg_sigma_v",
    "ekf_x", "ekf_y", "ekf_yaw", "ekf_v",
)  # fmt: skip


def _cells(track: Track | None, idx: int | None, with_sigma: bool = False) -> list:
    n = 8 if with_sigma else 4
    if track is None or idx is None:
        return [""] * n
    vals = [track.x[idx], track.y[idx], track.yaw[idx], track.v[idx]]
    if with_sigma:
        vals += list(track.sigma[idx])
    return [f"{v:.6f}" for v in vals]


def _index(track: Track | None, t: np.ndarray) -> dict:
    if track is None:
        return {}
    i, j = match_times(t, track.t)
    return dict(zip(i.tolist(), j.tolist()))


def write_trajectory_csv(path: Path, out: RunOutput) -> None:
    t = out.fg.t
    ti, ei = _index(out.truth, t), _index(out.ekf, t)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for k in range(len(t)):
            w.writerow(
                [f"{t[k]:.6f}"]
                + _cells(out.truth, ti.get(k))
                + _cells(out.fg, k, with_sigma=True)
                + _cells(out.ekf, ei.get(k))
            )


def write_outputs(out: RunOutput, output_dir: Path, stem: str = "run") -> dict:
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": output_dir / f"{stem}_report.json",
        "trajectory": output_dir / f"{stem}_trajectory.csv",
        "runtime": output_dir / f"{stem}_runtime.json",
    }
    paths["report"].write_text(out.report.to_text(), encoding="utf-8")
    write_trajectory_csv(paths["trajectory"], out)
    paths["runtime"].write_text(json.dumps(out.runtime, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def run_pipeline(cfg: RunConfig, output_dir: str | Path | None = None, data: Dataset | None = None) -> RunOutput:
    """Prepare, replay, score and write the report, CSV and runtime files."""
    data = data or prepare_dataset(cfg)
    out = evaluate_run(cfg, data)
    write_outputs(out, Path(output_dir or cfg.get("run", "output_dir")))
    return out


def run_sweep(cfg: RunConfig, output_dir: str | Path | None = None, data: Dataset | None = None) -> dict:
    """Evaluate every ``[sweep] window_lengths`` entry on the same prepared data."""
    data = data or prepare_dataset(cfg)
    output_dir = Path(output_dir or cfg.get("run", "output_dir"))
    results = {}
    for w in cfg.get("sweep", "window_lengths"):
        sub = cfg.with_overrides({("estimator", "window_length"): repr(float(w))})
        out = evaluate_run(sub, data)
        write_outputs(out, output_dir, stem=f"window_{w:g}")
        results[float(w)] = out
    pos = {w: horizontal_rmse(o.report.rmse["fg"]) for w, o in results.items()}
    spread = (max(pos.values()) - min(pos.values())) / min(pos.values()) if min(pos.values()) > 0 else 0.0
    summary = {
        "window_lengths": [_r(w) for w in pos],
        "position_rmse": [_r(p) for p in pos.values()],
        "relative_spread": _r(spread),
    }
    (output_dir / "sweep_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"runs": results, "summary": summary}


__all__ = [
    "Track",
    "Dataset",
    "MetricsReport",
    "RunOutput",
    "EvaluationError",
    "DegenerateEstimate",
    "match_times",
    "rmse",
    "prepare_dataset",
    "evaluate_run",
    "run_pipeline",
    "run_sweep",
    "write_outputs",
]
