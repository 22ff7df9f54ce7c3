"""Frame-to-frame point-to-point ICP and a lidar odometry tracker.

Registration aligns a (downsampled) source cloud onto a dense target cloud:
nearest neighbours from a k-d tree on the target, correspondences beyond
``max_corr_dist`` rejected, and the closed-form rigid alignment of the
inliers (SVD of the cross-covariance) applied until the increment is below
``1e-6``. The returned ``delta`` is ``target_from_source``; for odometry the
previous frame is the target, so ``delta`` is ``prev_from_curr``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from fgstate.se3 import Pose3, Rot3, so3_log
from fgstate.sensor_log import LidarFrame, LidarOdom

MIN_POINTS = 100
MIN_INLIERS = 20


class VoxelMap:
    """Sparse voxel grid keeping at most ``max_points`` points per voxel."""

    def __init__(self, voxel_size: float, max_points: int = 20):
        if not voxel_size > 0:
            raise ValueError("voxel size must be positive")
        self.voxel_size = float(voxel_size)
        self.max_points = int(max_points)
        self.voxels: dict[tuple, list] = {}

    def index(self, point) -> tuple:
        return tuple(np.floor(np.asarray(point) / self.voxel_size).astype(np.int64))

    def add(self, points) -> None:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        keys = np.floor(points / self.voxel_size).astype(np.int64)
        for key, p in zip(map(tuple, keys), points):
            cell = self.voxels.setdefault(key, [])
            if len(cell) < self.max_points:
                cell.append(p)

    def points(self) -> np.ndarray:
        if not self.voxels:
            return np.zeros((0, 3))
        return np.array([p for cell in self.voxels.values() for p in cell])

    def __len__(self) -> int:
        return sum(len(c) for c in self.voxels.values())


def voxel_filter(points: np.ndarray, voxel: float) -> np.ndarray:
    """First point of every occupied voxel, in input order."""
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


def downsample(frame: LidarFrame, voxel: float) -> LidarFrame:
    return LidarFrame(frame.t, voxel_filter(frame.points, voxel), frame.sensor_id)


@dataclass
class IcpResult:
    delta: Pose3
    iterations: int
    final_rmse: float
    converged: bool
    inliers: int = 0
    # truncated mean squared error per iteration, non-increasing
    error_history: list = field(default_factory=list)


def rigid_align(src: np.ndarray, dst: np.ndarray) -> Pose3:
    """Least-squares ``T`` minimizing ``sum |T(src_i) - dst_i|^2`` (Kabsch/Horn)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return Pose3(Rot3.from_matrix(R), cd - R @ cs)


def _as_points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, LidarFrame) else cloud
    return np.asarray(pts, dtype=float).reshape(-1, 3)


def register(
    source,
    target,
    initial_guess: Pose3 | None = None,
    max_corr_dist: float = 1.0,
    max_iterations: int = 50,
    tolerance: float = 1e-6,
    target_tree: cKDTree | None = None,
) -> IcpResult:
    """Point-to-point ICP of ``source`` onto ``target``; returns ``target_from_source``."""
    src = _as_points(source)
    dst = _as_points(target)
    if len(src) < MIN_POINTS or len(dst) < MIN_POINTS:
        raise ValueError(f"ICP needs at least {MIN_POINTS} points per cloud")
    tree = target_tree if target_tree is not None else cKDTree(dst)
    T = initial_guess or Pose3()
    history = []
    converged = False
    it = 0
    while it < max_iterations:
        it += 1
        moved = T.transform_points(src)
        dist, idx = tree.query(moved, distance_upper_bound=max_corr_dist)
        ok = np.isfinite(dist)
        history.append(float(np.mean(np.minimum(dist, max_corr_dist) ** 2)))
        if ok.sum() < MIN_INLIERS:
            return IcpResult(T, it, math.inf, False, int(ok.sum()), history)
        step = rigid_align(moved[ok], dst[idx[ok]])
        T = step * T
        if np.linalg.norm(so3_log(step.rotation)) + np.linalg.norm(step.translation) < tolerance:
            converged = True
            break
    dist, _ = tree.query(T.transform_points(src), distance_upper_bound=max_corr_dist)
    ok = np.isfinite(dist)
    history.append(float(np.mean(np.minimum(dist, max_corr_dist) ** 2)))
    inliers = int(ok.sum())
    if inliers < MIN_INLIERS:
        return IcpResult(T, it, math.inf, False, inliers, history)
    rmse = float(np.sqrt(np.mean(dist[ok] ** 2)))
    return IcpResult(T, it, rmse, converged, inliers, history)


@dataclass
class OdometryConfig:
    voxel_size: float = 0.5
    initial_corr_dist: float = 1.0
    min_corr_dist: float = 0.3
    max_corr_dist: float = 3.0
    min_sigma: float = 0.01
    rotation_sigma_factor: float = 3.0


class LidarOdometry:
    """Consecutive-frame tracker for one lidar.

    The constant-velocity guess reuses the previous delta; the correspondence
    threshold halves after a tight fit and grows after a failed registration.
    """

    def __init__(self, config: OdometryConfig | None = None):
        self.config = config or OdometryConfig()
        self.prev: LidarFrame | None = None
        self._tree: cKDTree | None = None
        self.last_delta = Pose3()
        self.corr_dist = self.config.initial_corr_dist
        self.failures = 0

    def _set_reference(self, frame: LidarFrame) -> None:
        self.prev = frame
        self._tree = cKDTree(frame.points) if len(frame.points) else None

    def odometry_step(self, frame: LidarFrame) -> LidarOdom | None:
        cfg = self.config
        if self.prev is None:
            self._set_reference(frame)
            return None
        prev = self.prev
        source = voxel_filter(frame.points, cfg.voxel_size)
        try:
            res = register(source, prev.points, self.last_delta, self.corr_dist, target_tree=self._tree)
        except ValueError:
            res = IcpResult(self.last_delta, 0, math.inf, False)
        self._set_reference(frame)
        if not res.converged:
            self.failures += 1
            self.corr_dist = min(cfg.max_corr_dist, self.corr_dist * 1.5)
            return None
        if res.final_rmse < 0.1 * self.corr_dist:
            self.corr_dist = max(cfg.min_corr_dist, self.corr_dist * 0.5)
        self.last_delta = res.delta
        sigma = max(res.final_rmse, cfg.min_sigma)
        s_rot = cfg.rotation_sigma_factor * sigma
        cov = np.diag([s_rot**2] * 3 + [sigma**2] * 3)
        return LidarOdom(prev.t, frame.t, res.delta, cov, frame.sensor_id)


def odometry_step(frame: LidarFrame, state: LidarOdometry) -> LidarOdom | None:
    return state.odometry_step(frame)


def run_odometry(frames, config: OdometryConfig | None = None) -> list:
    """Odometry for a time-ordered frame sequence, one tracker per sensor."""
    trackers: dict[str, LidarOdometry] = {}
    out = []
    for frame in frames:
        tracker = trackers.setdefault(frame.sensor_id, LidarOdometry(config))
        odom = tracker.odometry_step(frame)
        if odom is not None:
            out.append(odom)
    return out
