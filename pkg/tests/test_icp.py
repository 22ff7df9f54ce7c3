import numpy as np
import pytest

from fgstate.icp import LidarOdometry, VoxelMap, register, rigid_align, run_odometry, voxel_filter
from fgstate.se3 import Pose3, Rot3, so3_log
from fgstate.sensor_log import LidarFrame


def corner_scene(seed=0, n=600):
    """Floor, two walls and a few boxes, sampled at random."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(0, 6, (n, 2))
    floor = np.column_stack([u, np.zeros(n)])
    wall_x = np.column_stack([np.zeros(n), u])
    wall_y = np.column_stack([u[:, 0], np.zeros(n), u[:, 1]])
    blobs = [c + rng.uniform(-0.4, 0.4, (80, 3)) for c in ([2, 3, 1], [4, 1.5, 0.5], [1, 5, 2.5])]
    return np.vstack([floor, wall_x, wall_y, *blobs])


def pose_error(a: Pose3, b: Pose3):
    d = a.inverse() * b
    return np.linalg.norm(d.translation), np.linalg.norm(so3_log(d.rotation))


class TestRegister:
    def test_identity(self):
        pts = corner_scene()
        res = register(pts, pts)
        assert res.converged and res.final_rmse < 1e-12
        assert max(pose_error(res.delta, Pose3())) < 1e-12

    def test_shifted_corner(self):
        target = corner_scene()
        source = target - [0.1, 0.0, 0.0]
        res = register(source, target)
        assert np.allclose(res.delta.translation, [0.1, 0, 0], atol=1e-6)
        assert np.linalg.norm(so3_log(res.delta.rotation)) < 1e-6

    def test_yaw_and_translation(self):
        target = corner_scene(1)
        truth = Pose3(Rot3.yaw_rotation(0.1), (0.2, 0.0, 0.0))
        source = truth.inverse().transform_points(target)
        res = register(source, target)
        dt, dr = pose_error(res.delta, truth)
        assert dt < 1e-5 and dr < 1e-5

    def test_swapping_roles_inverts(self):
        target = corner_scene(2)
        truth = Pose3(Rot3.from_ypr(0.05, 0.01, -0.02), (0.15, -0.1, 0.05))
        source = truth.inverse().transform_points(target)
        ab = register(source, target).delta
        ba = register(target, source).delta
        assert max(pose_error(ab * ba, Pose3())) < 1e-5

    def test_error_history_non_increasing(self):
        rng = np.random.default_rng(3)
        target = corner_scene(3)
        for _ in range(10):
            truth = Pose3(Rot3.from_ypr(rng.uniform(-0.1, 0.1)), rng.uniform(-0.3, 0.3, 3))
            source = truth.inverse().transform_points(target) + rng.normal(0, 0.01, target.shape)
            h = register(source, target).error_history
            assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))

    def test_too_few_points(self):
        pts = corner_scene()[:50]
        with pytest.raises(ValueError):
            register(pts, corner_scene())

    def test_rigid_align_exact(self):
        rng = np.random.default_rng(4)
        src = rng.normal(size=(30, 3))
        T = Pose3(Rot3.from_ypr(1.0, -0.4, 0.3), (1.0, 2.0, -3.0))
        assert max(pose_error(rigid_align(src, T.transform_points(src)), T)) < 1e-12


class TestDownsample:
    def test_single_voxel(self):
        pts = np.random.default_rng(0).uniform(0.01, 0.49, (100, 3))
        out = voxel_filter(pts, 0.5)
        assert len(out) == 1 and np.array_equal(out[0], pts[0])

    def test_sparse_grid_unchanged(self):
        g = np.arange(5) * 2.0 + 0.25
        pts = np.array(np.meshgrid(g, g, g)).reshape(3, -1).T
        assert np.array_equal(voxel_filter(pts, 0.5), pts)

    def test_matches_hash_set(self):
        pts = np.random.default_rng(1).uniform(-20, 20, (10000, 3))
        seen, expected = set(), []
        for p in pts:
            key = tuple(np.floor(p / 0.7).astype(int))
            if key not in seen:
                seen.add(key)
                expected.append(p)
        assert np.array_equal(voxel_filter(pts, 0.7), np.array(expected))

    def test_invalid_voxel(self):
        with pytest.raises(ValueError):
            voxel_filter(np.zeros((3, 3)), 0.0)

    def test_voxel_map_caps_points(self):
        m = VoxelMap(1.0, max_points=3)
        m.add(np.full((10, 3), 0.5))
        m.add([[5.5, 0.5, 0.5]])
        assert len(m) == 4 and m.points().shape == (4, 3)


def corridor_points(seed=0, n=40000):
    """Surface samples of a corridor lined with pillars, fixed in the world frame."""
    rng = np.random.default_rng(seed)
    boxes = [[-20, 4.0, 0, 40, 4.5, 4], [-20, -4.5, 0, 40, -4.0, 4]]
    boxes += [[x - 0.15, y - 0.15, 0, x + 0.15, y + 0.15, 3] for x in range(-20, 40, 2) for y in (3.0, -3.0)]
    faces = []
    for x0, y0, z0, x1, y1, z1 in boxes:
        faces += [(0, x0, (y0, y1), (z0, z1)), (0, x1, (y0, y1), (z0, z1)), (1, y0, (x0, x1), (z0, z1)), (1, y1, (x0, x1), (z0, z1))]
    area = np.array([(b[1] - b[0]) * (c[1] - c[0]) for _, _, b, c in faces])
    pick = rng.choice(len(faces), n, p=area / area.sum())
    pts = np.zeros((n, 3))
    for i, (axis, val, (b0, b1), (c0, c1)) in enumerate(faces):
        m = pick == i
        other = 1 - axis
        pts[m, axis] = val
        pts[m, other] = rng.uniform(b0, b1, m.sum())
        pts[m, 2] = rng.uniform(c0, c1, m.sum())
    return pts


def corridor_frames(poses, sensor_id="front"):
    world = corridor_points()
    return [LidarFrame(t, pose.inverse().transform_points(world), sensor_id) for t, pose in poses]


class TestOdometry:
    def test_first_frame_has_no_output(self):
        frame = corridor_frames([(0.0, Pose3())])[0]
        assert LidarOdometry().odometry_step(frame) is None

    def test_stationary_frames(self):
        odo = run_odometry(corridor_frames([(0.1 * k, Pose3(Rot3(), (0, 0, 1.0))) for k in range(3)]))
        assert len(odo) == 2
        for o in odo:
            assert max(pose_error(o.delta, Pose3())) < 1e-9

    def test_corridor_constant_speed(self):
        poses = [(0.1 * k, Pose3(Rot3(), (0.1 * k, 0.0, 1.0))) for k in range(6)]
        odo = run_odometry(corridor_frames(poses))
        assert len(odo) == 5
        for o in odo:
            assert np.allclose(o.delta.translation, [0.1, 0, 0], atol=0.01)
            assert np.linalg.norm(so3_log(o.delta.rotation)) < 0.005
            assert o.t_curr - o.t_prev == pytest.approx(0.1)

    def test_streams_are_tracked_separately(self):
        frames = []
        for k in range(3):
            pose = Pose3(Rot3(), (0.1 * k, 0.0, 1.0))
            frames += corridor_frames([(0.1 * k, pose)], "front")
            frames += corridor_frames([(0.1 * k, pose * Pose3(Rot3.yaw_rotation(np.pi)))], "rear")
        odo = run_odometry(frames)
        assert sorted(o.sensor_id for o in odo) == ["front", "front", "rear", "rear"]
        for o in odo:
            expected = [0.1, 0, 0] if o.sensor_id == "front" else [-0.1, 0, 0]
            assert np.allclose(o.delta.translation, expected, atol=0.01)
