"""Shared helpers for the test suite: random states and finite differences."""

from __future__ import annotations

import numpy as np

from fgstate.se3 import Rot3, random_rotation
from fgstate.state import DIM, ImuBias, NavState

FD_STEP = 1e-6


def random_state(rng: np.random.Generator, t: float = 0.0, scale: float = 1.0) -> NavState:
    return NavState(
        t,
        rng.normal(0, 5 * scale, 3),
        random_rotation(rng),
        rng.normal(0, 2 * scale, 3),
        ImuBias(rng.normal(0, 0.01, 3), rng.normal(0, 0.1, 3)),
    )


def planar_state(rng: np.random.Generator, t: float = 0.0) -> NavState:
    """Random state with modest roll/pitch, as on a ground vehicle."""
    R = Rot3.from_ypr(rng.uniform(-np.pi, np.pi), rng.normal(0, 0.05), rng.normal(0, 0.05))
    return NavState(t, rng.normal(0, 5, 3), R, [rng.uniform(0.5, 6), rng.normal(0, 0.2), rng.normal(0, 0.1)])


def numeric_jacobian(fn, state: NavState, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``fn`` along the 15 tangent directions of ``state``."""
    cols = []
    for i in range(DIM):
        d = np.zeros(DIM)
        d[i] = step
        cols.append((fn(state.retract(d)) - fn(state.retract(-d))) / (2 * step))
    return np.column_stack(cols)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entry error relative to the Jacobian's scale (absolute below unit scale)."""
    scale = max(1.0, float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric))) / scale


# ------------------------------------------------------------------ IMU oracle


def _qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def _qrotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    w, u = q[..., :1], q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def smooth_imu_signal(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Body rate and specific force of a tumbling, accelerating body."""
    omega = np.stack([0.3 * np.sin(2 * t), 0.2 * np.cos(3 * t), 0.5 + 0.4 * np.sin(t)], axis=-1)
    force = np.stack([1.0 * np.cos(2 * t), 0.5 * np.sin(t), 9.81 + 0.3 * np.sin(4 * t)], axis=-1)
    return omega, force


def reference_integration(duration: float, dt: float, v0_world, gravity=(0.0, 0.0, -9.81), signal=smooth_imu_signal):
    """Fine-step integration of a continuous IMU signal from the identity attitude.

    Returns quaternions, world velocities and positions at every step boundary.
    Rotation increments use the midpoint rate; the product of all increments is
    a prefix scan (log-depth doubling), so a million steps stay cheap.
    """
    n = int(round(duration / dt))
    tm = (np.arange(n) + 0.5) * dt
    omega, force = signal(tm)
    half = 0.5 * dt * omega
    ang = np.linalg.norm(half, axis=1, keepdims=True)
    inc = np.concatenate([np.cos(ang), np.sinc(ang / np.pi) * half], axis=1)
    q = inc.copy()
    s = 1
    while s < n:
        q[s:] = _qmul(q[:-s], q[s:])
        s *= 2
    q = np.vstack([[1.0, 0.0, 0.0, 0.0], q])
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    # specific force rotated with the attitude at the step midpoint
    q_mid = _qmul(q[:-1], np.concatenate([np.cos(0.5 * ang), np.sinc(0.5 * ang / np.pi) * 0.5 * half], axis=1))
    acc = _qrotate(q_mid, force) + np.asarray(gravity)
    v = np.vstack([v0_world, np.asarray(v0_world) + np.cumsum(acc * dt, axis=0)])
    p = np.vstack([np.zeros(3), np.cumsum(0.5 * (v[:-1] + v[1:]) * dt, axis=0)])
    return q, v, p


def quat_to_matrix(q) -> np.ndarray:
    from fgstate.se3 import Rot3

    return Rot3(tuple(q)).matrix()


def integrating_imu_samples(q, v, stride: int, sample_dt: float, gravity=(0.0, 0.0, -9.81)):
    """Delta-angle / delta-velocity samples (as rates) over each ``stride`` of the reference."""
    from fgstate.se3 import Rot3, so3_log

    out = []
    idx = np.arange(0, len(q), stride)
    for a, b in zip(idx[:-1], idx[1:]):
        Ra, Rb = Rot3(tuple(q[a])), Rot3(tuple(q[b]))
        gyro = so3_log(Ra.inverse() * Rb) / sample_dt
        accel = Ra.unrotate((v[b] - v[a]) / sample_dt - np.asarray(gravity))
        out.append((gyro, accel))
    return out


# ---------------------------------------------------------------- factors


def random_spd(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T / n + 0.5 * np.eye(n))


def random_factor(kind: str, rng: np.random.Generator):
    """A random factor of ``kind`` and a (perturbed) state per key."""
    from fgstate import factors as fac
    from fgstate.imu import PreintegratedImu, predict
    from fgstate.se3 import Pose3, random_rotation, so3_exp

    xi = random_state(rng)
    if kind == "prior":
        prior = xi.retract(rng.normal(0, 0.2, DIM))
        return fac.PriorFactor(0, prior, random_spd(rng, DIM, 0.1)), [xi]
    if kind == "gnss":
        return fac.GnssUnaryFactor(0, xi.p + rng.normal(0, 0.5, 3), random_spd(rng, 3, 0.01)), [xi]
    if kind == "attitude":
        baseline = rng.normal(size=3) * [1.0, 1.0, 0.2] + [1.8, 0.0, 0.0]
        return (
            fac.GnssAttitudeFactor(0, rng.uniform(-np.pi, np.pi), rng.normal(0, 0.1), random_spd(rng, 2, 1e-3), baseline),
            [planar_state(rng)],
        )
    if kind == "imu":
        pre = PreintegratedImu(bias=ImuBias(rng.normal(0, 0.01, 3), rng.normal(0, 0.05, 3)))
        for _ in range(int(rng.integers(1, 12))):
            pre.integrate(rng.normal(0, 0.5, 3), rng.normal(0, 1.0, 3) + [0, 0, 9.81], 0.01)
        xj = predict(xi, pre).retract(rng.normal(0, 0.05, DIM))
        return fac.ImuFactor(0, 1, pre), [xi, xj]
    if kind == "between":
        delta = Pose3(so3_exp(rng.normal(0, 0.2, 3)), rng.normal(0, 1.0, 3))
        xj = NavState(0.1, xi.pose().compose(delta).translation, xi.R * delta.rotation, xi.v)
        xj = xj.retract(rng.normal(0, 0.05, DIM))
        noisy = Pose3(delta.rotation * so3_exp(rng.normal(0, 0.02, 3)), delta.translation + rng.normal(0, 0.05, 3))
        return fac.BetweenPoseFactor(0, 1, noisy, random_spd(rng, 6, 0.01)), [xi, xj]
    if kind == "kinematic":
        xi = planar_state(rng)
        imu_from_axle = Pose3(so3_exp(rng.normal(0, 0.05, 3)), rng.normal(0, 0.8, 3))
        xj = xi.retract(np.concatenate([xi.R.rotate([0.5, 0.02, 0.0]), [0, 0, 0.05], rng.normal(0, 0.1, 9)]))
        xj = NavState(0.1, xj.p, xj.R, xj.v)
        delta = [0.5 + rng.normal(0, 0.05), rng.normal(0, 0.02), 0.05 + rng.normal(0, 0.01)]
        cov = np.diag([0.02**2, 0.02**2, 0.005**2, 0.05**2])
        return fac.KinematicBetweenFactor(0, 1, delta, rng.uniform(0.5, 6), cov, imu_from_axle), [xi, xj]
    raise ValueError(kind)


FACTOR_KINDS = ("prior", "gnss", "attitude", "imu", "between", "kinematic")


def factor_jacobian_error(factor, states) -> float:
    """Worst relative error of whitened analytic Jacobians against central differences."""
    keys = list(factor.keys)
    values = dict(zip(keys, states))
    _, jacs = factor.linearize(values)
    worst = 0.0
    for slot, key in enumerate(keys):

        def err(s, key=key):
            return factor.error({**values, key: s})

        worst = max(worst, relative_error(jacs[slot], numeric_jacobian(err, values[key])))
    return worst
