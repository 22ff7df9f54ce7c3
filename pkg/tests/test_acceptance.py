"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The three evaluation setups are simulated once per session; the window sweep
of setup 1 supplies the accuracy, sweep and timing checks.
"""

import json
import time

import numpy as np
import pytest

from _util import (
    FACTOR_KINDS,
    factor_jacobian_error,
    integrating_imu_samples,
    random_factor,
    reference_integration,
)
from fgstate.config import load_config
from fgstate.evaluation import evaluate_run, horizontal_rmse, prepare_dataset, run_pipeline
from fgstate.icp import register
from fgstate.imu import PreintegratedImu, predict
from fgstate.se3 import Pose3, Rot3, so3_exp, so3_log
from fgstate.solver import Problem, levenberg_marquardt
from fgstate.state import NavState

WINDOWS = (0.5, 1.0, 2.0)


def verdict(capsys, label, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} {label}: {detail}")
    assert ok, detail


def setup_config(setup, **extra):
    overrides = {("run", "setup"): str(setup)}
    overrides.update({tuple(k.split(".")): v for k, v in extra.items()})
    return load_config(overrides=overrides)


@pytest.fixture(scope="session")
def setup1_runs():
    data = prepare_dataset(setup_config(1))
    return {w: evaluate_run(setup_config(1, **{"estimator.window_length": repr(w)}), data) for w in WINDOWS}


@pytest.fixture(scope="session")
def setup2_run():
    cfg = setup_config(2)
    return evaluate_run(cfg, prepare_dataset(cfg))


@pytest.fixture(scope="session")
def setup3_run():
    cfg = setup_config(3)
    return evaluate_run(cfg, prepare_dataset(cfg))


# ------------------------------------------------------------------ 1


def test_criterion_1_jacobians(capsys):
    t0 = time.perf_counter()
    worst = {}
    for kind in FACTOR_KINDS:
        rng = np.random.default_rng(100 + len(kind))
        worst[kind] = max(factor_jacobian_error(*random_factor(kind, rng)) for _ in range(100))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and elapsed < 10.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f} s"
    verdict(capsys, "criterion 1 (Jacobians vs finite differences)", ok, detail)


# ------------------------------------------------------------------ 2


def test_criterion_2_preintegration(capsys):
    v0 = np.array([3.0, 0.0, 0.0])
    q, v, p = reference_integration(1.0, 1e-6, v0)
    samples = integrating_imu_samples(q, v, 10000, 0.01)
    pre = PreintegratedImu()
    for gyro, accel in samples:
        pre.integrate(gyro, accel, 0.01)
    s0 = NavState(0.0, np.zeros(3), Rot3(), v0)
    out = predict(s0, pre)
    pos_err = float(np.linalg.norm(out.p - p[-1]))
    rot_err = float(np.linalg.norm(so3_log(Rot3(tuple(q[-1])).inverse() * out.R)))

    # composing two halves equals one pass over the whole interval
    compose_err = 0.0
    for split in (1, 37, 50, 99):
        a, b = PreintegratedImu(), PreintegratedImu()
        for gyro, accel in samples[:split]:
            a.integrate(gyro, accel, 0.01)
        for gyro, accel in samples[split:]:
            b.integrate(gyro, accel, 0.01)
        chained = predict(predict(s0, a), b)
        compose_err = max(
            compose_err,
            float(np.linalg.norm(chained.p - out.p)),
            float(np.linalg.norm(chained.v_world() - out.v_world())),
            float(np.linalg.norm(so3_log(out.R.inverse() * chained.R))),
        )
    ok = pos_err < 1e-3 and rot_err < 1e-4 and compose_err < 1e-9
    detail = f"position {pos_err:.2e} m, rotation {rot_err:.2e} rad, split-and-compose {compose_err:.1e}"
    verdict(capsys, "criterion 2 (preintegration vs dt=1e-6 reference)", ok, detail)


# ------------------------------------------------------------------ 3


class Linear:
    def __init__(self, keys, coeffs, b):
        self.keys = tuple(keys)
        self.a = np.array(coeffs, dtype=float)
        self.b = b

    def error(self, values):
        return np.array([sum(a * values[k][0] for a, k in zip(self.a, self.keys)) - self.b])

    def linearize(self, values):
        return self.error(values), [np.array([[a]]) for a in self.a]


def test_criterion_3a_scalar_chain(capsys):
    factors = [Linear(["x0"], [1.0], 0.0), Linear(["x0", "x1"], [-1.0, 1.0], 1.0), Linear(["x1"], [1.0], 1.2)]
    res = levenberg_marquardt(Problem(["x0", "x1"], {"x0": 1, "x1": 1}, factors), {"x0": np.zeros(1), "x1": np.zeros(1)})
    e0, e1 = abs(res.values["x0"][0] - 1 / 15), abs(res.values["x1"][0] - 17 / 15)
    ok = res.converged and e0 < 1e-9 and e1 < 1e-9 and res.gradient_norm < 1e-8
    detail = f"x0 err {e0:.1e}, x1 err {e1:.1e}, gradient {res.gradient_norm:.1e}"
    verdict(capsys, "criterion 3a (scalar chain solution)", ok, detail)


@pytest.mark.slow
def test_criterion_3b_window_gradient(setup1_runs, capsys):
    stats = setup1_runs[1.0].estimator_stats
    g = np.array(stats.gradient_norms)[np.array(stats.converged)]
    ok = len(g) > 0 and float(g.max()) < 1e-8
    detail = f"{len(g)} converged window solves, gradient norm median {np.median(g):.1e}, max {g.max():.1e}"
    verdict(capsys, "criterion 3b (gradient norm on converged window solves)", ok, detail)


# ------------------------------------------------------------------ 4


@pytest.mark.slow
def test_criterion_4_setup1(setup1_runs, capsys):
    rows = {w: o.report.rmse["fg"] for w, o in setup1_runs.items()}
    pos = {w: horizontal_rmse(r) for w, r in rows.items()}
    spread = (max(pos.values()) - min(pos.values())) / min(pos.values())
    ref = rows[1.0]
    ok = pos[1.0] <= 0.05 and ref["yaw"] <= 0.01 and spread < 0.2
    detail = (
        f"position {pos[1.0]:.4f} m, yaw {ref['yaw']:.4f} rad; sweep "
        + ", ".join(f"{w:g} s {p:.4f}" for w, p in pos.items())
        + f"; spread {spread:.1%}"
    )
    verdict(capsys, "criterion 4 (setup 1 accuracy and window sweep)", ok, detail)


# ------------------------------------------------------------------ 5


@pytest.mark.slow
def test_criterion_5_setup2(setup2_run, capsys):
    fg = setup2_run.report.rmse["fg"]
    ekf = setup2_run.report.rmse.get("ekf")
    ok = fg["x"] <= 0.6 and fg["y"] <= 0.6 and fg["yaw"] <= 0.06 and fg["v"] <= 0.25 and ekf is not None
    detail = "FG " + json.dumps(fg, sort_keys=True) + " | EKF " + json.dumps(ekf, sort_keys=True)
    verdict(capsys, "criterion 5 (setup 2, CEP 2 m GNSS with lidar)", ok, detail)


# ------------------------------------------------------------------ 6


@pytest.mark.slow
def test_criterion_6_setup3(setup3_run, capsys):
    outage = setup3_run.report.outage
    row = outage["estimators"]["fg"]
    ok = (
        outage["distance_m"] >= 77.0
        and row["drift_x"] <= 1.0
        and row["drift_y"] <= 1.0
        and row["yaw"] <= 0.03
        and row["v"] <= 0.1
    )
    detail = (
        f"outage {outage['start']:.0f}-{outage['end']:.0f} s over {outage['distance_m']:.1f} m; "
        f"drift x {row['drift_x']:.3f} y {row['drift_y']:.3f} m, yaw {row['yaw']:.4f} rad, v {row['v']:.4f} m/s"
    )
    verdict(capsys, "criterion 6 (setup 3, GNSS outage)", ok, detail)


# ------------------------------------------------------------------ 7


def structured_cloud(rng):
    """Three orthogonal planes plus a box corner."""

    def plane(n, origin, u, v, su, sv):
        a, b = rng.uniform(0, su, n), rng.uniform(0, sv, n)
        return np.asarray(origin, float) + np.outer(a, u) + np.outer(b, v)

    return np.vstack(
        [
            plane(1500, [0, 0, 0], [1, 0, 0], [0, 1, 0], 10, 10),
            plane(1500, [0, 0, 0], [1, 0, 0], [0, 0, 1], 10, 5),
            plane(1500, [0, 0, 0], [0, 1, 0], [0, 0, 1], 10, 5),
            plane(500, [4, 4, 0], [1, 0, 0], [0, 0, 1], 1, 2),
            plane(500, [4, 4, 0], [0, 1, 0], [0, 0, 1], 1, 2),
        ]
    )


def test_criterion_7_icp(capsys):
    rng = np.random.default_rng(0)
    cloud = structured_cloud(rng)
    hits, worst_t, worst_r = 0, 0.0, 0.0
    for _ in range(100):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 0.1) / np.linalg.norm(w)
        t = rng.normal(size=3)
        t *= rng.uniform(0, 0.5) / np.linalg.norm(t)
        truth = Pose3(so3_exp(w), t)
        res = register(truth.inverse().transform_points(cloud), cloud, Pose3(), max_corr_dist=1.0)
        d = truth.between(res.delta)
        et, er = float(np.linalg.norm(d.translation)), float(np.linalg.norm(so3_log(d.rotation)))
        worst_t, worst_r = max(worst_t, et), max(worst_r, er)
        hits += et < 0.01 and er < 0.005
    detail = f"{hits}/100 recovered; worst {worst_t:.1e} m, {worst_r:.1e} rad"
    verdict(capsys, "criterion 7 (ICP perturbation recovery)", hits >= 99, detail)


# ------------------------------------------------------------------ 8


@pytest.mark.slow
def test_criterion_8_runtime(setup1_runs, capsys):
    rt = setup1_runs[2.0].runtime
    ok = (
        rt["predict_p99_ms"] < 1.0
        and rt["solve_max_values"] >= 200
        and rt["solve_p99_ms"] < 100.0
        and rt["realtime_factor"] > 1.0
    )
    detail = (
        f"predict p99 {rt['predict_p99_ms']:.3f} ms; solve p99 {rt['solve_p99_ms']:.1f} ms at up to "
        f"{rt['solve_max_values']} values; replay {rt['replay_wall_s']:.1f} s for {rt['replay_span_s']:.0f} s "
        f"({rt['realtime_factor']:.2f}x real time)"
    )
    verdict(capsys, "criterion 8 (runtime)", ok, detail)


# ------------------------------------------------------------------ 9


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path, capsys):
    cfg = setup_config(2, **{"trajectory.duration": "20", "run.seed": "5"})
    run_pipeline(cfg, tmp_path / "a")
    run_pipeline(cfg, tmp_path / "b")
    same = {
        name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for name in ("run_report.json", "run_trajectory.csv")
    }
    verdict(capsys, "criterion 9 (byte-identical reports)", all(same.values()), json.dumps(same))
