from fractions import Fraction

import numpy as np
import pytest

from fgstate import factors as fac
from fgstate.imu import PreintegratedImu, predict
from fgstate.se3 import Rot3
from fgstate.solver import LMParams, Problem, banded_matvec, banded_to_dense, levenberg_marquardt
from fgstate.state import DIM, NavState


class Linear:
    """Scalar factor ``sum_k a_k x_k - b`` with standard deviation ``sigma``."""

    def __init__(self, keys, coeffs, b, sigma=1.0):
        self.keys = tuple(keys)
        self.a = np.array(coeffs, dtype=float)
        self.b = b
        self.w = 1.0 / sigma

    def error(self, values):
        return np.array([self.w * (sum(a * values[k][0] for a, k in zip(self.a, self.keys)) - self.b)])

    def linearize(self, values):
        return self.error(values), [np.array([[self.w * a]]) for a in self.a]


def scalar_chain():
    factors = [Linear(["x0"], [1.0], 0.0), Linear(["x0", "x1"], [-1.0, 1.0], 1.0), Linear(["x1"], [1.0], 1.2)]
    return Problem(["x0", "x1"], {"x0": 1, "x1": 1}, factors)


class TestScalarChain:
    def test_hand_normal_equations(self):
        # H x = -g at zero: [[2, -1], [-1, 2]] x = [-1, 2.2]
        det = Fraction(3)
        x0 = (Fraction(2) * -1 + Fraction(22, 10)) / det
        x1 = (Fraction(-1) * 1 + Fraction(2) * Fraction(22, 10)) / det
        assert (x0, x1) == (Fraction(1, 15), Fraction(17, 15))
        assert np.allclose(np.linalg.solve([[2.0, -1.0], [-1.0, 2.0]], [-1.0, 2.2]), [1 / 15, 17 / 15], atol=1e-15)

    def test_solution(self):
        res = levenberg_marquardt(scalar_chain(), {"x0": np.zeros(1), "x1": np.zeros(1)})
        assert res.converged
        assert abs(res.values["x0"][0] - 1 / 15) < 1e-9
        assert abs(res.values["x1"][0] - 17 / 15) < 1e-9
        assert res.gradient_norm < 1e-8

    def test_marginal_covariance(self):
        res = levenberg_marquardt(scalar_chain(), {"x0": np.zeros(1), "x1": np.zeros(1)})
        # inverse of [[2, -1], [-1, 2]]
        assert res.marginal_covariance("x1")[0, 0] == pytest.approx(2 / 3, abs=1e-12)
        assert res.marginal_covariance("x0")[0, 0] == pytest.approx(2 / 3, abs=1e-12)

    def test_from_far_start(self):
        res = levenberg_marquardt(scalar_chain(), {"x0": np.array([1e3]), "x1": np.array([-5e2])})
        assert np.allclose([res.values["x0"][0], res.values["x1"][0]], [1 / 15, 17 / 15], atol=1e-9)


class TestBanded:
    def test_linearize_matches_dense(self):
        problem = scalar_chain()
        ab, g, cost = problem.linearize({"x0": np.array([0.3]), "x1": np.array([-0.2])})
        H = banded_to_dense(ab)
        assert np.allclose(H, [[2, -1], [-1, 2]])
        assert cost == pytest.approx(0.5 * (0.3**2 + (-0.2 - 0.3 - 1) ** 2 + (-0.2 - 1.2) ** 2))

    def test_matvec(self):
        rng = np.random.default_rng(0)
        n, b = 30, 5
        ab = rng.normal(size=(b + 1, n))
        x = rng.normal(size=n)
        assert np.allclose(banded_matvec(ab, x), banded_to_dense(ab) @ x, atol=1e-12)


def imu_chain(n=20, seed=0, with_attitude=True):
    """Noise-free chain: prior, IMU factors, GNSS on every value, attitude on some."""
    rng = np.random.default_rng(seed)
    states = [NavState(0.0, [1.0, 2.0, 0.0], Rot3.from_ypr(0.4, 0.01, -0.02), [4.0, 0.0, 0.0])]
    factors = [fac.PriorFactor(0, states[0], np.eye(DIM) * 0.01)]
    for k in range(1, n):
        pre = PreintegratedImu().integrate(rng.normal(0, 0.1, 3) + [0, 0, 0.2], rng.normal(0, 0.5, 3) + [0, 0, 9.81], 0.01)
        states.append(predict(states[-1], pre))
        factors.append(fac.ImuFactor(k - 1, k, pre))
    for k, s in enumerate(states):
        factors.append(fac.GnssUnaryFactor(k, s.p, np.eye(3) * 0.02**2))
        if with_attitude and k % 5 == 0:
            u = s.R.rotate([1.0, 0, 0])
            yaw, pitch = np.arctan2(u[1], u[0]), np.arctan2(u[2], np.hypot(u[0], u[1]))
            factors.append(fac.GnssAttitudeFactor(k, yaw, pitch, np.eye(2) * 1e-4))
    problem = Problem(list(range(n)), {k: DIM for k in range(n)}, factors)
    return problem, {k: s for k, s in enumerate(states)}


class TestNavStateProblems:
    def test_noise_free_fixed_point(self):
        problem, truth = imu_chain()
        assert problem.cost(truth) < 1e-12
        res = levenberg_marquardt(problem, truth)
        assert res.cost < 1e-12

    def test_basin_of_attraction(self):
        problem, truth = imu_chain()
        rng = np.random.default_rng(1)
        for _ in range(5):
            start = {k: s.retract(rng.uniform(-0.1, 0.1, DIM)) for k, s in truth.items()}
            res = levenberg_marquardt(problem, start)
            assert res.converged
            for k, s in truth.items():
                assert np.max(np.abs(s.local(res.values[k]))) < 1e-6

    def test_cost_never_increases(self):
        problem, truth = imu_chain(seed=2)
        rng = np.random.default_rng(3)
        start = {k: s.retract(rng.normal(0, 0.3, DIM)) for k, s in truth.items()}
        costs = []
        values = start
        for _ in range(8):
            res = levenberg_marquardt(problem, values, LMParams(max_iterations=1))
            assert res.cost <= problem.cost(values) + 1e-12
            costs.append(res.cost)
            values = res.values
        assert all(b <= a for a, b in zip(costs, costs[1:]))

    def test_batched_and_single_paths_agree(self):
        problem, truth = imu_chain(n=8)
        rng = np.random.default_rng(4)
        values = {k: s.retract(rng.normal(0, 0.05, DIM)) for k, s in truth.items()}
        ab, g, cost = problem.linearize(values)
        H = np.zeros((problem.n, problem.n))
        g_ref = np.zeros(problem.n)
        total = 0.0
        for f in problem.factors:
            r, jacs = f.linearize(values)
            idx = np.concatenate([np.arange(problem.offsets[k], problem.offsets[k] + DIM) for k in f.keys])
            J = np.hstack(jacs)
            H[np.ix_(idx, idx)] += J.T @ J
            g_ref[idx] += J.T @ r
            total += r @ r
        assert np.allclose(banded_to_dense(ab), H, rtol=1e-10, atol=1e-6)
        assert np.allclose(g, g_ref, rtol=1e-10, atol=1e-8)
        assert cost == pytest.approx(0.5 * total, rel=1e-12)

    def test_rank_deficient_is_flagged(self):
        # IMU chain without any absolute factor: position and yaw are unobservable
        problem, truth = imu_chain(n=5)
        imu_only = [f for f in problem.factors if isinstance(f, fac.ImuFactor)]
        p2 = Problem(problem.ordering, problem.dims, imu_only)
        res = levenberg_marquardt(p2, truth)
        res.marginal_covariance(4)
        assert res.degenerate
