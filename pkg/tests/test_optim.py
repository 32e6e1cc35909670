import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak.optim import AdamState, LBFGSState, adam_step, halve_lr, lbfgs_step


def quadratic(a, b):
    """f(x) = 0.5 x^T A x - b^T x with closed-form minimizer A^-1 b."""

    def closure(x):
        g = a @ x - b
        return float(0.5 * x @ a @ x - b @ x), g

    return closure


def rosenbrock(x):
    f = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    g = np.array(
        [
            -400.0 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]),
            200.0 * (x[1] - x[0] ** 2),
        ]
    )
    return float(f), g


class TestLBFGS:
    def test_quadratic_converges_to_solution(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((6, 6))
        a = m @ m.T + 6 * np.eye(6)
        b = rng.standard_normal(6)
        closure = quadratic(a, b)
        x = np.zeros(6)
        state = LBFGSState()
        for _ in range(40):
            x, f = lbfgs_step(state, x, closure)
        assert np.linalg.norm(x - np.linalg.solve(a, b)) < 1e-8

    def test_rosenbrock_converges(self):
        x = np.array([-1.2, 1.0])
        state = LBFGSState()
        for _ in range(60):
            x, f = lbfgs_step(state, x, rosenbrock)
            if state.no_progress:
                break
        assert np.linalg.norm(x - np.ones(2)) < 1e-6

    def test_monotone_nonincreasing_loss(self):
        rng = np.random.default_rng(1)
        m = rng.standard_normal((4, 4))
        a = m @ m.T + 4 * np.eye(4)
        closure = quadratic(a, rng.standard_normal(4))
        x = rng.standard_normal(4)
        state = LBFGSState()
        prev = closure(x)[0]
        for _ in range(20):
            x, f = lbfgs_step(state, x, closure)
            assert f <= prev + 1e-12
            prev = f

    def test_no_progress_flag_at_minimum(self):
        a = np.eye(2)
        b = np.zeros(2)
        closure = quadratic(a, b)
        x = np.zeros(2)  # already the exact minimizer
        state = LBFGSState()
        x, f = lbfgs_step(state, x, closure)
        assert state.no_progress

    @given(st.integers(0, 10_000))
    @settings(max_examples=10, deadline=None)
    def test_deterministic_given_start(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((3, 3))
        a = m @ m.T + 3 * np.eye(3)
        b = rng.standard_normal(3)
        runs = []
        for _ in range(2):
            x = np.ones(3)
            state = LBFGSState()
            for _ in range(5):
                x, _ = lbfgs_step(state, x, quadratic(a, b))
            runs.append(x.copy())
        assert np.array_equal(runs[0], runs[1])


class TestAdam:
    def test_quadratic_descent(self):
        a = np.diag([1.0, 10.0])
        closure = quadratic(a, np.array([1.0, -2.0]))
        x = np.zeros(2)
        state = AdamState(lr=0.05)
        f0 = closure(x)[0]
        for _ in range(2000):
            f, g = closure(x)
            x = adam_step(state, x, g)
        assert closure(x)[0] < f0
        assert np.linalg.norm(x - np.linalg.solve(a, np.array([1.0, -2.0]))) < 1e-3

    def test_skips_nonfinite_gradient(self):
        state = AdamState(lr=0.1)
        x = np.array([1.0, 2.0])
        out = adam_step(state, x, np.array([np.nan, 1.0]))
        assert np.array_equal(out, x)
        assert state.skipped == 1

    def test_halve_lr(self):
        state = AdamState(lr=0.2)
        halve_lr(state)
        assert state.lr == 0.1
        lstate = LBFGSState(lr=1.0)
        halve_lr(lstate)
        assert lstate.lr == 0.5
