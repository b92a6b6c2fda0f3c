from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import quiet_train, random_cmdp
from safemeta.cmdp import TabularCmdp, cmdp_distance, exact_policy_values
from safemeta.envs import build_gridworld, make_gridworld_sampler
from safemeta.meta_train import (
    TrainConfig,
    TrainingBundle,
    TrainingError,
    build_cover,
    cover_from_draws,
    coverage_of,
    estimate_covering_number,
    estimate_covering_numbers,
    initial_sample_size,
    rounds_of,
    stopping_statistic,
    train,
)
from safemeta.planner import oracle_optimal
from safemeta.tasks import FiniteSampler, Task, distance_matrix


def safe_cmdp(rng, concentration=0.5) -> TabularCmdp:
    """Random 3-state, 2-action CMDP where action 0 always pays a constraint margin of 0.5."""
    M = random_cmdp(rng, S=3, A=2, gamma=0.8, concentration=concentration)
    c = M.c.copy()
    c[:, 0] = 0.5
    return TabularCmdp(P=M.P, r=M.r, c=c, rho=M.rho, gamma=M.gamma)


def brute_force_greedy(D: np.ndarray, eps: float, slack: float) -> list[int]:
    """Textbook greedy set cover with python sets: pick the uncovered point whose ball holds most uncovered points."""
    n = len(D)
    balls = [{i for i in range(n) if D[i, j] <= eps} for j in range(n)]
    uncovered = set(range(n))
    chosen = []
    while True:
        best, best_gain = None, -1
        for j in sorted(uncovered):
            gain = len(balls[j] & uncovered)
            if gain > best_gain:
                best, best_gain = j, gain
        chosen.append(best)
        uncovered -= balls[best]
        if len(uncovered) <= slack or not uncovered:
            return chosen


class TestCover:
    def test_identical_samples(self, rng):
        M = random_cmdp(rng)
        cov = build_cover([M] * 8, eps=0.01, delta=0.1)
        assert cov.size == 1 and cov.covered_fraction == 1.0

    def test_far_samples_all_selected(self, rng):
        Ms = [random_cmdp(rng, concentration=0.2) for _ in range(6)]
        D = distance_matrix([Task(i, M) for i, M in enumerate(Ms)])
        eps = 0.5 * D[~np.eye(6, dtype=bool)].min()
        cov = build_cover(Ms, eps=eps, delta=1 / (3 * 6) - 1e-3)
        assert cov.size == 6 and cov.covered_fraction == 1.0
        assert cov.pairwise_min_distance > eps

    def test_gridworld_matches_brute_force(self):
        sampler = make_gridworld_sampler()
        tasks = sampler.draw_many(30, np.random.default_rng(3))
        eps = cmdp_distance(build_gridworld(0.0), build_gridworld(0.05))
        delta = 0.05
        D = distance_matrix(tasks)
        expected = brute_force_greedy(D, eps, 3 * delta * 30)
        via_oracle = build_cover(tasks, eps, delta)
        via_matrix = build_cover(tasks, eps, delta, distances=D)
        assert via_oracle.positions == expected
        assert via_matrix.positions == expected
        assert via_oracle.covered_fraction >= 1 - 3 * delta

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40),
           st.floats(0.01, 0.5), st.floats(0.005, 0.3))
    def test_guarantees(self, xs, eps, delta):
        x = np.array(xs)
        M = build_gridworld(0.0)
        tasks = [Task(i, M) for i in range(len(xs))]
        cov = build_cover(tasks, eps, delta, distances=np.abs(x[:, None] - x[None, :]))
        assert cov.covered_fraction >= 1 - 3 * delta
        assert cov.pairwise_min_distance > eps
        assert 1 <= cov.size <= len(xs)

    def test_empty(self):
        with pytest.raises(ValueError):
            build_cover([], 0.1, 0.1)


class LineFreeSampler:
    """Gridworld sampler without the line shortcut, forcing the dense route."""

    def __init__(self, inner):
        self.inner = inner
        self.line_slope = None

    def pairwise_distances(self, tasks):
        return self.inner.pairwise_distances(tasks)


@pytest.mark.parametrize("eps", [0.01, 0.0375, 0.1])
def test_line_and_dense_routes_agree(eps):
    sampler = make_gridworld_sampler()
    tasks = sampler.draw_many(600, np.random.default_rng(11))
    a = cover_from_draws(sampler, tasks, eps, 0.1, 0.3)
    b = cover_from_draws(LineFreeSampler(sampler), tasks, eps, 0.1, 0.3)
    assert a[0] == b[0] and a[1] == pytest.approx(b[1], abs=1e-15)


def test_repeated_draws_weighted():
    tasks = [Task(0, build_gridworld(0.1))] * 5 + [Task(1, build_gridworld(0.4))] * 2
    sampler = FiniteSampler([build_gridworld(0.1), build_gridworld(0.4)])
    picked, covered = cover_from_draws(sampler, tasks, 0.01, 0.05, 0.15)
    assert picked == [0, 5] and covered == 1.0


def test_initial_sample_size():
    assert initial_sample_size(0.2) == math.ceil(math.log(5) ** 2 / 0.04) == 65
    assert TrainConfig(delta=0.1).n_init == 531


def test_statistic_formula():
    assert stopping_statistic(2, 100, 0.1) == pytest.approx(math.sqrt(2 * math.log(2000) / 98))
    assert stopping_statistic(3, 3, 0.1) == math.inf


class TestTrain:
    def test_point_mass(self, rng):
        M = safe_cmdp(rng)
        b = quiet_train(FiniteSampler([M]), TrainConfig(delta=0.01, xi=0.05))
        assert len(rounds_of(b)) == 1 and rounds_of(b)[0]["n"] == initial_sample_size(0.01)
        assert len(b.tuples) == 1
        assert exact_policy_values(M, b.pi_s).v_constraint >= 0.05 - 1e-9

    def test_gridworld_structured(self, grid_bundle):
        b = grid_bundle
        assert b.config["feasibility_resolved"] == "structured"
        xi, eps = b.config["xi"], b.config["eps"]
        for t in b.tuples:
            M = build_gridworld(t.task_meta["task_index"])
            own = exact_policy_values(M, t.policy)
            safe = exact_policy_values(M, b.pi_s)
            assert (own.v_reward, own.v_constraint) == pytest.approx((t.u, t.v), abs=1e-8)
            assert (safe.v_reward, safe.v_constraint) == pytest.approx((t.u_s, t.v_s), abs=1e-8)
            assert t.v_s >= xi - 1e-9 and t.v >= -eps
            assert max(abs(t.u), abs(t.u_s)) <= 1 / (1 - M.gamma)
        # the safe policy is the margin-xi optimum of the noisiest task
        worst = oracle_optimal(build_gridworld(0.5), threshold=xi).values[0]
        got = exact_policy_values(build_gridworld(0.5), b.pi_s)
        assert got.v_reward == pytest.approx(worst.v_reward, abs=1e-8)

    def test_log_statistic_recomputed(self, grid_bundle):
        rounds = rounds_of(grid_bundle)
        d = grid_bundle.config["delta"]
        for r in rounds:
            n, u = r["n"], r["cover_size"]
            assert r["statistic"] == pytest.approx(math.sqrt(u * math.log(2 * n / d) / (n - u)))
        assert rounds[-1]["statistic"] <= d and not any(r["accepted"] for r in rounds[:-1])
        assert [r["n"] for r in rounds] == [65 * 2 ** i for i in range(len(rounds))]

    def test_two_point(self, rng):
        Ms = [safe_cmdp(rng, concentration=0.3) for _ in range(2)]
        eps = 0.5 * cmdp_distance(*Ms)
        b = quiet_train(FiniteSampler(Ms), TrainConfig(eps=eps, delta=0.1, xi=0.05))
        last = rounds_of(b)[-1]
        assert last["cover_size"] == 2 and len(b.tuples) == 2
        n = last["n"]
        assert math.sqrt(2 * math.log(2 * n / 0.1) / (n - 2)) <= 0.1

    def test_fresh_coverage(self):
        sampler = make_gridworld_sampler()
        for delta in (0.2, 0.05):
            b = quiet_train(sampler, TrainConfig(delta=delta))
            members = [sampler.task(t.task_meta["task_index"]) for t in b.tuples]
            fresh = sampler.draw_many(200, np.random.default_rng(99))
            frac = coverage_of(fresh, members, b.config["eps"], sampler)
            p = max(1 - 6 * delta, 0.0)
            assert frac * 200 >= p * 200 - 3 * math.sqrt(200 * p * (1 - p))

    def test_doubling_cap(self, rng):
        Ms = [random_cmdp(rng, S=3, A=2, gamma=0.8, concentration=0.2) for _ in range(12)]
        with pytest.raises(TrainingError) as err:
            quiet_train(FiniteSampler(Ms), TrainConfig(eps=1e-6, delta=0.2, max_doublings=0))
        assert err.value.last_statistic > 0.2

    def test_regime_warning(self):
        with pytest.warns(RuntimeWarning):
            train(make_gridworld_sampler(), TrainConfig(delta=0.2))

    def test_deterministic(self, grid_bundle):
        again = quiet_train(make_gridworld_sampler(), TrainConfig(delta=0.2))
        assert again.to_dict() == grid_bundle.to_dict()

    def test_bundle_round_trip(self, grid_bundle, tmp_path):
        grid_bundle.save(tmp_path / "b.json")
        back = TrainingBundle.load(tmp_path / "b.json")
        assert back.to_dict() == grid_bundle.to_dict()
        assert np.array_equal(back.pi_s.probs, grid_bundle.pi_s.probs)

    def test_config_validation(self):
        for kw in ({"eps": 0}, {"delta": 1.0}, {"xi": -1}, {"feasibility": "x"}):
            with pytest.raises(ValueError):
                TrainConfig(**kw)


class TestCoveringNumber:
    def test_point_mass(self, rng):
        assert estimate_covering_number(FiniteSampler([random_cmdp(rng)]), 0.01, 0.1, 50) == 1

    def test_above_diameter(self):
        s = make_gridworld_sampler()
        assert estimate_covering_number(s, s.slope * 0.5 + 1e-9, 0.05, 300) == 1

    def test_monotone(self):
        grid = [0.005, 0.01, 0.02, 0.05, 0.1, 0.2]
        est = estimate_covering_numbers(make_gridworld_sampler(), grid, 0.05, 2000)
        assert all(b <= a for a, b in zip(est, est[1:]))
        assert est[0] > est[-1]
