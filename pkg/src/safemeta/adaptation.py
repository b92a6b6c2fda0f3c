"""Test-time adaptation on an unseen task.

Three deployment rules share one episode loop and report format:

* :func:`run_test`   -- optimistic candidate mixed with the safe policy, the
  mixture weight raised in verified stages, candidates eliminated when their
  predicted values disagree with observed returns;
* :func:`run_test_pce` -- the same elimination rule but candidates deployed
  directly (no safety mixing), kept as the unsafe baseline;
* :func:`run_static` -- deploy the safe policy every episode.

Rollout returns are discounted truncated sums so they estimate the same
quantities as the predicted values they are compared against.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .cmdp import (
    AnyPolicy,
    MixturePolicy,
    Policy,
    TabularCmdp,
    ValuePair,
    dump_json,
    exact_mixture_values,
    exact_policy_values,
    smoothness_constant,
)
from .meta_train import PolicyValueTuple

SAFETY_TOL = 1e-9
EVENTS = ("none", "eliminated", "alpha_updated")
CSV_COLUMNS = ("k", "l", "m", "alpha", "R_k", "C_k", "event", "true_Vr", "true_Vc", "regret_r", "regret_c")


# ---------------------------------------------------------------- rollouts

def _policy_tables(pi: AnyPolicy) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pi, MixturePolicy):
        pols, w = pi.flatten()
    else:
        pols, w = [pi], np.ones(1)
    return np.stack([p.probs for p in pols]), w


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF sampling; ``cdf`` is (n, K) cumulative, ``u`` is (n,)."""
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def _simulate(M: TabularCmdp, pi: AnyPolicy, H: int, n: int, rng: np.random.Generator,
              keep_path: bool = False):
    tables, w = _policy_tables(pi)
    comp = _inverse_cdf(np.broadcast_to(np.cumsum(w), (n, len(w))), rng.random(n))
    cum_pi = np.cumsum(tables, axis=2)
    cum_P = np.cumsum(M.P, axis=2)
    s = _inverse_cdf(np.broadcast_to(np.cumsum(M.rho), (n, M.n_states)), rng.random(n))
    R = np.zeros(n)
    C = np.zeros(n)
    disc = 1.0
    path = []
    for _ in range(H):
        a = _inverse_cdf(cum_pi[comp, s], rng.random(n))
        R += disc * M.r[s, a]
        C += disc * M.c[s, a]
        if keep_path:
            path.append((int(s[0]), int(a[0])))
        s = _inverse_cdf(cum_P[s, a], rng.random(n))
        disc *= M.gamma
    return comp, R, C, path


def rollout(M: TabularCmdp, pi: AnyPolicy, H: int, rng: np.random.Generator):
    """One length-H episode; returns (list of (s, a), R, C) with discounted sums."""
    if H < 1:
        raise ValueError("H must be at least 1")
    _, R, C, path = _simulate(M, pi, H, 1, rng, keep_path=True)
    return path, float(R[0]), float(C[0])


def sample_returns(M: TabularCmdp, pi: AnyPolicy, H: int, n: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Discounted truncated returns of ``n`` independent episodes, simulated together."""
    if H < 1:
        raise ValueError("H must be at least 1")
    _, R, C, _ = _simulate(M, pi, H, n, rng)
    return R, C


class RolloutTask:
    """Test-task handle. Algorithms only call :meth:`rollout`; exact values are for reporting."""

    def __init__(self, cmdp: TabularCmdp, index=None):
        self._cmdp = cmdp
        self.index = index

    def rollout(self, pi: AnyPolicy, H: int, rng: np.random.Generator):
        """(index of the mixture component drawn, R, C) for one episode."""
        comp, R, C, _ = _simulate(self._cmdp, pi, H, 1, rng)
        return int(comp[0]), float(R[0]), float(C[0])

    @property
    def evaluation_cmdp(self) -> TabularCmdp:
        return self._cmdp


# ---------------------------------------------------------------- schedule and thresholds

def default_horizon(eps: float, gamma: float) -> int:
    """Smallest H with gamma^H / (1 - gamma) <= eps, up to the log(1/gamma) >= 1 - gamma slack."""
    return max(1, math.ceil(math.log(1.0 / (eps * (1.0 - gamma))) / (1.0 - gamma)))


def contraction_base(v_ls: float, eps: float, L: float) -> float:
    return (2 * v_ls + (4 * L + 9) * eps) / (3 * v_ls)


def schedule_enabled(v_ls: float, eps: float, L: float) -> bool:
    return v_ls > (4 * L + 9) * eps


def alpha_schedule(v_ls: float, eps: float, L: float, gamma: float, m: int) -> float:
    if m < 0:
        raise ValueError("stage index must be non-negative")
    if m == 0:
        return 0.0
    if not schedule_enabled(v_ls, eps, L):
        raise ValueError(f"v_ls = {v_ls} must exceed (4L+9)eps = {(4 * L + 9) * eps}")
    head = v_ls - 2 * eps * (L + 2)
    a1 = head / (head + 2 / (1 - gamma))
    if m == 1:
        return a1
    top = v_ls - (4 * L + 9) * eps
    C = contraction_base(v_ls, eps, L)
    return top * a1 / (v_ls * a1 + (top - v_ls * a1) * C ** m)


def alpha_limit(v_ls: float, eps: float, L: float) -> float:
    return 1.0 - (4 * L + 9) * eps / v_ls


def stage_cap(v_ls: float, eps: float, L: float) -> int:
    """m(l) = ceil(ln eps / ln C_l); at eps = 1 no stage is needed and 0 is returned."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if not schedule_enabled(v_ls, eps, L):
        raise ValueError("contraction base C_l must be below 1")
    return math.ceil(math.log(eps) / math.log(contraction_base(v_ls, eps, L)))


def window_update_threshold(v_lm: float, K: int, delta: float, gamma: float) -> int:
    if v_lm <= 0:
        raise ValueError("the update window is undefined for a non-positive predicted constraint value")
    return math.ceil(32 * math.log(4 * K / delta) / ((1 - gamma) ** 2 * v_lm ** 2))


def elimination_radius(window_len: int, K: int, delta: float, gamma: float, eps: float, L: float) -> float:
    return math.sqrt(2 * math.log(4 * K / delta) / (window_len * (1 - gamma) ** 2)) + eps * (L + 1)


def elimination_check(window_mean_R: float, window_mean_C: float, u_lm: float, v_lm: float,
                      window_len: int, K: int, delta: float, gamma: float, eps: float, L: float) -> bool:
    if window_len < 1:
        raise ValueError("window_len must be at least 1")
    dev = max(abs(window_mean_R - u_lm), abs(window_mean_C - v_lm))
    return dev >= elimination_radius(window_len, K, delta, gamma, eps, L)


# ---------------------------------------------------------------- reports

@dataclass
class TestConfig:
    __test__ = False  # not a pytest class

    K: int = 500
    eps: float = 0.05
    delta: float = 0.2
    gamma: float = 0.9
    H: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.H is None:
            self.H = default_horizon(self.eps, self.gamma)
        if self.H < 1:
            raise ValueError("H must be at least 1")

    @property
    def L(self) -> float:
        return smoothness_constant(self.gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["L"] = self.L
        return d


@dataclass
class EpisodeRecord:
    k: int
    l: int          # tuple index in the bundle, -1 when the safe policy is deployed as fallback
    m: int
    alpha: float
    component: str  # "candidate" or "safe": the mixture component drawn for this episode
    R: float
    C: float
    event: str
    true_vr: float
    true_vc: float


@dataclass(eq=False)
class TestReport:
    __test__ = False

    algorithm: str
    episodes: list[EpisodeRecord]
    deployed: list[AnyPolicy]
    v_star: float
    regret_reward: np.ndarray
    regret_constraint: np.ndarray
    safety_violations: int
    flags: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def pi_out(self) -> MixturePolicy:
        K = len(self.deployed)
        return MixturePolicy(tuple(self.deployed), np.full(K, 1.0 / K))

    def rows(self) -> list[dict]:
        out = []
        for e, rr, rc in zip(self.episodes, self.regret_reward, self.regret_constraint):
            out.append({"k": e.k, "l": e.l, "m": e.m, "alpha": e.alpha, "R_k": e.R, "C_k": e.C,
                        "event": e.event, "true_Vr": e.true_vr, "true_Vc": e.true_vc,
                        "regret_r": float(rr), "regret_c": float(rc)})
        return out

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "config": self.config,
            "v_star": self.v_star,
            "final_regret_reward": float(self.regret_reward[-1]),
            "final_regret_constraint": float(self.regret_constraint[-1]),
            "safety_violations": self.safety_violations,
            "flags": self.flags,
            "episodes": self.rows(),
        }

    def save_json(self, path) -> None:
        dump_json(self.to_dict(), path)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def compute_regret(episodes: Sequence[EpisodeRecord], v_star: float) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative [V* - V_r]_+ and [V_c]_- over the exact values of the deployed policies."""
    if any(e.true_vr is None or e.true_vc is None for e in episodes):
        raise ValueError("episode records lack exact values")
    vr = np.array([e.true_vr for e in episodes], dtype=float)
    vc = np.array([e.true_vc for e in episodes], dtype=float)
    return np.cumsum(np.maximum(v_star - vr, 0.0)), np.cumsum(np.maximum(-vc, 0.0))


def _finish(name: str, episodes, deployed, v_star, flags, config: TestConfig) -> TestReport:
    rr, rc = compute_regret(episodes, v_star)
    unsafe = sum(e.true_vc < -SAFETY_TOL for e in episodes)
    return TestReport(name, episodes, deployed, v_star, rr, rc, int(unsafe), flags, config.to_dict())


class _Truth:
    """Exact values of bundle policies on the test task, computed once each."""

    def __init__(self, task: RolloutTask):
        self.M = task.evaluation_cmdp
        self._cache: dict[int, ValuePair] = {}

    def __call__(self, pi: Policy) -> ValuePair:
        key = id(pi)
        if key not in self._cache:
            self._cache[key] = exact_policy_values(self.M, pi)
        return self._cache[key]

    def mixture(self, pi_l: Policy, pi_s: Policy, alpha: float) -> ValuePair:
        a, b = self(pi_l), self(pi_s)
        return ValuePair(alpha * a.v_reward + (1 - alpha) * b.v_reward,
                         alpha * a.v_constraint + (1 - alpha) * b.v_constraint)


def _select(active: list[int], tuples: Sequence[PolicyValueTuple]) -> int:
    best = max(tuples[i].u for i in active)
    return min(i for i in active if tuples[i].u == best)


def _v_star(task: RolloutTask, v_star: float | None) -> float:
    if v_star is not None:
        return v_star
    from .planner import oracle_optimal
    return oracle_optimal(task.evaluation_cmdp).values[0].v_reward


# ---------------------------------------------------------------- algorithms

def run_test(task: RolloutTask, pi_s: Policy, tuples: Sequence[PolicyValueTuple], config: TestConfig,
             v_star: float | None = None) -> TestReport:
    """Safe adaptation: verify the optimistic candidate while mixing it with ``pi_s``."""
    if not tuples:
        raise ValueError("empty policy-value set")
    if any(t.v_s <= 0 for t in tuples):
        raise ValueError("every tuple needs a positive safe-policy constraint value v_s")
    rng = np.random.default_rng(config.rng_seed)
    K, H, eps, delta, gamma, L = config.K, config.H, config.eps, config.delta, config.gamma, config.L
    truth = _Truth(task)
    active = list(range(len(tuples)))
    flags = {"fallback_episodes": 0, "forced_eliminations": 0, "schedule_disabled": [], "eliminated": []}

    def start(l):
        tp = tuples[l]
        enabled = schedule_enabled(tp.v_s, eps, L)
        if not enabled:
            flags["schedule_disabled"].append(l)
        cap = stage_cap(tp.v_s, eps, L) if enabled else 0
        return cap, window_update_threshold(tp.v_s, K, delta, gamma)

    l = _select(active, tuples)
    cap, stage0_window = start(l)
    m, alpha, k0, sum_R, sum_C = 0, 0.0, 1, 0.0, 0.0
    episodes, deployed = [], []
    for k in range(1, K + 1):
        if l is None:
            _, R, C = task.rollout(pi_s, H, rng)
            tv = truth(pi_s)
            episodes.append(EpisodeRecord(k, -1, 0, 0.0, "safe", R, C, "none", tv.v_reward, tv.v_constraint))
            deployed.append(pi_s)
            flags["fallback_episodes"] += 1
            continue
        tp = tuples[l]
        pi_k = MixturePolicy((tp.policy, pi_s), np.array([alpha, 1.0 - alpha])) if alpha > 0 else pi_s
        u_lm = alpha * tp.u + (1 - alpha) * tp.u_s
        v_lm = alpha * tp.v + (1 - alpha) * tp.v_s
        comp, R, C = task.rollout(pi_k, H, rng)
        component = "candidate" if (alpha > 0 and comp == 0) else "safe"
        tv = truth.mixture(tp.policy, pi_s, alpha)
        sum_R += R
        sum_C += C
        n = k - k0 + 1
        event = "none"
        rec_l, rec_m, rec_alpha = l, m, alpha
        forced = v_lm <= 0 and n >= 4 * stage0_window
        if elimination_check(sum_R / n, sum_C / n, u_lm, v_lm, n, K, delta, gamma, eps, L) or forced:
            event = "eliminated"
            flags["eliminated"].append(l)
            flags["forced_eliminations"] += int(forced)
            active.remove(l)
            l = _select(active, tuples) if active else None
            if l is not None:
                cap, stage0_window = start(l)
            m, alpha, k0, sum_R, sum_C = 0, 0.0, k + 1, 0.0, 0.0
        elif v_lm > 0 and m < cap and n >= window_update_threshold(v_lm, K, delta, gamma):
            event = "alpha_updated"
            m += 1
            alpha = alpha_schedule(tp.v_s, eps, L, gamma, m)
            k0, sum_R, sum_C = k + 1, 0.0, 0.0
        episodes.append(EpisodeRecord(k, rec_l, rec_m, rec_alpha, component, R, C, event,
                                      tv.v_reward, tv.v_constraint))
        deployed.append(pi_k)
    return _finish("ours", episodes, deployed, _v_star(task, v_star), flags, config)


def run_test_pce(task: RolloutTask, tuples: Sequence[PolicyValueTuple], config: TestConfig,
                 v_star: float | None = None) -> TestReport:
    """Unsafe baseline: deploy the optimistic candidate itself, eliminate on any value mismatch."""
    if not tuples:
        raise ValueError("empty policy-value set")
    rng = np.random.default_rng(config.rng_seed)
    K, H, eps, delta, gamma, L = config.K, config.H, config.eps, config.delta, config.gamma, config.L
    truth = _Truth(task)
    active = list(range(len(tuples)))
    flags = {"exhausted_episodes": 0, "eliminated": []}
    l = _select(active, tuples)
    k0, sum_R, sum_C = 1, 0.0, 0.0
    episodes, deployed = [], []
    for k in range(1, K + 1):
        tp = tuples[l]
        _, R, C = task.rollout(tp.policy, H, rng)
        tv = truth(tp.policy)
        event = "none"
        rec_l = l
        if active:
            sum_R += R
            sum_C += C
            n = k - k0 + 1
            radius = elimination_radius(n, K, delta, gamma, eps, L)
            if abs(sum_R / n - tp.u) >= radius or abs(sum_C / n - tp.v) >= radius:
                event = "eliminated"
                flags["eliminated"].append(l)
                active.remove(l)
                if active:
                    l = _select(active, tuples)
                k0, sum_R, sum_C = k + 1, 0.0, 0.0
        else:
            # every candidate was rejected; keep the last one so the run still has K episodes
            flags["exhausted_episodes"] += 1
        episodes.append(EpisodeRecord(k, rec_l, 0, 1.0, "candidate", R, C, event,
                                      tv.v_reward, tv.v_constraint))
        deployed.append(tp.policy)
    return _finish("pce_baseline", episodes, deployed, _v_star(task, v_star), flags, config)


def run_static(task: RolloutTask, pi_s: Policy, config: TestConfig,
               v_star: float | None = None) -> TestReport:
    rng = np.random.default_rng(config.rng_seed)
    tv = exact_policy_values(task.evaluation_cmdp, pi_s)
    episodes = []
    for k in range(1, config.K + 1):
        _, R, C = task.rollout(pi_s, config.H, rng)
        episodes.append(EpisodeRecord(k, -1, 0, 0.0, "safe", R, C, "none", tv.v_reward, tv.v_constraint))
    return _finish("static_safe", episodes, [pi_s] * config.K, _v_star(task, v_star), {}, config)


def pi_out_values(report: TestReport, M: TabularCmdp) -> ValuePair:
    return exact_mixture_values(M, report.pi_out)
