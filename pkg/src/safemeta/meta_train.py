"""Training phase: cover the task distribution, solve each cover member, find a shared safe policy.

The output is a :class:`TrainingBundle` holding the shared feasible policy
``pi_s`` and one :class:`PolicyValueTuple` per cover member. The bundle's JSON
form is the only thing the testing phase reads.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .cmdp import Policy, TabularCmdp, dump_json, exact_policy_values, load_json, smoothness_constant
from .planner import oracle_check, oracle_feasible, oracle_optimal
from .tasks import Task, TaskSampler

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1


class TrainingError(Exception):
    """The doubling loop hit its cap before the stopping statistic dropped below delta."""

    def __init__(self, msg: str, last_statistic: float):
        super().__init__(msg)
        self.last_statistic = last_statistic


def initial_sample_size(delta: float) -> int:
    return math.ceil(math.log(1.0 / delta) ** 2 / delta ** 2)


def stopping_statistic(cover_size: int, n: int, delta: float) -> float:
    """Coverage-error bound sqrt(|U| ln(2N/delta) / (N - |U|)); inf when every sample is a member."""
    if n <= cover_size:
        return math.inf
    return math.sqrt(cover_size * math.log(2 * n / delta) / (n - cover_size))


def theory_regime_holds(eps: float, xi: float, gamma: float) -> bool:
    return (8 * smoothness_constant(gamma) + 18) * eps <= xi


@dataclass
class TrainConfig:
    eps: float = 0.05
    delta: float = 0.2
    xi: float = 0.05
    n_init: int | None = None
    max_doublings: int = 20
    rng_seed: int = 0
    feasibility: str = "auto"  # auto | structured | generic

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if self.feasibility not in ("auto", "structured", "generic"):
            raise ValueError(f"unknown feasibility mode {self.feasibility!r}")
        if self.n_init is None:
            self.n_init = initial_sample_size(self.delta)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class CoverSet:
    members: list[tuple[object, TabularCmdp]]
    positions: list[int]  # sample positions of the members, in selection order
    pairwise_min_distance: float
    covered_fraction: float

    @property
    def size(self) -> int:
        return len(self.members)


def _greedy_cover(A: np.ndarray, weight: np.ndarray, max_uncovered: float) -> list[int]:
    """Greedy set cover on the boolean matrix A[i, j] = (i within eps of j).

    ``weight[i]`` is the number of samples row ``i`` stands for. Candidates are
    restricted to still-uncovered columns, so every new member is more than eps
    from all earlier ones; ties go to the lowest index.
    """
    uncovered = np.ones(A.shape[0], dtype=bool)
    chosen: list[int] = []
    while True:
        gains = weight[uncovered] @ A[uncovered]
        gains = np.where(uncovered, gains, -1.0)
        j = int(np.argmax(gains))
        chosen.append(j)
        uncovered &= ~A[:, j]
        if weight[uncovered].sum() <= max_uncovered or not uncovered.any():
            return chosen


def _greedy_cover_line(x: np.ndarray, weight: np.ndarray, radius: float,
                       max_uncovered: float) -> list[int]:
    """Same greedy rule as :func:`_greedy_cover` for points on a line, ``A[i, j] = |x_i - x_j| <= radius``.

    Gains come from prefix sums over the sorted points, so memory stays linear in
    the number of distinct draws.
    """
    order = np.argsort(x, kind="stable")
    xs = x[order]
    lo = np.searchsorted(xs, x - radius, side="left")
    hi = np.searchsorted(xs, x + radius, side="right")
    uncovered = np.ones(x.size, dtype=bool)
    chosen: list[int] = []
    while True:
        csum = np.concatenate([[0.0], np.cumsum(np.where(uncovered[order], weight[order], 0.0))])
        gains = np.where(uncovered, csum[hi] - csum[lo], -1.0)
        j = int(np.argmax(gains))
        chosen.append(j)
        uncovered &= np.abs(x - x[j]) > radius
        if weight[uncovered].sum() <= max_uncovered or not uncovered.any():
            return chosen


def _as_tasks(samples: Sequence) -> list[Task]:
    return [s if isinstance(s, Task) else Task(i, s) for i, s in enumerate(samples)]


def build_cover(samples: Sequence, eps: float, delta: float,
                distances: np.ndarray | None = None) -> CoverSet:
    """Reduce N sampled CMDPs to a set whose eps-balls hold all but at most 3*delta*N of them.

    ``samples`` may be :class:`Task` objects or bare CMDPs. ``distances`` is an
    optional precomputed exact distance matrix; without it every pair goes
    through :func:`oracle_check`.
    """
    tasks = _as_tasks(samples)
    n = len(tasks)
    if n == 0:
        raise ValueError("no samples to cover")
    if distances is None:
        A = np.eye(n, dtype=bool)
        for i in range(n):
            for j in range(i + 1, n):
                A[i, j] = A[j, i] = oracle_check(tasks[i].cmdp, tasks[j].cmdp, eps, delta / n ** 2)
        D = None
    else:
        D = np.asarray(distances, dtype=float)
        A = D <= eps
    chosen = _greedy_cover(A, np.ones(n), 3 * delta * n)
    return _finish_cover(tasks, chosen, A[:, chosen].any(axis=1).mean(), D)


def _finish_cover(tasks: list[Task], chosen: list[int], covered: float, D) -> CoverSet:
    if len(chosen) < 2:
        dmin = math.inf
    elif D is not None:
        sub = D[np.ix_(chosen, chosen)]
        dmin = float(sub[~np.eye(len(chosen), dtype=bool)].min())
    else:
        from .cmdp import cmdp_distance
        dmin = min(cmdp_distance(tasks[a].cmdp, tasks[b].cmdp)
                   for x, a in enumerate(chosen) for b in chosen[x + 1:])
    return CoverSet([(tasks[j].index, tasks[j].cmdp) for j in chosen], list(chosen), dmin, float(covered))


def cover_from_draws(sampler: TaskSampler, tasks: list[Task], eps: float, delta: float,
                     max_uncovered_frac: float) -> tuple[list[int], float]:
    """Greedy cover of a draw list; repeated task indices are merged into weighted rows.

    Returns the chosen positions (first occurrences in ``tasks``) and the covered fraction.
    """
    first: dict = {}
    for pos, t in enumerate(tasks):
        first.setdefault(t.index, pos)
    uniq = list(first.values())
    counts = np.zeros(len(uniq))
    slot = {t_idx: k for k, t_idx in enumerate(first)}
    for t in tasks:
        counts[slot[t.index]] += 1
    slope = getattr(sampler, "line_slope", None)
    if slope:
        # the family metric is slope * |index difference|; avoid the dense N x N matrix
        x = np.array([tasks[p].index for p in uniq], dtype=float)
        radius = eps / slope
        picked = _greedy_cover_line(x, counts, radius, max_uncovered_frac * len(tasks))
        near = (np.abs(x[:, None] - x[picked][None, :]) <= radius).any(axis=1)
    else:
        A = sampler.pairwise_distances([tasks[p] for p in uniq]) <= eps
        picked = _greedy_cover(A, counts, max_uncovered_frac * len(tasks))
        near = A[:, picked].any(axis=1)
    covered = counts[near].sum() / len(tasks)
    return [uniq[k] for k in picked], float(covered)


@dataclass(eq=False)
class PolicyValueTuple:
    policy: Policy
    u: float
    v: float
    u_s: float
    v_s: float
    task_meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"policy": self.policy.to_dict(), "u": self.u, "v": self.v,
                "u_s": self.u_s, "v_s": self.v_s, "task_meta": self.task_meta}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyValueTuple":
        return cls(Policy.from_dict(d["policy"]), float(d["u"]), float(d["v"]),
                   float(d["u_s"]), float(d["v_s"]), dict(d.get("task_meta", {})))


@dataclass(eq=False)
class TrainingBundle:
    pi_s: Policy
    tuples: list[PolicyValueTuple]
    config: dict
    log: list[dict]

    def to_dict(self) -> dict:
        return {
            "version": BUNDLE_VERSION,
            "pi_s": self.pi_s.to_dict(),
            "tuples": [t.to_dict() for t in self.tuples],
            "config": self.config,
            "log": self.log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingBundle":
        return cls(Policy.from_dict(d["pi_s"]), [PolicyValueTuple.from_dict(t) for t in d["tuples"]],
                   d.get("config", {}), d.get("log", []))

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "TrainingBundle":
        return cls.from_dict(load_json(path))


def _round_rng(seed: int, rnd: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rnd]))


def train(sampler: TaskSampler, config: TrainConfig) -> TrainingBundle:
    """Sample, cover, and double N until the coverage statistic is at most delta, then call the oracles."""
    n = int(config.n_init)
    rounds: list[dict] = []
    for rnd in range(config.max_doublings + 1):
        tasks = sampler.draw_many(n, _round_rng(config.rng_seed, rnd))
        chosen, covered = cover_from_draws(sampler, tasks, config.eps, config.delta, 3 * config.delta)
        stat = stopping_statistic(len(chosen), n, config.delta)
        rounds.append({"round": rnd, "n": n, "cover_size": len(chosen), "covered_fraction": covered,
                       "statistic": stat, "accepted": stat <= config.delta})
        log.info("round %d: N=%d |U|=%d statistic=%.4f", rnd, n, len(chosen), stat)
        if stat <= config.delta:
            break
        n *= 2
    else:
        raise TrainingError(
            f"stopping statistic {stat:.4g} still above delta={config.delta} after "
            f"{config.max_doublings} doublings", stat)

    members = [tasks[p] for p in chosen]
    cmdps = [t.cmdp for t in members]
    gamma = cmdps[0].gamma
    if not theory_regime_holds(config.eps, config.xi, gamma):
        warnings.warn(
            f"(8L+18)*eps = {(8 * smoothness_constant(gamma) + 18) * config.eps:.4g} exceeds xi = {config.xi}; "
            "outside the regime covered by the test-time guarantees", RuntimeWarning)

    optima = [oracle_optimal(M, config.eps, config.delta / (2 * len(cmdps))) for M in cmdps]

    mode = config.feasibility
    if mode == "auto":
        mode = "structured" if sampler.monotone_parameter else "generic"
    if mode == "structured":
        worst = sampler.worst_case()
        pool = cmdps + ([worst.cmdp] if worst is not None else [])
        params = [float(t.index) for t in members] + ([float(worst.index)] if worst is not None else [])
        feas = oracle_feasible(pool, config.xi, config.delta / 2, parameters=params)
    else:
        feas = oracle_feasible(cmdps, config.xi, config.delta / 2)
    pi_s = feas.policy
    safe_vals = feas.values[:len(cmdps)]

    tuples = []
    for pos, (t, opt, sv) in enumerate(zip(members, optima, safe_vals)):
        (u, v), = opt.values
        tuples.append(PolicyValueTuple(opt.policy, u, v, sv.v_reward, sv.v_constraint,
                                       {"task_index": _jsonable(t.index), "cover_position": pos}))

    cfg = config.to_dict()
    cfg["feasibility_resolved"] = mode
    cfg["sampler"] = sampler.describe()
    cfg["theory_regime"] = theory_regime_holds(config.eps, config.xi, gamma)
    feas_cert = {k: _jsonable(v) for k, v in feas.certificate.items()}
    return TrainingBundle(pi_s, tuples, cfg, rounds + [{"feasibility": feas_cert}])


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def rounds_of(bundle: TrainingBundle) -> list[dict]:
    return [r for r in bundle.log if "round" in r]


def coverage_of(tasks: Sequence[Task], bundle_members: Sequence[Task], eps: float,
                sampler: TaskSampler) -> float:
    """Fraction of ``tasks`` lying within eps of some member."""
    D = sampler.pairwise_distances(list(tasks) + list(bundle_members))
    k = len(tasks)
    return float((D[:k, k:] <= eps).any(axis=1).mean())


def estimate_covering_number(sampler: TaskSampler, eps: float, delta: float, n_samples: int,
                             rng: np.random.Generator | int = 0) -> int:
    """Greedy upper estimate of how many eps-balls hold a (1 - delta) share of the distribution."""
    return estimate_covering_numbers(sampler, [eps], delta, n_samples, rng)[0]


def estimate_covering_numbers(sampler: TaskSampler, eps_grid: Sequence[float], delta: float,
                              n_samples: int, rng: np.random.Generator | int = 0) -> list[int]:
    """Estimates for several radii on one shared draw.

    A cover at a smaller radius is also a cover at a larger one, so each estimate
    is the minimum over all grid radii not exceeding it; this keeps the table
    non-increasing in eps even where greedy alone would wobble.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    tasks = sampler.draw_many(n_samples, rng)
    raw = {e: len(cover_from_draws(sampler, tasks, e, delta, delta)[0]) for e in eps_grid}
    out = []
    for e in eps_grid:
        out.append(min(raw[x] for x in eps_grid if x <= e))
    return out
