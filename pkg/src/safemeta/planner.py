"""Exact training oracles over occupancy measures.

* :func:`oracle_check`   -- is one CMDP within eps of another (exact distance)
* :func:`oracle_optimal` -- LP-optimal feasible policy of one CMDP
* :func:`oracle_feasible` -- one policy with constraint margin xi on a task set

The exact implementations succeed deterministically, so the confidence
arguments (``delta``) are carried only for bookkeeping.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cmdp import (
    Policy,
    TabularCmdp,
    ValuePair,
    cmdp_distance,
    exact_policy_values,
    q_values,
    state_values,
)
from .simplex import InfeasibleLP, linprog_max

log = logging.getLogger(__name__)

FLOW_TOL = 1e-8
UNVISITED = 1e-12


class InfeasibleCmdp(Exception):
    """No policy reaches the requested constraint threshold."""


class FeasibilityOracleError(Exception):
    """The max-min ascent stopped without reaching the requested margin."""

    def __init__(self, msg: str, best_margin: float, best_policy: Policy):
        super().__init__(msg)
        self.best_margin = best_margin
        self.best_policy = best_policy


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    mu: np.ndarray
    objective: float
    optimality_gap: float = 0.0

    def flow_residual(self, M: TabularCmdp) -> float:
        inflow = M.rho + M.gamma * np.einsum("sa,sat->t", self.mu, M.P)
        return float(np.abs(self.mu.sum(1) - inflow).max())


@dataclass(frozen=True, eq=False)
class OracleOutcome:
    policy: Policy
    values: list[ValuePair]
    certificate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.to_dict(),
            "values": [list(v) for v in self.values],
            "certificate": self.certificate,
        }


def occupancy_lp(M: TabularCmdp) -> tuple[np.ndarray, np.ndarray]:
    """Flow-conservation system A mu = rho over mu flattened as s * A + a."""
    S, A = M.shape
    E = np.kron(np.eye(S), np.ones((1, A)))
    return E - M.gamma * M.P.reshape(S * A, S).T, M.rho


def solve_cmdp_lp(M: TabularCmdp, constraint_threshold: float = 0.0) -> OccupancyMeasure:
    """max sum mu*r  s.t. flow conservation, sum mu*c >= threshold, mu >= 0."""
    A_eq, b_eq = occupancy_lp(M)
    try:
        res = linprog_max(M.r.ravel(), A_eq, b_eq, A_ub=[-M.c.ravel()], b_ub=[-constraint_threshold])
    except InfeasibleLP as exc:
        raise InfeasibleCmdp(
            f"no policy reaches constraint value {constraint_threshold:.6g}"
        ) from exc
    occ = OccupancyMeasure(res.x.reshape(M.shape), res.objective, res.optimality_gap)
    if occ.flow_residual(M) > FLOW_TOL:
        log.warning("LP solution violates flow conservation by %.2e", occ.flow_residual(M))
    return occ


def occupancy_to_policy(occ: OccupancyMeasure | np.ndarray) -> Policy:
    mu = np.clip(occ.mu if isinstance(occ, OccupancyMeasure) else np.asarray(occ, float), 0, None)
    mass = mu.sum(axis=1, keepdims=True)
    visited = mass > UNVISITED
    probs = np.where(visited, mu / np.where(visited, mass, 1.0), 1.0 / mu.shape[1])
    return Policy(probs)


def oracle_optimal(M: TabularCmdp, eps: float = 0.0, delta: float = 0.0, *,
                   threshold: float = 0.0) -> OracleOutcome:
    """LP-optimal policy with exact feasibility (V_c >= threshold, default 0)."""
    occ = solve_cmdp_lp(M, threshold)
    pi = occupancy_to_policy(occ)
    vals = exact_policy_values(M, pi)
    return OracleOutcome(pi, [vals], {
        "objective": occ.objective,
        "optimality_gap": occ.optimality_gap,
        "constraint_slack": vals.v_constraint - threshold,
        "threshold": threshold,
        "eps": eps,
        "delta": delta,
    })


def oracle_check(M1: TabularCmdp, M2: TabularCmdp, eps: float, delta: float = 0.0) -> bool:
    return cmdp_distance(M1, M2) <= eps


def _evaluate_all(tasks: Sequence[TabularCmdp], pi: Policy) -> list[ValuePair]:
    return [exact_policy_values(M, pi) for M in tasks]


def oracle_feasible(
    tasks: Sequence[TabularCmdp],
    xi: float,
    delta: float = 0.0,
    *,
    parameters: Sequence[float] | None = None,
    max_iter: int = 10_000,
    step_size: float | None = None,
    history: list | None = None,
) -> OracleOutcome:
    """A single policy with V_c >= xi on every task.

    With ``parameters`` given, the family is taken to be constraint-monotone in
    that scalar: the CMDP with the largest parameter is solved with threshold
    ``xi`` and the result is checked exactly on all tasks. Otherwise a max-min
    mirror ascent runs against the currently worst task.
    """
    tasks = list(tasks)
    if not tasks:
        raise ValueError("empty task list")
    if parameters is not None:
        worst = int(np.argmax(parameters))
        try:
            out = oracle_optimal(tasks[worst], threshold=xi)
        except InfeasibleCmdp as exc:
            raise FeasibilityOracleError(
                f"worst-parameter task {worst} admits no policy with margin {xi}", -math.inf,
                Policy.uniform(*tasks[0].shape),
            ) from exc
        values = _evaluate_all(tasks, out.policy)
        margin = min(v.v_constraint for v in values)
        if margin < xi - FLOW_TOL:
            raise FeasibilityOracleError(
                f"family is not constraint-monotone: margin {margin:.6g} < {xi}", margin, out.policy
            )
        return OracleOutcome(out.policy, values, {
            "mode": "structured", "worst_task": worst, "margin": margin, "xi": xi, "delta": delta,
        })
    return _max_min_ascent(tasks, xi, delta, max_iter, step_size, history)


def _max_min_ascent(tasks, xi, delta, max_iter, step_size, history) -> OracleOutcome:
    gamma = tasks[0].gamma
    eta0 = (1.0 - gamma) if step_size is None else step_size
    logits = np.zeros(tasks[0].shape)
    best_margin, best_pi = -math.inf, None
    for t in range(1, max_iter + 1):
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z)
        pi = Policy(probs / probs.sum(axis=1, keepdims=True))
        margins = [exact_policy_values(M, pi).v_constraint for M in tasks]
        worst = int(np.argmin(margins))
        if margins[worst] > best_margin:
            best_margin, best_pi = margins[worst], pi
        if history is not None:
            history.append(best_margin)
        if best_margin >= xi:
            break
        # KL mirror ascent on the worst task's constraint advantage
        M = tasks[worst]
        Qc = q_values(M, pi)[..., 1]
        Vc = state_values(M, pi)[:, 1]
        logits = logits + eta0 / math.sqrt(t) * (Qc - Vc[:, None])
    else:
        raise FeasibilityOracleError(
            f"max-min ascent reached {max_iter} iterations with margin {best_margin:.6g} < {xi}",
            best_margin, best_pi,
        )
    return OracleOutcome(best_pi, _evaluate_all(tasks, best_pi), {
        "mode": "generic", "iterations": t, "margin": best_margin, "xi": xi, "delta": delta,
    })
