"""Tabular constrained MDPs: representation, exact evaluation and distances.

Arrays follow one layout throughout the package:

* ``P[s, a, s']`` transition probabilities,
* ``r[s, a]`` rewards in [0, 1], ``c[s, a]`` constraint signal in [-1, 1],
* ``rho[s]`` initial distribution,
* ``probs[s, a]`` policy tables.

A policy is feasible for a CMDP when its discounted constraint value is >= 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

STRUCT_TOL = 1e-12


def _frozen(x, ndim: int) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TabularCmdp:
    P: np.ndarray
    r: np.ndarray
    c: np.ndarray
    rho: np.ndarray
    gamma: float

    def __post_init__(self):
        P = _frozen(self.P, 3)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "r", _frozen(self.r, 2))
        object.__setattr__(self, "c", _frozen(self.c, 2))
        object.__setattr__(self, "rho", _frozen(self.rho, 1))
        object.__setattr__(self, "gamma", float(self.gamma))
        S, A, S2 = P.shape
        if S != S2:
            raise ValueError(f"transition tensor must be (S, A, S), got {P.shape}")
        for name in ("r", "c"):
            if getattr(self, name).shape != (S, A):
                raise ValueError(f"{name} must have shape {(S, A)}")
        if self.rho.shape != (S,):
            raise ValueError(f"rho must have shape {(S,)}")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.P.shape[:2]

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "rho": self.rho.tolist(),
            "P": self.P.tolist(),
            "r": self.r.tolist(),
            "c": self.c.tolist(),
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularCmdp":
        m = cls(P=d["P"], r=d["r"], c=d["c"], rho=d["rho"], gamma=d["gamma"])
        if m.shape != (d["n_states"], d["n_actions"]):
            raise ValueError("declared n_states/n_actions disagree with the arrays")
        return m


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(self.probs, 2))

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "Policy":
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    def violations(self) -> list[str]:
        out = []
        if (self.probs < 0).any():
            out.append(f"negative probability {self.probs.min():.3g}")
        sums = self.probs.sum(axis=1)
        for s in np.flatnonzero(np.abs(sums - 1) > STRUCT_TOL):
            out.append(f"policy row sum {sums[s]:.12g} != 1 at state {s}")
        return out

    def to_dict(self) -> dict:
        return {"n_states": self.shape[0], "n_actions": self.shape[1], "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        return cls(d["probs"])


@dataclass(frozen=True, eq=False)
class MixturePolicy:
    """One component is drawn from ``weights`` at episode start and run throughout.

    Components may themselves be mixtures; the nesting flattens by linearity.
    """

    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a mixture needs at least one component")
        w = _frozen(self.weights, 1)
        if w.shape != (len(comps),):
            raise ValueError("one weight per component required")
        if (w < 0).any() or abs(w.sum() - 1) > STRUCT_TOL:
            raise ValueError(f"mixture weights must be a probability vector, got {w}")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple[int, int]:
        return self.components[0].shape

    def flatten(self) -> tuple[list[Policy], np.ndarray]:
        """Base policies and their total weights (duplicates by identity merged)."""
        acc: dict[int, list] = {}
        for comp, w in zip(self.components, self.weights):
            if isinstance(comp, MixturePolicy):
                for p, pw in zip(*comp.flatten()):
                    acc.setdefault(id(p), [p, 0.0])[1] += w * pw
            else:
                acc.setdefault(id(comp), [comp, 0.0])[1] += w
        pols = [v[0] for v in acc.values()]
        return pols, np.array([v[1] for v in acc.values()])


AnyPolicy = Union[Policy, MixturePolicy]


class ValuePair(NamedTuple):
    v_reward: float
    v_constraint: float


def smoothness_constant(gamma: float) -> float:
    """Sensitivity of discounted values to the CMDP distance: |dV| <= L * d."""
    return 1.0 / (1.0 - gamma) + 2.0 * gamma / (1.0 - gamma) ** 2


def validate_cmdp(M: TabularCmdp) -> list[str]:
    """Every structural violation of ``M``, with location and magnitude."""
    out = []
    if (M.P < 0).any():
        for s, a, t in zip(*np.nonzero(M.P < 0)):
            out.append(f"negative transition probability {M.P[s, a, t]:.3g} at ({s},{a})->{t}")
    sums = M.P.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(sums - 1) > STRUCT_TOL)):
        out.append(f"row sum {sums[s, a]:.12g} != 1 at ({s},{a})")
    if (M.rho < 0).any() or abs(M.rho.sum() - 1) > STRUCT_TOL:
        out.append(f"rho is not a distribution (sum {M.rho.sum():.12g}, min {M.rho.min():.3g})")
    for s, a in zip(*np.nonzero((M.r < 0) | (M.r > 1))):
        out.append(f"reward out of [0,1]: {M.r[s, a]:.6g} at ({s},{a})")
    for s, a in zip(*np.nonzero(np.abs(M.c) > 1)):
        out.append(f"constraint out of [-1,1]: {M.c[s, a]:.6g} at ({s},{a})")
    if not 0 < M.gamma < 1:
        out.append(f"gamma {M.gamma} not in (0,1)")
    return out


def _check_dims(M: TabularCmdp, pi: AnyPolicy) -> None:
    if pi.shape != M.shape:
        raise ValueError(f"policy shape {pi.shape} does not match CMDP shape {M.shape}")


def state_values(M: TabularCmdp, pi: Policy) -> np.ndarray:
    """Per-state values, shape (S, 2): column 0 reward, column 1 constraint."""
    _check_dims(M, pi)
    P_pi = np.einsum("sa,sat->st", pi.probs, M.P)
    rhs = np.stack([(pi.probs * M.r).sum(1), (pi.probs * M.c).sum(1)], axis=1)
    return np.linalg.solve(np.eye(M.n_states) - M.gamma * P_pi, rhs)


def q_values(M: TabularCmdp, pi: Policy) -> np.ndarray:
    """Action values, shape (S, A, 2) with the same column convention."""
    V = state_values(M, pi)
    return np.stack([M.r, M.c], axis=-1) + M.gamma * np.einsum("sat,tk->sak", M.P, V)


def exact_policy_values(M: TabularCmdp, pi: AnyPolicy) -> ValuePair:
    if isinstance(pi, MixturePolicy):
        return exact_mixture_values(M, pi)
    vr, vc = M.rho @ state_values(M, pi)
    return ValuePair(float(vr), float(vc))


def exact_mixture_values(M: TabularCmdp, mix: MixturePolicy) -> ValuePair:
    pols, w = mix.flatten()
    vals = np.array([exact_policy_values(M, p) for p in pols])
    vr, vc = w @ vals
    return ValuePair(float(vr), float(vc))


def discounted_occupancy(M: TabularCmdp, pi: Policy) -> np.ndarray:
    """Discounted state-action visitation mu(s,a); total mass 1/(1-gamma)."""
    _check_dims(M, pi)
    P_pi = np.einsum("sa,sat->st", pi.probs, M.P)
    d = np.linalg.solve(np.eye(M.n_states) - M.gamma * P_pi.T, M.rho)
    return d[:, None] * pi.probs


def tv_distance(p: np.ndarray, q: np.ndarray, axis: int = -1) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=axis)


def cmdp_distance(M1: TabularCmdp, M2: TabularCmdp) -> float:
    if M1.shape != M2.shape:
        raise ValueError(f"dimension mismatch: {M1.shape} vs {M2.shape}")
    return float(max(
        np.abs(M1.r - M2.r).max(),
        np.abs(M1.c - M2.c).max(),
        tv_distance(M1.rho, M2.rho),
        tv_distance(M1.P, M2.P).max(),
    ))


def budget_to_margin(cost_table, budget: float, gamma: float, scale: float | None = None) -> np.ndarray:
    """Rewrite ``V_cost <= budget`` as ``V_c' >= 0`` with c' in [-1, 1].

    c'(s,a) = ((1-gamma) * budget - cost(s,a)) / scale, so that
    V_c'(pi) = (budget - V_cost(pi)) / scale for every policy.
    """
    cost = np.asarray(cost_table, dtype=float)
    shifted = (1.0 - gamma) * budget - cost
    needed = float(np.abs(shifted).max()) if shifted.size else 0.0
    if scale is None:
        scale = max(1.0, needed)
    if scale <= 0 or needed > scale * (1 + 1e-12):
        raise ValueError(f"scale {scale} too small: constraint would leave [-1,1] (need >= {needed})")
    return shifted / scale


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)
