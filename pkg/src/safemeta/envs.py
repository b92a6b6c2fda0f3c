"""Noisy 7x7 gridworld family with unsafe cells, and its noise distribution.

Cells are addressed ``[row, col]`` with row 0 at the top; state id is
``row * width + col``. Actions are up, right, down, left. With noise ``i`` the
intended move happens with probability ``1 - i`` and each of the four moves is
additionally taken with probability ``i / 4``. Moves off the grid stay put and
the goal is absorbing.

Raw rewards (``reward`` per step at the goal) are divided by ``reward`` so
that r lies in [0, 1]. The raw cost is ``cost`` times the probability that the
transition lands in an unsafe cell; it is turned into a margin-form constraint
with :func:`~safemeta.cmdp.budget_to_margin` using ``scale = cost``, so
V_c >= 0 exactly when the discounted raw cost is at most ``budget``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np

from .cmdp import TabularCmdp, budget_to_margin, cmdp_distance, load_json
from .tasks import Task, TaskSampler

MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
ACTION_NAMES = ("up", "right", "down", "left")
NOISE_MAX = 0.5


@dataclass(frozen=True)
class GridLayout:
    width: int = 7
    height: int = 7
    start: tuple[int, int] = (6, 3)
    goal: tuple[int, int] = (0, 3)
    unsafe_cells: tuple[tuple[int, int], ...] = ((2, 2), (3, 2), (4, 2), (2, 4), (3, 4), (4, 4))
    reward: float = 10.0
    cost: float = 10.0
    budget: float = 1.5
    gamma: float = 0.9
    version: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "GridLayout":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            start=tuple(d["start"]),
            goal=tuple(d["goal"]),
            unsafe_cells=tuple(tuple(c) for c in d["unsafe_cells"]),
            reward=float(d["reward"]),
            cost=float(d["cost"]),
            budget=float(d["budget"]),
            gamma=float(d["gamma"]),
            version=int(d.get("version", 1)),
        )

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "width": self.width,
            "height": self.height,
            "start": list(self.start),
            "goal": list(self.goal),
            "unsafe_cells": [list(c) for c in self.unsafe_cells],
            "reward": self.reward,
            "cost": self.cost,
            "budget": self.budget,
            "gamma": self.gamma,
        }

    @property
    def n_states(self) -> int:
        return self.width * self.height

    def state(self, cell: Sequence[int]) -> int:
        return int(cell[0]) * self.width + int(cell[1])


def load_layout(path=None) -> GridLayout:
    if path is None:
        path = resources.files("safemeta").joinpath("layouts/gridworld_7x7.json")
    return GridLayout.from_dict(load_json(path))


DEFAULT_LAYOUT = load_layout()


@lru_cache(maxsize=8)
def _base_tables(layout: GridLayout):
    """Noise-free and fully-random transition tensors plus the unsafe mask."""
    S, A = layout.n_states, len(MOVES)
    P_move = np.zeros((S, A, S))
    for r in range(layout.height):
        for c in range(layout.width):
            s = r * layout.width + c
            for a, (dr, dc) in enumerate(MOVES):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < layout.height and 0 <= cc < layout.width):
                    rr, cc = r, c
                P_move[s, a, rr * layout.width + cc] = 1.0
    g = layout.state(layout.goal)
    P_move[g] = 0.0
    P_move[g, :, g] = 1.0
    P_rand = np.repeat(P_move.mean(axis=1, keepdims=True), A, axis=1)
    unsafe = np.zeros(S)
    for cell in layout.unsafe_cells:
        unsafe[layout.state(cell)] = 1.0
    return P_move, P_rand, unsafe


def build_gridworld(noise: float, layout: GridLayout = DEFAULT_LAYOUT) -> TabularCmdp:
    if not 0.0 <= noise <= NOISE_MAX:
        raise ValueError(f"noise {noise} outside [0, {NOISE_MAX}]")
    P_move, P_rand, unsafe = _base_tables(layout)
    P = (1.0 - noise) * P_move + noise * P_rand
    S, A = P.shape[:2]
    rho = np.zeros(S)
    rho[layout.state(layout.start)] = 1.0
    r = np.zeros((S, A))
    r[layout.state(layout.goal)] = 1.0
    raw_cost = layout.cost * (P @ unsafe)
    c = budget_to_margin(raw_cost, layout.budget, layout.gamma, scale=layout.cost)
    return TabularCmdp(P=P, r=r, c=c, rho=rho, gamma=layout.gamma)


def to_raw_units(values, layout: GridLayout = DEFAULT_LAYOUT) -> tuple[float, float]:
    """(discounted raw reward, discounted raw cost) from transformed (V_r, V_c)."""
    vr, vc = values
    return vr * layout.reward, layout.budget - vc * layout.cost


@dataclass(frozen=True)
class NoiseDistribution:
    """Gaussian noise level truncated to [low, high].

    ``spread`` is read as a variance or a standard deviation depending on
    ``interpretation``.
    """

    mean: float = 0.3
    spread: float = 0.03
    interpretation: str = "variance"
    low: float = 0.0
    high: float = NOISE_MAX

    def __post_init__(self):
        if self.interpretation not in ("variance", "stddev"):
            raise ValueError("interpretation must be 'variance' or 'stddev'")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.spread) if self.interpretation == "variance" else self.spread

    def sample(self, rng: np.random.Generator) -> float:
        while True:
            x = rng.normal(self.mean, self.sigma)
            if self.low <= x <= self.high:
                return float(x)

    def truncated_mean(self) -> float:
        phi = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        Phi = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))
        a = (self.low - self.mean) / self.sigma
        b = (self.high - self.mean) / self.sigma
        return self.mean + self.sigma * (phi(a) - phi(b)) / (Phi(b) - Phi(a))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "spread": self.spread, "interpretation": self.interpretation,
                "low": self.low, "high": self.high}


class GridworldSampler(TaskSampler):
    """Draws noise levels and builds the matching gridworld.

    The family is linear in the noise level, so the CMDP distance between two
    members is ``slope * |i - j|``; ``slope`` is measured once by enumeration.
    """

    monotone_parameter = True

    def __init__(self, dist: NoiseDistribution = NoiseDistribution(), layout: GridLayout = DEFAULT_LAYOUT,
                 rng: np.random.Generator | None = None):
        self.dist = dist
        self.layout = layout
        self.rng = rng
        self.slope = cmdp_distance(build_gridworld(0.0, layout), build_gridworld(NOISE_MAX, layout)) / NOISE_MAX

    def task(self, noise: float) -> Task:
        noise = float(noise)
        if not 0.0 <= noise <= NOISE_MAX:
            raise ValueError(f"noise {noise} outside [0, {NOISE_MAX}]")
        return Task(noise, factory=lambda: build_gridworld(noise, self.layout))

    def draw(self, rng: np.random.Generator | None = None) -> Task:
        return self.task(self.dist.sample(self.rng if rng is None else rng))

    @property
    def line_slope(self) -> float:
        return self.slope

    def pairwise_distances(self, tasks: Sequence[Task]) -> np.ndarray:
        x = np.array([t.index for t in tasks], dtype=float)
        return self.slope * np.abs(x[:, None] - x[None, :])

    def worst_case(self) -> Task:
        return self.task(self.dist.high)

    def describe(self) -> dict:
        return {"kind": "gridworld", "noise": self.dist.to_dict(), "layout": self.layout.to_dict(),
                "distance_slope": self.slope}


def make_gridworld_sampler(dist: NoiseDistribution = NoiseDistribution(),
                           rng: np.random.Generator | None = None,
                           layout: GridLayout = DEFAULT_LAYOUT) -> GridworldSampler:
    return GridworldSampler(dist, layout, rng)
