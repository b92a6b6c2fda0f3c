"""Task distributions: anything that can draw (index, CMDP) pairs."""
from __future__ import annotations

from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .cmdp import TabularCmdp, cmdp_distance
from .planner import OracleOutcome, oracle_optimal


class Task:
    """A drawn task. The CMDP is built on first access, so large sample sets stay cheap."""

    def __init__(self, index, cmdp: TabularCmdp | None = None,
                 factory: Callable[[], TabularCmdp] | None = None):
        if cmdp is None and factory is None:
            raise ValueError("need a CMDP or a factory")
        self.index = index
        self._factory = factory
        if cmdp is not None:
            self.__dict__["cmdp"] = cmdp

    @cached_property
    def cmdp(self) -> TabularCmdp:
        return self._factory()

    def __repr__(self):
        return f"Task(index={self.index!r})"


def distance_matrix(tasks: Sequence[Task]) -> np.ndarray:
    """Brute-force pairwise CMDP distances."""
    n = len(tasks)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = cmdp_distance(tasks[i].cmdp, tasks[j].cmdp)
    return D


class TaskSampler:
    """Base task distribution.

    Subclasses implement :meth:`draw`. ``monotone_parameter`` marks families
    whose constraint value is monotone in ``Task.index`` (larger index is
    harder); :meth:`worst_case` may return the hardest member of the support.
    ``line_slope`` is set by families whose distance is ``slope * |index gap|``,
    which lets covers skip the dense distance matrix.
    """

    monotone_parameter = False
    line_slope: float | None = None

    def draw(self, rng: np.random.Generator) -> Task:
        raise NotImplementedError

    def draw_many(self, n: int, rng: np.random.Generator) -> list[Task]:
        return [self.draw(rng) for _ in range(n)]

    def pairwise_distances(self, tasks: Sequence[Task]) -> np.ndarray:
        return distance_matrix(tasks)

    def worst_case(self) -> Task | None:
        return None

    def true_optimum(self, task: Task) -> OracleOutcome:
        return oracle_optimal(task.cmdp)

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


class FiniteSampler(TaskSampler):
    """Discrete distribution over a fixed list of CMDPs; the task index is the list position."""

    def __init__(self, cmdps: Sequence[TabularCmdp], weights: Sequence[float] | None = None):
        self.tasks = [Task(i, m) for i, m in enumerate(cmdps)]
        w = np.ones(len(cmdps)) if weights is None else np.asarray(weights, float)
        self.weights = w / w.sum()
        self._D = distance_matrix(self.tasks)

    def draw(self, rng: np.random.Generator) -> Task:
        return self.tasks[int(rng.choice(len(self.tasks), p=self.weights))]

    def draw_many(self, n: int, rng: np.random.Generator) -> list[Task]:
        return [self.tasks[i] for i in rng.choice(len(self.tasks), size=n, p=self.weights)]

    def pairwise_distances(self, tasks: Sequence[Task]) -> np.ndarray:
        idx = np.array([t.index for t in tasks], dtype=int)
        return self._D[np.ix_(idx, idx)]

    def describe(self) -> dict:
        return {"kind": "finite", "n": len(self.tasks), "weights": self.weights.tolist()}
