from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import linprog

from safemeta.planner import occupancy_lp
from safemeta.simplex import InfeasibleLP, UnboundedLP, linprog_max

from conftest import random_cmdp


def test_textbook_lp():
    # max 3x + 5y  s.t. x <= 4, 2y <= 12, 3x + 2y <= 18
    res = linprog_max([3, 5], A_ub=[[1, 0], [0, 2], [3, 2]], b_ub=[4, 12, 18])
    assert res.objective == pytest.approx(36.0)
    assert np.allclose(res.x, [2, 6])
    assert res.optimality_gap < 1e-9


def test_equality_and_negative_rhs():
    # max x + y  s.t. x + y = 1, -x <= -0.25
    res = linprog_max([1, 1], A_eq=[[1, 1]], b_eq=[1], A_ub=[[-1, 0]], b_ub=[-0.25])
    assert res.objective == pytest.approx(1.0)
    assert res.x[0] >= 0.25 - 1e-12


def test_infeasible():
    with pytest.raises(InfeasibleLP):
        linprog_max([1, 0], A_eq=[[1, 1]], b_eq=[1], A_ub=[[1, 1]], b_ub=[0.5])


def test_unbounded():
    with pytest.raises(UnboundedLP):
        linprog_max([1, 0], A_ub=[[-1, 1]], b_ub=[1])


def test_redundant_rows():
    res = linprog_max([1, 2], A_eq=[[1, 1], [2, 2]], b_eq=[1, 2])
    assert res.objective == pytest.approx(2.0)


def test_duplicate_columns_keep_full_solution():
    res = linprog_max([1, 1, 0], A_eq=[[1, 1, 1]], b_eq=[2])
    assert res.objective == pytest.approx(2.0)
    assert res.x.shape == (3,) and res.x.sum() == pytest.approx(2.0)


def test_matches_highs_on_random_cmdp_lps():
    rng = np.random.default_rng(0)
    n_infeasible = 0
    for _ in range(150):
        S, A = int(rng.integers(2, 6)), int(rng.integers(2, 4))
        M = random_cmdp(rng, S, A)
        A_eq, rho = occupancy_lp(M)
        thr = rng.uniform(-2, 2)
        ref = linprog(-M.r.ravel(), A_ub=[-M.c.ravel()], b_ub=[-thr], A_eq=A_eq, b_eq=rho, method="highs")
        if ref.status == 2:
            n_infeasible += 1
            with pytest.raises(InfeasibleLP):
                linprog_max(M.r.ravel(), A_eq, rho, [-M.c.ravel()], [-thr])
            continue
        res = linprog_max(M.r.ravel(), A_eq, rho, [-M.c.ravel()], [-thr])
        assert res.objective == pytest.approx(-ref.fun, abs=1e-8)
        assert res.primal_residual < 1e-9
    assert 0 < n_infeasible < 150
