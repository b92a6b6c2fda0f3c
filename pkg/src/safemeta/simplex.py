"""Dense two-phase revised simplex for small linear programs.

Solves  max c.x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  x >= 0.

Every iteration re-solves with the current basis matrix instead of updating a
tableau, so round-off does not accumulate; with at most a few hundred rows
that costs little. Occupancy-measure LPs are massively degenerate (the start
distribution is often a point mass), so both phases run on a right-hand side
nudged by a fixed tiny perturbation; the reported solution is recomputed from
the final basis with the exact right-hand side. Pricing is Dantzig with a
Harris ratio test, falling back to Bland's rule after a run of degenerate
pivots.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

PIVOT_TOL = 1e-7
HARRIS_TOL = 1e-9
PRICE_TOL = 1e-9
FEAS_TOL = 1e-9
DEGENERATE_RUN = 10
PERTURB = 1e-7


class InfeasibleLP(Exception):
    pass


class UnboundedLP(Exception):
    pass


class IllConditionedLP(Warning):
    pass


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    duals: np.ndarray          # multipliers for the (eq rows, ub rows)
    optimality_gap: float      # dual infeasibility scaled by primal mass, ~0 at optimum
    primal_residual: float
    iterations: int
    basis_condition: float


def _minimise(A, b, cost, basis, allowed, max_iter) -> int:
    """Primal simplex from a feasible basis; mutates ``basis`` in place."""
    degenerate = 0
    for it in range(max_iter):
        Bm = A[:, basis]
        xb = np.linalg.solve(Bm, b)
        y = np.linalg.solve(Bm.T, cost[basis])
        d = cost - A.T @ y
        d[basis] = 0.0
        cand = np.flatnonzero(allowed & (d < -PRICE_TOL))
        if cand.size == 0:
            return it
        bland = degenerate >= DEGENERATE_RUN
        j = int(cand[0]) if bland else int(cand[np.argmin(d[cand])])
        w = np.linalg.solve(Bm, A[:, j])
        pos = np.flatnonzero(w > PIVOT_TOL)
        if pos.size == 0:
            raise UnboundedLP(f"objective unbounded along column {j}")
        xpos = np.clip(xb[pos], 0.0, None)
        ratios = xpos / w[pos]
        step = ratios.min()
        if bland:
            ties = pos[ratios <= step + 1e-12]
            leave = int(min(ties, key=lambda i: basis[i]))
        else:
            # Harris two-pass test: among near-minimal ratios take the largest pivot
            bound = ((xpos + HARRIS_TOL) / w[pos]).min()
            ties = pos[ratios <= bound]
            leave = int(ties[np.argmax(w[ties])])
            step = xpos[np.searchsorted(pos, leave)] / w[leave]
        degenerate = degenerate + 1 if step <= 1e-12 else 0
        basis[leave] = j
    raise RuntimeError(f"simplex did not converge in {max_iter} pivots")


def linprog_max(c, A_eq=None, b_eq=None, A_ub=None, b_ub=None, max_iter: int = 20_000) -> LPResult:
    c = np.asarray(c, dtype=float)
    n = c.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).ravel()
    m_eq, m_ub = len(b_eq), len(b_ub)
    m = m_eq + m_ub

    # standard form: [A_eq 0; A_ub I] [x; s] = b, minimise -c.x, rows flipped so b >= 0
    A = np.zeros((m, n + m_ub))
    A[:m_eq, :n] = A_eq
    A[m_eq:, :n] = A_ub
    A[m_eq:, n:] = np.eye(m_ub)
    b = np.concatenate([b_eq, b_ub])
    sign = np.where(b < 0, -1.0, 1.0)
    A *= sign[:, None]
    b = b * sign
    cost = np.concatenate([-c, np.zeros(m_ub)])
    # identical columns (same coefficients and cost) can enter the basis together
    # and make it singular; keep the first of each group
    _, keep = np.unique(np.vstack([A, cost]).T, axis=0, return_index=True)
    keep = np.sort(keep)
    A_full, A, cost = A, A[:, keep], cost[keep]
    N = A.shape[1]

    # phase 1: one artificial per row
    A1 = np.hstack([A, np.eye(m)])
    cost1 = np.concatenate([np.zeros(N), np.ones(m)])
    basis = list(range(N, N + m))
    # a small fixed perturbation of b breaks the massive degeneracy of flow LPs
    bp = b + PERTURB * (1.0 + np.abs(b)) * np.random.default_rng(0).uniform(0.5, 1.0, m)
    iters = _minimise(A1, bp, cost1, basis, np.ones(N + m, dtype=bool), max_iter)
    infeas = float(cost1[basis] @ np.linalg.solve(A1[:, basis], b))
    if infeas > FEAS_TOL * max(1.0, float(np.abs(b).max(initial=0.0))):
        raise InfeasibleLP(f"phase-1 infeasibility {infeas:.3g}")

    # swap zero-level artificials for structural columns; rows where none fits are redundant
    rows = list(range(m))
    for pos in range(m):
        if basis[pos] < N:
            continue
        binv_row = np.linalg.solve(A1[:, basis].T, np.eye(m)[pos])
        entries = binv_row @ A
        entries[[j for j in basis if j < N]] = 0.0
        j = int(np.argmax(np.abs(entries)))
        if abs(entries[j]) > 1e-7:
            basis[pos] = j
        else:
            rows.remove(basis[pos] - N)
    A2, b2, bp2 = A[rows], b[rows], bp[rows]
    basis = [j for j in basis if j < N]

    # phase 2
    iters += _minimise(A2, bp2, cost, basis, np.ones(N, dtype=bool), max_iter)

    B = A2[:, basis]
    cond = float(np.linalg.cond(B))
    if cond > 1e12:
        warnings.warn(f"optimal basis is ill-conditioned (cond {cond:.2e})", IllConditionedLP)
    zk = np.zeros(N)
    zk[basis] = np.clip(np.linalg.solve(B, b2), 0.0, None)
    y_rows = np.linalg.solve(B.T, cost[basis])
    reduced = cost - A2.T @ y_rows
    gap = max(0.0, -float(reduced.min())) * max(float(zk.sum()), 1.0)
    y = np.zeros(m)
    y[rows] = y_rows
    z = np.zeros(A_full.shape[1])
    z[keep] = zk
    return LPResult(
        x=z[:n],
        objective=float(c @ z[:n]),
        duals=-(y * sign),
        optimality_gap=gap,
        primal_residual=float(np.abs(A_full @ z - b).max(initial=0.0)),
        iterations=iters,
        basis_condition=cond,
    )
