"""Exact reference solver for the dispatch LP.

A dense two-phase revised simplex with native variable bounds, and the lazy
thermal-limit loop built on top of it. Flow rows are written with the flow split
as ``pf = w + xi_plus - xi_minus`` where ``w`` carries the thermal bounds, so every
variable of the model is a plain bounded column.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .ed_model import (
    DualPoint,
    EDInstance,
    InfeasibleBalanceError,
    PrimalPoint,
    check_balance,
    recover_flows,
)

PIVOT_TOL = 1e-9
OPTIMALITY_TOL = 1e-9
REFACTOR_EVERY = 100

_AT_LOWER, _AT_UPPER, _FREE, _BASIC = 1, 2, 3, 0

_calls = 0


def call_count() -> int:
    """Number of simplex runs performed by this process (used to prove label-freedom)."""
    return _calls


class SolverError(RuntimeError):
    pass


class InfeasibleError(SolverError):
    pass


class UnboundedError(SolverError):
    pass


class NumericalError(SolverError):
    pass


@dataclass
class SimplexResult:
    x: np.ndarray
    row_duals: np.ndarray
    reduced_costs: np.ndarray
    objective: float
    iterations: int
    basis: np.ndarray


class _Tableau:
    """Working state of one simplex run: basis, its inverse and variable values."""

    def __init__(self, A, b, lower, upper):
        self.A = A
        self.b = b
        self.lower = lower
        self.upper = upper
        m, n = A.shape
        self.m, self.n = m, n
        self.state = np.empty(n, dtype=np.int8)
        self.x = np.zeros(n)
        self.basis = np.empty(m, dtype=np.int_)
        self.Binv = np.eye(m)
        self.pivots_since_refactor = 0

    def refactor(self):
        B = self.A[:, self.basis]
        try:
            self.Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular basis") from exc
        nonbasic = self.state != _BASIC
        rhs = self.b - self.A[:, nonbasic] @ self.x[nonbasic]
        self.x[self.basis] = self.Binv @ rhs
        self.pivots_since_refactor = 0

    def iterate(self, cost, max_iter, it0=0):
        """Run primal simplex iterations until optimal for ``cost``; returns iteration count."""
        m, n = self.m, self.n
        degenerate_limit = 10 * (m + n)
        degenerate_run = 0
        bland = False
        fixed = self.upper - self.lower <= 0.0
        it = it0
        self.refactor()
        while True:
            if self.pivots_since_refactor >= REFACTOR_EVERY:
                self.refactor()
            duals = cost[self.basis] @ self.Binv
            d = cost - duals @ self.A
            st = self.state
            eligible = (
                ((st == _AT_LOWER) & (d < -OPTIMALITY_TOL))
                | ((st == _AT_UPPER) & (d > OPTIMALITY_TOL))
                | ((st == _FREE) & (np.abs(d) > OPTIMALITY_TOL))
            ) & ~fixed
            candidates = np.flatnonzero(eligible)
            if candidates.size == 0:
                return it
            if it >= max_iter:
                raise NumericalError(f"iteration limit {max_iter} reached")
            it += 1
            if bland:
                q = int(candidates[0])
            else:
                q = int(candidates[np.argmax(np.abs(d[candidates]))])
            direction = 1.0 if d[q] < 0 else -1.0
            alpha = self.Binv @ self.A[:, q]
            delta = -direction * alpha
            flip = self.upper[q] - self.lower[q]
            if not np.isfinite(flip):
                flip = np.inf
            step, row, to_upper = kernels.ratio_test(
                self.x[self.basis], delta, self.lower[self.basis], self.upper[self.basis],
                PIVOT_TOL, flip, bland, self.basis,
            )
            if not np.isfinite(step):
                raise UnboundedError("objective unbounded below")
            self.x[q] += direction * step
            self.x[self.basis] += step * delta
            if row < 0:
                self.state[q] = _AT_UPPER if direction > 0 else _AT_LOWER
                self.x[q] = self.upper[q] if direction > 0 else self.lower[q]
            else:
                leaving = self.basis[row]
                self.x[leaving] = self.upper[leaving] if to_upper else self.lower[leaving]
                self.state[leaving] = _AT_UPPER if to_upper else _AT_LOWER
                self.state[q] = _BASIC
                self.basis[row] = q
                piv = alpha[row]
                if abs(piv) < PIVOT_TOL:
                    raise NumericalError("pivot element below tolerance")
                prow = self.Binv[row] / piv
                self.Binv -= np.outer(alpha, prow)
                self.Binv[row] = prow
                self.pivots_since_refactor += 1
            if step <= 1e-12:
                degenerate_run += 1
                if degenerate_run > degenerate_limit:
                    bland = True
            else:
                degenerate_run = 0


def bounded_simplex(c, A, b, lower, upper, *, max_iter: int | None = None) -> SimplexResult:
    """Solve ``min c'x  s.t.  A x = b,  lower <= x <= upper``.

    Two phases: artificial columns on every equality row are driven to zero first,
    then the true objective is minimized. Row duals follow the convention
    ``reduced_costs = c - A' row_duals``.
    """
    global _calls
    _calls += 1
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    m, n = A.shape
    if np.any(lower > upper):
        raise InfeasibleError("inconsistent variable bounds")
    if max_iter is None:
        max_iter = 50 * (m + n) + 1000

    start = np.where(np.isfinite(lower), lower, np.where(np.isfinite(upper), upper, 0.0))
    residual = b - A @ start
    signs = np.where(residual >= 0, 1.0, -1.0)
    A1 = np.hstack([A, np.diag(signs)])
    lo1 = np.concatenate([lower, np.zeros(m)])
    up1 = np.concatenate([upper, np.full(m, np.inf)])
    tab = _Tableau(A1, b, lo1, up1)
    tab.x[:n] = start
    tab.state[:n] = np.where(
        np.isfinite(lower), _AT_LOWER, np.where(np.isfinite(upper), _AT_UPPER, _FREE)
    )
    tab.state[n:] = _BASIC
    tab.basis[:] = np.arange(n, n + m)

    phase1_cost = np.concatenate([np.zeros(n), np.ones(m)])
    iterations = tab.iterate(phase1_cost, max_iter)
    infeas = float(tab.x[n:].sum())
    if infeas > 1e-7 * max(1.0, float(np.max(np.abs(b), initial=0.0))):
        raise InfeasibleError(f"no feasible point (phase-one residual {infeas:.3e})")

    # artificials are pinned at zero for phase two; try to pivot them out of the basis
    tab.upper[n:] = 0.0
    tab.x[n:] = 0.0
    tab.state[n:][tab.state[n:] != _BASIC] = _AT_LOWER
    for row in range(m):
        if tab.basis[row] < n:
            continue
        alpha_row = tab.Binv[row] @ A1[:, :n]
        alpha_row[tab.state[:n] == _BASIC] = 0.0
        j = int(np.argmax(np.abs(alpha_row)))
        if abs(alpha_row[j]) <= 1e-7:
            continue  # redundant row; artificial stays basic at zero
        leaving = tab.basis[row]
        tab.state[leaving] = _AT_LOWER
        tab.state[j] = _BASIC
        tab.basis[row] = j
        tab.refactor()

    phase2_cost = np.concatenate([c, np.zeros(m)])
    iterations = tab.iterate(phase2_cost, max_iter, iterations)
    tab.refactor()
    duals = phase2_cost[tab.basis] @ tab.Binv
    reduced = phase2_cost - duals @ A1
    x = tab.x[:n].copy()
    return SimplexResult(
        x=x,
        row_duals=duals,
        reduced_costs=reduced[:n],
        objective=float(c @ x),
        iterations=iterations,
        basis=tab.basis.copy(),
    )


@dataclass
class LPSolveResult:
    primal: PrimalPoint
    dual: DualPoint
    objective: float
    iterations: int
    lazy_rounds: int
    activated_branches: list[int] = field(default_factory=list)
    wall_time: float = 0.0


def _build_restricted(inst: EDInstance, branches: list[int]):
    """Matrices of the dispatch LP keeping only the flow rows in ``branches``."""
    m = inst.model
    G, k = m.n_gen, len(branches)
    M = m.penalty
    n = G + 3 * k
    A = np.zeros((k + 1, n))
    b = np.zeros(k + 1)
    hd_pd = m.h_d @ inst.pd
    for r, e in enumerate(branches):
        A[r, :G] = m.h_g[e]
        A[r, G + r] = -1.0            # w_e, within thermal limits
        A[r, G + k + r] = -1.0        # positive overflow
        A[r, G + 2 * k + r] = 1.0     # negative overflow
        b[r] = hd_pd[e]
    A[k, :G] = 1.0
    b[k] = inst.pd.sum()
    idx = np.asarray(branches, dtype=int)
    c = np.concatenate([m.cost, np.zeros(k), np.full(2 * k, M)])
    lower = np.concatenate([m.p_lower, m.f_lower[idx], np.zeros(2 * k)])
    upper = np.concatenate([m.p_upper, m.f_upper[idx], np.full(2 * k, np.inf)])
    return c, A, b, lower, upper


def complete_dual(inst: EDInstance, lam: float, pi: np.ndarray) -> DualPoint:
    """Dual point from the balance and flow-row multipliers; bound duals by sign split."""
    m = inst.model
    d = m.cost - lam - m.h_g.T @ pi
    mu_lower = np.maximum(pi, 0.0)
    mu_upper = np.maximum(-pi, 0.0)
    return DualPoint(
        lam=float(lam),
        pi=pi,
        mu_lower=mu_lower,
        mu_upper=mu_upper,
        z_lower=np.maximum(d, 0.0),
        z_upper=np.maximum(-d, 0.0),
        y=m.penalty - mu_lower - mu_upper,
    )


def _solve_restricted(inst: EDInstance, branches: list[int]):
    c, A, b, lower, upper = _build_restricted(inst, branches)
    t0 = time.perf_counter()
    res = bounded_simplex(c, A, b, lower, upper)
    elapsed = time.perf_counter() - t0
    m = inst.model
    pg = np.clip(res.x[: m.n_gen], m.p_lower, m.p_upper)
    pi = np.zeros(m.n_branch)
    pi[np.asarray(branches, dtype=int)] = res.row_duals[: len(branches)]
    lam = float(res.row_duals[len(branches)])
    return pg, lam, pi, res, elapsed


def _check_instance(inst: EDInstance) -> None:
    try:
        check_balance(inst.model, inst.pd)
    except InfeasibleBalanceError as exc:
        raise InfeasibleError(str(exc)) from exc


def solve_ed_full(inst: EDInstance) -> LPSolveResult:
    """Solve the dispatch LP with every thermal-limit row present."""
    _check_instance(inst)
    branches = list(range(inst.model.n_branch))
    pg, lam, pi, res, elapsed = _solve_restricted(inst, branches)
    pf, xi = recover_flows(inst.model, pg, inst.pd)
    return LPSolveResult(
        primal=PrimalPoint(pg, pf, xi),
        dual=complete_dual(inst, lam, pi),
        objective=res.objective,
        iterations=res.iterations,
        lazy_rounds=1,
        activated_branches=branches,
        wall_time=elapsed,
    )


def solve_ed_lazy(inst: EDInstance, *, trace: list | None = None) -> LPSolveResult:
    """Lazy thermal-limit loop.

    Starts with no flow rows; after each solve, flows are recovered from the dispatch
    and every overloaded branch not yet modelled is added. Stops when a round adds
    nothing. ``trace``, if given, receives the activated set after each round.
    """
    _check_instance(inst)
    model = inst.model
    active: list[int] = []
    rounds = 0
    iterations = 0
    elapsed = 0.0
    while True:
        rounds += 1
        pg, lam, pi, res, dt = _solve_restricted(inst, active)
        iterations += res.iterations
        elapsed += dt
        pf, xi = recover_flows(model, pg, inst.pd)
        added = [e for e in np.flatnonzero(xi > 0).tolist() if e not in active]
        if trace is not None:
            trace.append(sorted(active))
        if not added:
            break
        active.extend(added)
    return LPSolveResult(
        primal=PrimalPoint(pg, pf, xi),
        dual=complete_dual(inst, lam, pi),
        objective=res.objective,
        iterations=iterations,
        lazy_rounds=rounds,
        activated_branches=sorted(active),
        wall_time=elapsed,
    )
