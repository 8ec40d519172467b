"""Economic dispatch primal/dual data, objectives, duality gaps and feasibility checks.

Primal::

    min  c'pg + M e'xi
    s.t. H_g pg - pf = H_d pd            [pi]
         e'pg = e'pd                      [lambda]
         p_lower <= pg <= p_upper         [z_lower, z_upper]
         f_lower - xi <= pf <= f_upper + xi  [mu_lower, mu_upper]
         xi >= 0                          [y]

with ``H_g = Phi A_g`` and ``H_d = Phi A_d``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

from .grid import Grid, PTDFModel, compute_ptdf

DEFAULT_TOL = 1e-9


class GapError(ValueError):
    """A normalized gap was requested with a nonpositive denominator."""


class DimensionError(ValueError):
    pass


class InfeasibleBalanceError(ValueError):
    """Total demand lies outside the aggregate generation bounds."""


@dataclass(frozen=True, eq=False)
class DispatchModel:
    """A grid bound to its PTDF, with the dense matrices the dispatch problem uses."""

    grid: Grid
    ptdf: PTDFModel

    @classmethod
    def from_grid(cls, grid: Grid) -> "DispatchModel":
        return cls(grid, compute_ptdf(grid))

    @cached_property
    def h_g(self) -> np.ndarray:
        return self.ptdf.phi @ self.ptdf.a_g

    @cached_property
    def h_d(self) -> np.ndarray:
        return self.ptdf.phi @ self.ptdf.a_d

    @cached_property
    def cost(self) -> np.ndarray:
        return self.grid.cost

    @cached_property
    def p_lower(self) -> np.ndarray:
        return self.grid.p_lower

    @cached_property
    def p_upper(self) -> np.ndarray:
        return self.grid.p_upper

    @cached_property
    def f_lower(self) -> np.ndarray:
        return self.grid.f_lower

    @cached_property
    def f_upper(self) -> np.ndarray:
        return self.grid.f_upper

    @property
    def penalty(self) -> float:
        return self.grid.penalty

    @property
    def n_gen(self) -> int:
        return self.grid.n_generators

    @property
    def n_branch(self) -> int:
        return self.grid.n_branches

    @property
    def n_load(self) -> int:
        return self.grid.n_loads

    def instance(self, pd) -> "EDInstance":
        return EDInstance(self, np.asarray(pd, dtype=float))


@dataclass(frozen=True, eq=False)
class EDInstance:
    model: DispatchModel
    pd: np.ndarray

    def __post_init__(self):
        pd = np.array(self.pd, dtype=float)
        pd.flags.writeable = False
        if pd.shape != (self.model.n_load,):
            raise DimensionError(f"pd has shape {pd.shape}, expected ({self.model.n_load},)")
        if np.any(pd < 0):
            raise ValueError("demand must be nonnegative")
        check_balance(self.model, pd)
        object.__setattr__(self, "pd", pd)

    @classmethod
    def unchecked(cls, model: DispatchModel, pd) -> "EDInstance":
        """Build an instance without validating it (solvers re-check feasibility)."""
        inst = object.__new__(cls)
        object.__setattr__(inst, "model", model)
        pd = np.array(pd, dtype=float)
        pd.flags.writeable = False
        object.__setattr__(inst, "pd", pd)
        return inst

    @property
    def grid(self) -> Grid:
        return self.model.grid

    @property
    def total_demand(self) -> float:
        return float(self.pd.sum())

    @property
    def scale(self) -> float:
        return max(1.0, self.total_demand)


def check_balance(model: DispatchModel, pd: np.ndarray) -> None:
    total = float(np.sum(pd))
    lo, hi = float(model.p_lower.sum()), float(model.p_upper.sum())
    if total < lo - 1e-9 * max(1.0, lo) or total > hi + 1e-9 * max(1.0, hi):
        raise InfeasibleBalanceError(
            f"infeasible balance: total demand {total:.6g} outside [{lo:.6g}, {hi:.6g}]"
        )


def _as_dict(point) -> dict[str, Any]:
    out = {}
    for f in fields(point):
        v = getattr(point, f.name)
        out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
    return out


@dataclass
class PrimalPoint:
    pg: np.ndarray
    pf: np.ndarray
    xi: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        return _as_dict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "PrimalPoint":
        return cls(**{k: np.asarray(doc[k], dtype=float) for k in ("pg", "pf", "xi")})


@dataclass
class DualPoint:
    lam: float
    pi: np.ndarray
    mu_lower: np.ndarray
    mu_upper: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    y: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        doc = _as_dict(self)
        doc["lambda"] = float(doc.pop("lam"))
        return doc

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "DualPoint":
        arrays = {
            k: np.asarray(doc[k], dtype=float)
            for k in ("pi", "mu_lower", "mu_upper", "z_lower", "z_upper", "y")
        }
        return cls(lam=float(doc["lambda"]), **arrays)


def save_point(point, path) -> None:
    Path(path).write_text(json.dumps(point.to_dict()) + "\n")


def load_point(cls, path):
    return cls.from_dict(json.loads(Path(path).read_text()))


def _check_len(name: str, arr: np.ndarray, n: int) -> None:
    if np.shape(arr) != (n,):
        raise DimensionError(f"{name} has shape {np.shape(arr)}, expected ({n},)")


def _check_primal_dims(inst: EDInstance, x: PrimalPoint) -> None:
    m = inst.model
    _check_len("pg", x.pg, m.n_gen)
    _check_len("pf", x.pf, m.n_branch)
    _check_len("xi", x.xi, m.n_branch)


def _check_dual_dims(inst: EDInstance, y: DualPoint) -> None:
    m = inst.model
    if np.ndim(y.lam) != 0:
        raise DimensionError("lambda must be a scalar")
    for name in ("pi", "mu_lower", "mu_upper", "y"):
        _check_len(name, getattr(y, name), m.n_branch)
    for name in ("z_lower", "z_upper"):
        _check_len(name, getattr(y, name), m.n_gen)


def primal_objective(inst: EDInstance, x: PrimalPoint) -> float:
    _check_primal_dims(inst, x)
    return float(inst.model.cost @ x.pg + inst.model.penalty * np.sum(x.xi))


def dual_objective(inst: EDInstance, y: DualPoint) -> float:
    _check_dual_dims(inst, y)
    m = inst.model
    return float(
        y.lam * inst.pd.sum()
        + (m.h_d @ inst.pd) @ y.pi
        + m.f_lower @ y.mu_lower
        - m.f_upper @ y.mu_upper
        + m.p_lower @ y.z_lower
        - m.p_upper @ y.z_upper
    )


def gap_from_objectives(phi: float, psi: float) -> float:
    return phi - psi


def normalized_from_objectives(phi: float, psi: float) -> float:
    if not psi > 0:
        raise GapError(f"denominator not positive (dual objective {psi!r})")
    return (phi - psi) / psi


def midpoint_from_objectives(phi: float, psi: float) -> float:
    mid = 0.5 * (phi + psi)
    if not mid > 0:
        raise GapError(f"denominator not positive (midpoint {mid!r})")
    return (phi - psi) / mid


def duality_gap(inst: EDInstance, x: PrimalPoint, y: DualPoint) -> float:
    return gap_from_objectives(primal_objective(inst, x), dual_objective(inst, y))


def normalized_gap(inst: EDInstance, x: PrimalPoint, y: DualPoint) -> float:
    """Duality gap relative to the dual objective.

    Upper-bounds the relative suboptimality of both ``x`` and ``y`` when the pair is
    feasible. Raises :class:`GapError` when the dual objective is not positive.
    """
    return normalized_from_objectives(primal_objective(inst, x), dual_objective(inst, y))


def midpoint_gap(inst: EDInstance, x: PrimalPoint, y: DualPoint) -> float:
    return midpoint_from_objectives(primal_objective(inst, x), dual_objective(inst, y))


def hinge_gap(gap, eps: float):
    """``max(gap - eps, 0)``; works elementwise on arrays."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    out = np.maximum(np.asarray(gap, dtype=float) - eps, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class Verdict:
    ok: bool
    residuals: dict[str, float] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def _bound_violations(label, values, lower, upper, tol, out):
    for i in np.flatnonzero(values < lower - tol):
        out.append(f"{label} {i} below lower bound by {lower[i] - values[i]:.3e}")
    for i in np.flatnonzero(values > upper + tol):
        out.append(f"{label} {i} above upper bound by {values[i] - upper[i]:.3e}")


def check_primal_feasible(inst: EDInstance, x: PrimalPoint, tol: float = DEFAULT_TOL) -> Verdict:
    """Residuals of every primal constraint; ``tol`` is scaled by ``max(1, e'pd)``."""
    m = inst.model
    try:
        _check_primal_dims(inst, x)
    except DimensionError as exc:
        return Verdict(False, {}, [str(exc)])
    t = tol * inst.scale
    flow_res = m.h_g @ x.pg - x.pf - m.h_d @ inst.pd
    balance = float(x.pg.sum() - inst.pd.sum())
    over = np.maximum(x.pf - m.f_upper - x.xi, 0.0)
    under = np.maximum(m.f_lower - x.xi - x.pf, 0.0)
    residuals = {
        "flow_definition": float(np.max(np.abs(flow_res), initial=0.0)),
        "power_balance": abs(balance),
        "generator_lower": float(np.max(m.p_lower - x.pg, initial=0.0)),
        "generator_upper": float(np.max(x.pg - m.p_upper, initial=0.0)),
        "flow_upper": float(np.max(over, initial=0.0)),
        "flow_lower": float(np.max(under, initial=0.0)),
        "overflow_sign": float(np.max(-x.xi, initial=0.0)),
    }
    violations: list[str] = []
    for e in np.flatnonzero(np.abs(flow_res) > t):
        violations.append(f"flow_definition on branch {e}: residual {flow_res[e]:.3e}")
    if abs(balance) > t:
        violations.append(f"power_balance: residual {balance:.3e}")
    _bound_violations("generator", x.pg, m.p_lower, m.p_upper, t, violations)
    for e in np.flatnonzero(over > t):
        violations.append(f"flow_upper on branch {e}: excess {over[e]:.3e}")
    for e in np.flatnonzero(under > t):
        violations.append(f"flow_lower on branch {e}: excess {under[e]:.3e}")
    for e in np.flatnonzero(x.xi < -t):
        violations.append(f"overflow_sign on branch {e}: {x.xi[e]:.3e}")
    return Verdict(not violations, residuals, violations)


def check_dual_feasible(inst: EDInstance, y: DualPoint, tol: float = DEFAULT_TOL) -> Verdict:
    m = inst.model
    try:
        _check_dual_dims(inst, y)
    except DimensionError as exc:
        return Verdict(False, {}, [str(exc)])
    stat_g = y.lam + m.h_g.T @ y.pi + y.z_lower - y.z_upper - m.cost
    stat_f = -y.pi + y.mu_lower - y.mu_upper
    stat_xi = y.mu_lower + y.mu_upper + y.y - m.penalty
    residuals = {
        "generator_stationarity": float(np.max(np.abs(stat_g), initial=0.0)),
        "flow_stationarity": float(np.max(np.abs(stat_f), initial=0.0)),
        "overflow_stationarity": float(np.max(np.abs(stat_xi), initial=0.0)),
    }
    violations: list[str] = []
    for name, res in (("generator_stationarity", stat_g), ("flow_stationarity", stat_f),
                      ("overflow_stationarity", stat_xi)):
        for i in np.flatnonzero(np.abs(res) > tol):
            violations.append(f"{name} at {i}: residual {res[i]:.3e}")
    for name in ("mu_lower", "mu_upper", "z_lower", "z_upper", "y"):
        v = np.asarray(getattr(y, name))
        residuals[f"{name}_sign"] = float(np.max(-v, initial=0.0))
        for i in np.flatnonzero(v < -tol):
            violations.append(f"{name} at {i} negative: {v[i]:.3e}")
    return Verdict(not violations, residuals, violations)


def recover_flows(model: DispatchModel, pg: np.ndarray, pd: np.ndarray):
    """Flows implied by a dispatch, and the minimal overflows they require."""
    pf = pg @ model.h_g.T - pd @ model.h_d.T
    xi = np.maximum(np.maximum(pf - model.f_upper, 0.0), np.maximum(model.f_lower - pf, 0.0))
    return pf, xi
