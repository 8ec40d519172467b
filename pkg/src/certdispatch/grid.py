"""Network case files and DC power-flow sensitivities (PTDF).

A case is a single JSON object::

    {
      "buses": [1, 2],
      "branches": [{"from_bus": 1, "to_bus": 2, "x": 1.0,
                    "f_lower": -6.0, "f_upper": 6.0}],
      "generators": [{"bus": 1, "cost": 1.0, "p_lower": 0.0, "p_upper": 10.0}],
      "loads": [{"bus": 2, "pd_ref": 15.0}],
      "slack": 1,
      "penalty_M": 150000.0
    }

Units: reactance in p.u., flows and powers in MW, costs in $/MWh.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Union

import numpy as np

DEFAULT_PENALTY = 150_000.0

PathLike = Union[str, Path]


class CaseFormatError(ValueError):
    """Raised when a case document is malformed or violates a grid invariant."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    x: float
    f_lower: float
    f_upper: float


@dataclass(frozen=True)
class Generator:
    bus: int
    cost: float
    p_lower: float
    p_upper: float


@dataclass(frozen=True)
class Load:
    bus: int
    pd_ref: float


@dataclass(frozen=True)
class Grid:
    buses: tuple[int, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    slack: int
    penalty: float = DEFAULT_PENALTY
    name: str = ""

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    @property
    def n_loads(self) -> int:
        return len(self.loads)

    def bus_index(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.buses)}

    # vector views used throughout the numerical code
    @property
    def cost(self) -> np.ndarray:
        return np.array([g.cost for g in self.generators], dtype=float)

    @property
    def p_lower(self) -> np.ndarray:
        return np.array([g.p_lower for g in self.generators], dtype=float)

    @property
    def p_upper(self) -> np.ndarray:
        return np.array([g.p_upper for g in self.generators], dtype=float)

    @property
    def f_lower(self) -> np.ndarray:
        return np.array([b.f_lower for b in self.branches], dtype=float)

    @property
    def f_upper(self) -> np.ndarray:
        return np.array([b.f_upper for b in self.branches], dtype=float)

    @property
    def reactance(self) -> np.ndarray:
        return np.array([b.x for b in self.branches], dtype=float)

    @property
    def pd_ref(self) -> np.ndarray:
        return np.array([ld.pd_ref for ld in self.loads], dtype=float)

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {}
        if self.name:
            doc["name"] = self.name
        doc.update(
            buses=list(self.buses),
            branches=[
                {"from_bus": b.from_bus, "to_bus": b.to_bus, "x": b.x,
                 "f_lower": b.f_lower, "f_upper": b.f_upper}
                for b in self.branches
            ],
            generators=[
                {"bus": g.bus, "cost": g.cost, "p_lower": g.p_lower, "p_upper": g.p_upper}
                for g in self.generators
            ],
            loads=[{"bus": ld.bus, "pd_ref": ld.pd_ref} for ld in self.loads],
            slack=self.slack,
            penalty_M=self.penalty,
        )
        return doc


@dataclass(frozen=True)
class PTDFModel:
    """Branch-flow sensitivities and injection incidence matrices.

    ``phi`` is E x N, ``a_g`` is N x G and ``a_d`` is N x D.
    """

    phi: np.ndarray
    a_g: np.ndarray
    a_d: np.ndarray
    slack_index: int = field(default=0)

    def flows(self, injection: np.ndarray) -> np.ndarray:
        return self.phi @ injection


def _require(doc: dict, key: str, path: str) -> Any:
    if not isinstance(doc, dict):
        raise CaseFormatError(path, "expected an object")
    if key not in doc:
        raise CaseFormatError(f"{path}.{key}" if path else key, "missing required field")
    return doc[key]


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseFormatError(path, f"expected a number, got {value!r}")
    out = float(value)
    if math.isnan(out):
        raise CaseFormatError(path, "NaN is not allowed")
    return out


def _bus_id(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise CaseFormatError(path, f"expected an integer bus id, got {value!r}")
    return value


def _list(doc: dict, key: str) -> list:
    value = _require(doc, key, "")
    if not isinstance(value, list):
        raise CaseFormatError(key, "expected an array")
    return value


def grid_from_dict(doc: dict[str, Any]) -> Grid:
    """Build and validate a :class:`Grid` from a parsed case document."""
    if not isinstance(doc, dict):
        raise CaseFormatError("", "case document must be an object")

    buses = tuple(_bus_id(b, f"buses[{i}]") for i, b in enumerate(_list(doc, "buses")))
    if not buses:
        raise CaseFormatError("buses", "at least one bus is required")
    if len(set(buses)) != len(buses):
        raise CaseFormatError("buses", "duplicate bus identifier")
    known = set(buses)

    def check_bus(bus: int, path: str) -> int:
        if bus not in known:
            raise CaseFormatError(path, f"unknown bus {bus}")
        return bus

    branches = []
    for i, raw in enumerate(_list(doc, "branches")):
        p = f"branches[{i}]"
        fb = check_bus(_bus_id(_require(raw, "from_bus", p), f"{p}.from_bus"), f"{p}.from_bus")
        tb = check_bus(_bus_id(_require(raw, "to_bus", p), f"{p}.to_bus"), f"{p}.to_bus")
        x = _number(_require(raw, "x", p), f"{p}.x")
        lo = _number(_require(raw, "f_lower", p), f"{p}.f_lower")
        hi = _number(_require(raw, "f_upper", p), f"{p}.f_upper")
        if fb == tb:
            raise CaseFormatError(p, "self-loop branch")
        if x == 0.0 or not math.isfinite(x):
            raise CaseFormatError(f"{p}.x", "reactance must be finite and nonzero")
        if lo > hi:
            raise CaseFormatError(p, "inverted flow bounds")
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise CaseFormatError(p, "flow bounds must be finite")
        branches.append(Branch(fb, tb, x, lo, hi))

    generators = []
    for i, raw in enumerate(_list(doc, "generators")):
        p = f"generators[{i}]"
        bus = check_bus(_bus_id(_require(raw, "bus", p), f"{p}.bus"), f"{p}.bus")
        cost = _number(_require(raw, "cost", p), f"{p}.cost")
        lo = _number(_require(raw, "p_lower", p), f"{p}.p_lower")
        hi = _number(_require(raw, "p_upper", p), f"{p}.p_upper")
        if lo > hi:
            raise CaseFormatError(p, "inverted generator bounds")
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise CaseFormatError(p, "generator bounds must be finite")
        generators.append(Generator(bus, cost, lo, hi))
    if not generators:
        raise CaseFormatError("generators", "at least one generator is required")

    loads = []
    for i, raw in enumerate(_list(doc, "loads")):
        p = f"loads[{i}]"
        bus = check_bus(_bus_id(_require(raw, "bus", p), f"{p}.bus"), f"{p}.bus")
        pd = _number(_require(raw, "pd_ref", p), f"{p}.pd_ref")
        if pd < 0:
            raise CaseFormatError(f"{p}.pd_ref", "reference demand must be nonnegative")
        loads.append(Load(bus, pd))

    slack = check_bus(_bus_id(_require(doc, "slack", ""), "slack"), "slack")
    penalty = _number(_require(doc, "penalty_M", ""), "penalty_M")
    max_cost = max(abs(g.cost) for g in generators)
    if not penalty > max_cost:
        raise CaseFormatError("penalty_M", "penalty must exceed every generator cost")

    grid = Grid(
        buses=buses,
        branches=tuple(branches),
        generators=tuple(generators),
        loads=tuple(loads),
        slack=slack,
        penalty=penalty,
        name=str(doc.get("name", "")),
    )
    if not is_connected(grid):
        raise CaseFormatError("branches", "network graph is not connected")
    return grid


def is_connected(grid: Grid) -> bool:
    adj: dict[int, list[int]] = {b: [] for b in grid.buses}
    for br in grid.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    seen = {grid.slack}
    queue = deque([grid.slack])
    while queue:
        for nxt in adj[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(grid.buses)


def parse_case(path: PathLike) -> Grid:
    """Read and validate a JSON case file."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError("", f"malformed syntax: {exc}") from exc
    return grid_from_dict(doc)


def dump_case(grid: Grid, path: PathLike) -> None:
    Path(path).write_text(json.dumps(grid.to_dict(), indent=1) + "\n")


def load_case(name_or_path: PathLike) -> Grid:
    """Load a bundled case by name (``toy14``, ``two_bus``) or a case file by path."""
    candidate = Path(name_or_path)
    if candidate.suffix == ".json" or candidate.exists():
        return parse_case(candidate)
    bundled = resources.files("certdispatch.cases").joinpath(f"{name_or_path}.json")
    if not bundled.is_file():
        raise FileNotFoundError(f"no bundled case named {name_or_path!r}")
    return grid_from_dict(json.loads(bundled.read_text()))


def branch_incidence(grid: Grid) -> np.ndarray:
    """E x N matrix with +1 at the from-bus and -1 at the to-bus."""
    idx = grid.bus_index()
    C = np.zeros((grid.n_branches, grid.n_buses))
    for e, br in enumerate(grid.branches):
        C[e, idx[br.from_bus]] = 1.0
        C[e, idx[br.to_bus]] = -1.0
    return C


def susceptance_matrix(grid: Grid) -> np.ndarray:
    C = branch_incidence(grid)
    return C.T @ (C / grid.reactance[:, None])


def compute_ptdf(grid: Grid) -> PTDFModel:
    """DC power-flow PTDF with the slack bus absorbing the imbalance.

    Flows follow ``f_e = (theta_from - theta_to) / x_e``; the slack column is zero.
    """
    idx = grid.bus_index()
    s = idx[grid.slack]
    keep = np.array([i for i in range(grid.n_buses) if i != s], dtype=int)
    C = branch_incidence(grid)
    B = susceptance_matrix(grid)
    B_red = B[np.ix_(keep, keep)]
    # one factorization, E right-hand sides: phi_red^T = B_red^{-1} (diag(1/x) C_red)^T
    rhs = (C[:, keep] / grid.reactance[:, None]).T
    try:
        cond = np.linalg.cond(B_red) if keep.size else 1.0
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned")
        sol = np.linalg.solve(B_red, rhs) if keep.size else rhs
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular reduced susceptance matrix (disconnected network)") from exc
    phi = np.zeros((grid.n_branches, grid.n_buses))
    phi[:, keep] = sol.T

    a_g = np.zeros((grid.n_buses, grid.n_generators))
    for j, g in enumerate(grid.generators):
        a_g[idx[g.bus], j] = 1.0
    a_d = np.zeros((grid.n_buses, grid.n_loads))
    for j, ld in enumerate(grid.loads):
        a_d[idx[ld.bus], j] = 1.0
    for arr in (phi, a_g, a_d):
        arr.setflags(write=False)
    return PTDFModel(phi=phi, a_g=a_g, a_d=a_d, slack_index=s)
