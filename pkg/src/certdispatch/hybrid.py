"""Certified hybrid solving: accept proxy predictions whose duality-gap certificate
is within tolerance, fall back to the exact solver otherwise.

Batch timing follows an idealized parallel model: the exact solver's batch time is
the makespan bound ``max(sum(t) / workers, max(t))``; the hybrid batch time is the
proxy inference time plus the makespan of the fallback solves only.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ed_model import (
    DualPoint,
    EDInstance,
    PrimalPoint,
    dual_objective,
    primal_objective,
)
from .lp_solver import LPSolveResult, solve_ed_lazy
from .proxies import INFERENCE, DualProxy, PrimalProxy

DEFAULT_WORKERS = 24
PROXY, FALLBACK = "proxy", "fallback"
NORMALIZED, ABSOLUTE = "normalized", "absolute"


def makespan(times: Iterable[float], workers: int = DEFAULT_WORKERS) -> float:
    """Ideal parallel completion time ``max(sum(t) / workers, max(t))``; 0 for no tasks."""
    if workers < 1:
        raise ValueError("workers must be at least 1")
    t = np.asarray(list(times), dtype=float)
    if t.size == 0:
        return 0.0
    return float(max(t.sum() / workers, t.max()))


def speedup_from_times(inference_time: float, solve_times: Sequence[float],
                       fallback: Sequence[bool], workers: int = DEFAULT_WORKERS):
    """Returns ``(hybrid_time, baseline_time, speedup)``."""
    solve_times = np.asarray(solve_times, dtype=float)
    fallback = np.asarray(fallback, dtype=bool)
    hybrid = inference_time + makespan(solve_times[fallback], workers)
    baseline = makespan(solve_times, workers)
    speedup = baseline / hybrid if hybrid > 0 else math.inf
    return hybrid, baseline, speedup


@dataclass
class TimingModel:
    """Timing inputs for batch accounting.

    Unset fields are measured. ``solve_times`` (one per instance) and
    ``inference_time`` (whole batch) may be given to replace measurements.
    """

    workers: int = DEFAULT_WORKERS
    solve_times: Sequence[float] | None = None
    inference_time: float | None = None


@dataclass
class CertifiedSolution:
    primal: PrimalPoint
    dual: DualPoint
    gap: float
    norm_gap: float
    source: str
    epsilon: float
    proxy_time: float
    solver_time: float = 0.0
    certificate: float = math.inf   # the proxy pair's certificate that drove the decision


@dataclass
class _Predictions:
    primal: list[PrimalPoint]
    dual: list[DualPoint]
    phi: np.ndarray
    psi: np.ndarray
    certificate: np.ndarray
    elapsed: float


def _predict(pd: np.ndarray, primal: PrimalProxy, dual: DualProxy, gap_mode: str) -> _Predictions:
    t0 = time.perf_counter()
    pb = primal.predict_batch(pd, training=False)
    db = dual.predict_batch(pd, mode=INFERENCE, training=False)
    gap = pb.phi - db.psi
    if gap_mode == NORMALIZED:
        with np.errstate(divide="ignore", invalid="ignore"):
            cert = np.where(db.psi > 0, gap / db.psi, np.inf)
    elif gap_mode == ABSOLUTE:
        cert = gap
    else:
        raise ValueError(f"unknown gap mode {gap_mode!r}")
    elapsed = time.perf_counter() - t0
    n = pd.shape[0]
    return _Predictions(
        [pb.point(i) for i in range(n)], [db.point(i) for i in range(n)],
        pb.phi, db.psi, cert, elapsed,
    )


def _from_solver(inst: EDInstance, res: LPSolveResult, eps: float, proxy_time: float,
                 certificate: float) -> CertifiedSolution:
    phi = primal_objective(inst, res.primal)
    psi = dual_objective(inst, res.dual)
    norm = (phi - psi) / psi if psi > 0 else math.nan
    return CertifiedSolution(res.primal, res.dual, phi - psi, norm, FALLBACK, eps,
                             proxy_time, res.wall_time, certificate)


def certify_solve(inst: EDInstance, proxies: tuple[PrimalProxy, DualProxy], eps: float,
                  *, gap_mode: str = NORMALIZED) -> CertifiedSolution:
    """Predict, certify, and fall back to the lazy exact solver when the certificate
    exceeds ``eps`` (or cannot be computed)."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    primal, dual = proxies
    pred = _predict(inst.pd[None, :], primal, dual, gap_mode)
    cert = float(pred.certificate[0])
    if cert <= eps:
        gap = float(pred.phi[0] - pred.psi[0])
        norm = gap / float(pred.psi[0]) if pred.psi[0] > 0 else math.nan
        return CertifiedSolution(pred.primal[0], pred.dual[0], gap, norm, PROXY, eps,
                                 pred.elapsed, 0.0, cert)
    return _from_solver(inst, solve_ed_lazy(inst), eps, pred.elapsed, cert)


@dataclass
class BatchReport:
    solutions: list[CertifiedSolution]
    certificates: np.ndarray
    solve_times: np.ndarray
    fallback_count: int
    inference_time: float
    fallback_makespan: float
    baseline_time: float
    hybrid_time: float
    speedup: float
    epsilon: float
    workers: int

    @property
    def size(self) -> int:
        return len(self.solutions)

    def rows(self) -> list[dict]:
        out = []
        for i, s in enumerate(self.solutions):
            out.append({
                "instance": i,
                "gap": s.gap,
                "norm_gap": s.norm_gap,
                "source": s.source,
                "proxy_time": s.proxy_time,
                "solver_time": float(self.solve_times[i]),
                "certificate": float(self.certificates[i]),
            })
        return out

    def write_csv(self, path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


def batch_solve(instances: Sequence[EDInstance], proxies: tuple[PrimalProxy, DualProxy],
                eps: float, timing: TimingModel | None = None, *,
                gap_mode: str = NORMALIZED) -> BatchReport:
    """Hybrid solve of a batch with makespan-based speedup accounting.

    Every instance is also solved offline by the exact solver so that the baseline
    batch time (and the fallback solve times) are measured, unless synthetic
    ``timing.solve_times`` are supplied; then only fallback instances are solved.
    """
    if not instances:
        raise ValueError("empty batch")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    timing = timing or TimingModel()
    primal, dual = proxies
    pd = np.stack([inst.pd for inst in instances])
    pred = _predict(pd, primal, dual, gap_mode)
    inference = pred.elapsed if timing.inference_time is None else float(timing.inference_time)
    per_proxy = inference / len(instances)

    fallback = ~(pred.certificate <= eps)
    solutions: list[CertifiedSolution] = []
    solve_times = np.zeros(len(instances))
    for i, inst in enumerate(instances):
        res = None
        if timing.solve_times is None or fallback[i]:
            res = solve_ed_lazy(inst)
            solve_times[i] = res.wall_time
        if fallback[i]:
            solutions.append(_from_solver(inst, res, eps, per_proxy, float(pred.certificate[i])))
        else:
            gap = float(pred.phi[i] - pred.psi[i])
            solutions.append(CertifiedSolution(
                pred.primal[i], pred.dual[i], gap, gap / float(pred.psi[i]) if pred.psi[i] > 0 else math.nan,
                PROXY, eps, per_proxy, 0.0, float(pred.certificate[i]),
            ))
    if timing.solve_times is not None:
        solve_times = np.asarray(timing.solve_times, dtype=float)
        if solve_times.shape != (len(instances),):
            raise ValueError("one synthetic solve time per instance is required")
        for i, s in enumerate(solutions):
            if s.source == FALLBACK:
                s.solver_time = float(solve_times[i])
    hybrid, baseline, n = speedup_from_times(inference, solve_times, fallback, timing.workers)
    return BatchReport(
        solutions=solutions,
        certificates=pred.certificate.copy(),
        solve_times=solve_times,
        fallback_count=int(fallback.sum()),
        inference_time=inference,
        fallback_makespan=makespan(solve_times[fallback], timing.workers),
        baseline_time=baseline,
        hybrid_time=hybrid,
        speedup=n,
        epsilon=eps,
        workers=timing.workers,
    )


@dataclass
class SpeedupCurve:
    rows: list[tuple[float, float, float, float]]     # eps, N, fallback fraction, max certified gap
    inverse: dict[float, float | None] = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["eps", "N", "fallback_fraction", "max_certified_gap"])
            writer.writerows(self.rows)

    def write_inverse_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["target_N", "min_eps"])
            for target, eps in self.inverse.items():
                writer.writerow([target, "" if eps is None else eps])


def speedup_curve(certificates: Sequence[float], solve_times: Sequence[float],
                  inference_time: float, eps_grid: Sequence[float],
                  workers: int = DEFAULT_WORKERS,
                  targets: Sequence[float] = (100, 500, 1000)) -> SpeedupCurve:
    """Speedup as a function of the tolerance, from cached certificates and solve times.

    The inverse table gives, for each target speedup, the smallest tolerance at which
    it is reached (``None`` if never).
    """
    cert = np.asarray(certificates, dtype=float)
    times = np.asarray(solve_times, dtype=float)

    def at(eps: float):
        accepted = cert <= eps
        _, _, n = speedup_from_times(inference_time, times, ~accepted, workers)
        max_gap = float(cert[accepted].max()) if accepted.any() else math.nan
        return n, float((~accepted).mean()), max_gap

    rows = []
    for eps in sorted(float(e) for e in eps_grid):
        n, frac, max_gap = at(eps)
        rows.append((eps, n, frac, max_gap))

    thresholds = np.unique(np.concatenate([[0.0], cert[np.isfinite(cert) & (cert >= 0)]]))
    inverse: dict[float, float | None] = {}
    for target in targets:
        inverse[target] = None
        for eps in thresholds:
            if at(float(eps))[0] >= target:
                inverse[target] = float(eps)
                break
    return SpeedupCurve(rows, inverse)


def read_results_csv(path):
    """Load a per-sample results file written by :meth:`BatchReport.write_csv`."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError("results file has no rows")
    cert = np.array([float(r["certificate"]) for r in rows])
    times = np.array([float(r["solver_time"]) for r in rows])
    inference = float(sum(float(r["proxy_time"]) for r in rows))
    return cert, times, inference
