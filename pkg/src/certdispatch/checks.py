"""Invariant checks shared by the ``verify`` command and the test suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .ed_model import DispatchModel, check_dual_feasible, check_primal_feasible
from .lp_solver import solve_ed_full, solve_ed_lazy
from .proxies import INFERENCE, TRAINING, DualProxy, InputScaler, PrimalProxy

SOUNDNESS_TOL = 1e-7


@dataclass
class SoundnessReport:
    n: int
    violations: int
    certificate_errors: int     # instances with a nonpositive dual objective (no claim made)
    max_primal_rel: float
    max_dual_rel: float


def certificate_soundness(model: DispatchModel, primal: PrimalProxy, dual: DualProxy,
                          pd: np.ndarray, tol: float = SOUNDNESS_TOL) -> SoundnessReport:
    """Compare each certificate with the true relative primal and dual gaps."""
    pd = np.atleast_2d(pd)
    phi = primal.predict_batch(pd, training=False).phi
    psi = dual.predict_batch(pd, mode=INFERENCE, training=False).psi
    violations = errors = 0
    max_p = max_d = 0.0
    for i, row in enumerate(pd):
        opt = solve_ed_full(model.instance(row)).objective
        p_rel = (phi[i] - opt) / opt
        d_rel = (opt - psi[i]) / opt
        max_p, max_d = max(max_p, p_rel), max(max_d, d_rel)
        if not psi[i] > 0:
            errors += 1
            continue
        cert = (phi[i] - psi[i]) / psi[i]
        if cert + tol < p_rel or cert + tol < d_rel:
            violations += 1
    return SoundnessReport(pd.shape[0], violations, errors, float(max_p), float(max_d))


def lazy_full_mismatches(model: DispatchModel, pd: np.ndarray, tol: float = 1e-6) -> int:
    bad = 0
    for row in np.atleast_2d(pd):
        inst = model.instance(row)
        full = solve_ed_full(inst).objective
        lazy = solve_ed_lazy(inst).objective
        if abs(lazy - full) > tol * max(1.0, abs(full)):
            bad += 1
    return bad


def feasibility_failures(model: DispatchModel, primal: PrimalProxy, dual: DualProxy,
                         pd: np.ndarray, tol: float = 1e-9) -> tuple[int, int]:
    """Counts of proxy predictions failing the primal and dual feasibility checks."""
    pd = np.atleast_2d(pd)
    pb = primal.predict_batch(pd, training=False)
    db = dual.predict_batch(pd, mode=INFERENCE, training=False)
    p_fail = d_fail = 0
    for i, row in enumerate(pd):
        inst = model.instance(row)
        p_fail += not check_primal_feasible(inst, pb.point(i), tol).ok
        d_fail += not check_dual_feasible(inst, db.point(i), tol).ok
    return p_fail, d_fail


def _fd_error(params: nn.MLPParams, analytic: list[np.ndarray], f, h: float) -> dict[int, float]:
    """Per-tensor max |central difference - analytic|, scaled by that tensor's gradient
    magnitude (floored at 1e-3 of the largest gradient anywhere)."""
    arrays = params.trainable()
    scale = max(float(np.max(np.abs(g))) for g in analytic) or 1.0
    out = {}
    for k, (p, g) in enumerate(zip(arrays, analytic)):
        flat = p.reshape(-1)
        num = np.empty(flat.size)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = f()
            flat[j] = old - h
            down = f()
            flat[j] = old
            num[j] = (up - down) / (2 * h)
        denom = max(float(np.max(np.abs(g))), 1e-3 * scale)
        out[k] = float(np.max(np.abs(num - g.reshape(-1)))) / denom
    return out


def network_gradient_error(seed: int, h: float = 1e-5) -> float:
    """Finite-difference check of a 3-hidden-layer net with training-mode batch norm
    and bounded (double-softplus) outputs."""
    rng = np.random.default_rng(seed)
    n_in, n_out = 4, 3
    lower = np.array([-1.0, 0.0, -np.inf])
    upper = np.array([2.0, np.inf, np.inf])
    params = nn.init_mlp(n_in, n_out, rng, hidden=(6, 5, 4), out_lower=lower, out_upper=upper)
    for norm in params.bn:
        norm.gamma += 0.3 * rng.standard_normal(norm.gamma.shape)
        norm.beta += 0.3 * rng.standard_normal(norm.beta.shape)
    for b in params.biases:
        b += 0.1 * rng.standard_normal(b.shape)
    X = rng.standard_normal((7, n_in))
    w = rng.standard_normal((7, n_out))

    def f():
        out, _ = nn.forward(params, X, training=True)
        return float(np.sum(w * out))

    _, tape = nn.forward(params, X, training=True)
    grads = nn.backward(tape, w)
    return max(_fd_error(params, grads, f, h).values())


def proxy_gradient_error(model: DispatchModel, pd: np.ndarray, seed: int,
                         hidden=(8, 8), h: float = 1e-5) -> tuple[float, float]:
    """Finite-difference check of the primal chain (net, proportional response,
    overflow penalty) and the dual chain (net, S3L completion)."""
    rng = np.random.default_rng(seed)
    scaler = InputScaler.fit(model, pd)
    primal = PrimalProxy.init(model, scaler, rng, hidden)
    dual = DualProxy.init(model, scaler, rng, hidden)
    # move the flow-dual outputs away from their zero start so the S3L path is exercised
    dual.net.weights[-1][:, 1:] = 0.05 * rng.standard_normal(dual.net.weights[-1][:, 1:].shape)
    w = rng.uniform(0.5, 1.5, size=pd.shape[0])

    def fp():
        return float(np.sum(w * primal.predict_batch(pd, training=True).phi))

    def fd():
        return float(np.sum(w * dual.predict_batch(pd, mode=TRAINING, training=True).psi))

    pb = primal.predict_batch(pd, training=True)
    gp = primal.backward(pb, w)
    db = dual.predict_batch(pd, mode=TRAINING, training=True)
    gd = dual.backward(db, w)
    return (max(_fd_error(primal.net, gp, fp, h).values()),
            max(_fd_error(dual.net, gd, fd, h).values()))
