"""Feasible-by-construction primal and dual proxies for economic dispatch.

Primal: bounded network prediction, proportional-response repair onto the power
balance, flows and minimal overflows recovered from the dispatch.
Dual: network predicts the balance price ``lambda`` (free) and flow duals ``pi``
(bounded by the penalty); the remaining multipliers are completed either smoothly
(S3L, used for training) or optimally (DLL, used for inference).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import kernels, nn
from .ed_model import DispatchModel, DualPoint, EDInstance, PrimalPoint

logger = logging.getLogger(__name__)

DEFAULT_SMOOTHING = 1e-2
TRAINING, INFERENCE = "training", "inference"


@dataclass
class InputScaler:
    """Features fed to both networks: ``(pd - mean) / scale``."""

    mean: np.ndarray
    scale: float

    @classmethod
    def fit(cls, model: DispatchModel, pd_samples: np.ndarray) -> "InputScaler":
        scale = float(model.p_upper.sum()) / max(1, model.n_load)
        return cls(np.asarray(pd_samples, dtype=float).mean(axis=0), scale)

    def __call__(self, pd: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(pd) - self.mean) / self.scale

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean.tolist(), "scale": self.scale}

    @classmethod
    def from_dict(cls, doc) -> "InputScaler":
        return cls(np.asarray(doc["mean"], dtype=float), float(doc["scale"]))


def proportional_response(p_tilde, pd_total, p_lower, p_upper) -> np.ndarray:
    """Move a bound-feasible dispatch onto ``sum(p) == pd_total`` by a convex combination
    with the upper (deficit) or lower (surplus) bound vector."""
    p_tilde = np.asarray(p_tilde, dtype=float)
    out, _, _ = kernels.proportional_response(
        p_tilde.reshape(1, -1), np.array([float(pd_total)]),
        np.asarray(p_lower, dtype=float), np.asarray(p_upper, dtype=float),
    )
    return out[0]


def _s3l_scales(model: DispatchModel, mu_s: float):
    if not mu_s > 0:
        raise ValueError("smoothing constant must be positive")
    f_range = model.f_upper - model.f_lower
    p_range = model.p_upper - model.p_lower
    if np.any(f_range <= 0) or np.any(p_range <= 0):
        raise ValueError("S3L completion needs strictly positive flow and generator ranges")
    return mu_s / f_range, mu_s / p_range


@dataclass
class DualBatch:
    lam: np.ndarray         # (B,)
    pi: np.ndarray          # (B, E)
    mu_lower: np.ndarray
    mu_upper: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    y: np.ndarray
    psi: np.ndarray         # (B,)
    pd: np.ndarray
    mode: str
    dmu: np.ndarray | None = None   # d mu_lower / d pi
    dz: np.ndarray | None = None    # d z_lower / d z
    tape: nn.Tape | None = None

    @property
    def y_violations(self) -> int:
        return int(np.sum(np.any(self.y < 0, axis=1)))

    def point(self, i: int) -> DualPoint:
        return DualPoint(
            lam=float(self.lam[i]), pi=self.pi[i].copy(), mu_lower=self.mu_lower[i].copy(),
            mu_upper=self.mu_upper[i].copy(), z_lower=self.z_lower[i].copy(),
            z_upper=self.z_upper[i].copy(), y=self.y[i].copy(),
        )


def complete_dual_batch(model: DispatchModel, lam, pi, pd, mode: str,
                        mu_s: float = DEFAULT_SMOOTHING) -> DualBatch:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    pi = np.atleast_2d(np.asarray(pi, dtype=float))
    pd = np.atleast_2d(np.asarray(pd, dtype=float))
    z = model.cost - lam[:, None] - pi @ model.h_g
    if mode == TRAINING:
        s_f, s_g = _s3l_scales(model, mu_s)
        mu_lo, mu_up, dmu = kernels.smooth_split(pi, s_f)
        z_lo, z_up, dz = kernels.smooth_split(z, s_g)
    elif mode == INFERENCE:
        if np.any(np.abs(pi) > model.penalty):
            raise ValueError("|pi| exceeds the overflow penalty; DLL completion undefined")
        mu_lo, mu_up = kernels.hard_split(pi)
        z_lo, z_up = kernels.hard_split(z)
        dmu = (pi > 0).astype(float)
        dz = (z > 0).astype(float)
    else:
        raise ValueError(f"unknown completion mode {mode!r}")
    y = model.penalty - mu_lo - mu_up
    psi = (
        lam * pd.sum(axis=1)
        + np.sum((pd @ model.h_d.T) * pi, axis=1)
        + mu_lo @ model.f_lower - mu_up @ model.f_upper
        + z_lo @ model.p_lower - z_up @ model.p_upper
    )
    return DualBatch(lam, pi, mu_lo, mu_up, z_lo, z_up, y, psi, pd, mode, dmu, dz)


def dual_objective_vjp(model: DispatchModel, batch: DualBatch, dpsi: np.ndarray):
    """Gradients of ``sum(dpsi * psi)`` with respect to ``lambda`` and ``pi``."""
    dpsi = np.asarray(dpsi, dtype=float)
    # d psi / d z through the generator bound duals
    dpsi_dz = model.p_lower * batch.dz - model.p_upper * (batch.dz - 1.0)
    dpi = (
        batch.pd @ model.h_d.T
        + model.f_lower * batch.dmu
        - model.f_upper * (batch.dmu - 1.0)
        - dpsi_dz @ model.h_g.T
    )
    dlam = batch.pd.sum(axis=1) - dpsi_dz.sum(axis=1)
    return dpsi * dlam, dpsi[:, None] * dpi


def dual_complete_s3l(lambda_hat: float, pi_hat, inst: EDInstance,
                      mu_s: float = DEFAULT_SMOOTHING) -> DualPoint:
    """Smooth completion; every bound dual is strictly positive."""
    b = complete_dual_batch(inst.model, [lambda_hat], [pi_hat], inst.pd, TRAINING, mu_s)
    if b.y_violations:
        logger.warning("S3L completion produced negative overflow duals (|pi| near the penalty)")
    return b.point(0)


def dual_complete_dll(lambda_hat: float, pi_hat, inst: EDInstance) -> DualPoint:
    """Optimal completion of fixed ``(lambda, pi)``."""
    return complete_dual_batch(inst.model, [lambda_hat], [pi_hat], inst.pd, INFERENCE).point(0)


@dataclass
class PrimalBatch:
    p_tilde: np.ndarray
    pg: np.ndarray
    pf: np.ndarray
    xi: np.ndarray
    phi: np.ndarray
    pd: np.ndarray
    eta: np.ndarray
    code: np.ndarray
    overflow_sign: np.ndarray
    tape: nn.Tape | None = None

    def point(self, i: int) -> PrimalPoint:
        return PrimalPoint(self.pg[i].copy(), self.pf[i].copy(), self.xi[i].copy())


def repair_primal_batch(model: DispatchModel, p_tilde: np.ndarray, pd: np.ndarray) -> PrimalBatch:
    pd = np.atleast_2d(pd)
    pg, eta, code = kernels.proportional_response(
        p_tilde, pd.sum(axis=1), model.p_lower, model.p_upper
    )
    pf = pg @ model.h_g.T - pd @ model.h_d.T
    xi, sign = kernels.overflow(pf, model.f_lower, model.f_upper)
    phi = pg @ model.cost + model.penalty * xi.sum(axis=1)
    return PrimalBatch(p_tilde, pg, pf, xi, phi, pd, eta, code, sign)


def primal_objective_vjp(model: DispatchModel, batch: PrimalBatch, dphi: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dphi * phi)`` with respect to the unrepaired prediction."""
    dpg = model.cost + model.penalty * (batch.overflow_sign @ model.h_g)
    dpg = dpg * np.asarray(dphi, dtype=float)[:, None]
    return kernels.proportional_response_vjp(
        dpg, batch.p_tilde, batch.pd.sum(axis=1), model.p_lower, model.p_upper,
        batch.eta, batch.code,
    )


@dataclass
class PrimalProxy:
    model: DispatchModel
    net: nn.MLPParams
    scaler: InputScaler

    @classmethod
    def init(cls, model: DispatchModel, scaler: InputScaler, rng: np.random.Generator,
             hidden=nn.DEFAULT_HIDDEN) -> "PrimalProxy":
        lo, hi = model.p_lower, model.p_upper
        net = nn.init_mlp(
            model.n_load, model.n_gen, rng, hidden,
            out_lower=lo, out_upper=hi,
            out_shift=0.5 * (lo + hi), out_scale=np.maximum(0.25 * (hi - lo), 1e-6),
        )
        return cls(model, net, scaler)

    def predict_batch(self, pd: np.ndarray, training: bool = False) -> PrimalBatch:
        pd = np.atleast_2d(np.asarray(pd, dtype=float))
        p_tilde, tape = nn.forward(self.net, self.scaler(pd), training=training)
        batch = repair_primal_batch(self.model, p_tilde, pd)
        batch.tape = tape
        return batch

    def backward(self, batch: PrimalBatch, dphi: np.ndarray) -> list[np.ndarray]:
        return nn.backward(batch.tape, primal_objective_vjp(self.model, batch, dphi))


@dataclass
class DualProxy:
    model: DispatchModel
    net: nn.MLPParams
    scaler: InputScaler
    smoothing: float = DEFAULT_SMOOTHING

    @classmethod
    def init(cls, model: DispatchModel, scaler: InputScaler, rng: np.random.Generator,
             hidden=nn.DEFAULT_HIDDEN, smoothing: float = DEFAULT_SMOOTHING) -> "DualProxy":
        E = model.n_branch
        M = model.penalty
        price = float(np.mean(model.cost))
        lower = np.concatenate([[-np.inf], np.full(E, -M)])
        upper = np.concatenate([[np.inf], np.full(E, M)])
        shift = np.concatenate([[price], np.zeros(E)])
        scale = np.full(E + 1, max(price, 1.0))
        net = nn.init_mlp(model.n_load, E + 1, rng, hidden, lower, upper, shift, scale)
        # random flow duals are heavily penalized by the thermal limits; start at pi = 0
        net.weights[-1][:, 1:] = 0.0
        return cls(model, net, scaler, smoothing)

    def raw_predict(self, pd: np.ndarray, training: bool = False):
        out, tape = nn.forward(self.net, self.scaler(pd), training=training)
        return out[:, 0], out[:, 1:], tape

    def predict_batch(self, pd: np.ndarray, mode: str = INFERENCE,
                      training: bool | None = None) -> DualBatch:
        """``mode`` picks the completion; ``training`` the batch-norm behaviour
        (defaults to training statistics exactly when ``mode`` is S3L)."""
        pd = np.atleast_2d(np.asarray(pd, dtype=float))
        if training is None:
            training = mode == TRAINING
        lam, pi, tape = self.raw_predict(pd, training=training)
        batch = complete_dual_batch(self.model, lam, pi, pd, mode, self.smoothing)
        batch.tape = tape
        return batch

    def backward(self, batch: DualBatch, dpsi: np.ndarray) -> list[np.ndarray]:
        dlam, dpi = dual_objective_vjp(self.model, batch, dpsi)
        return nn.backward(batch.tape, np.column_stack([dlam, dpi]))


def primal_predict(proxy: PrimalProxy, inst: EDInstance) -> PrimalPoint:
    return proxy.predict_batch(inst.pd[None, :], training=False).point(0)


def dual_predict(proxy: DualProxy, inst: EDInstance, mode: str = INFERENCE) -> DualPoint:
    """Single-instance dual prediction.

    Batch norm always runs on running statistics here (a single row has no batch
    statistics); ``mode`` selects the S3L or DLL completion.
    """
    return proxy.predict_batch(inst.pd[None, :], mode=mode, training=False).point(0)
