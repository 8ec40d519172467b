"""Label-free joint training of the primal and dual proxies.

The loss is the hinge of the midpoint-normalized duality gap; validation uses the
dual-normalized gap, which drives learning-rate scheduling and checkpointing. A
fresh training set is drawn every epoch and no LP is ever solved.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import nn
from .ed_model import DispatchModel, EDInstance
from .grid import Grid
from .proxies import (
    DEFAULT_SMOOTHING,
    INFERENCE,
    TRAINING,
    DualProxy,
    InputScaler,
    PrimalProxy,
)
from .rng import stream

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SamplerConfig:
    global_scale_range: tuple[float, float] = (0.8, 1.2)
    per_load_noise_range: tuple[float, float] = (-0.05, 0.05)
    capacity_margin: float = 0.98

    def __post_init__(self):
        lo, hi = self.global_scale_range
        nlo, nhi = self.per_load_noise_range
        if not (0 <= lo <= hi) or not (nlo <= nhi) or nlo <= -1:
            raise ValueError("sampler ranges must be ordered (and noise above -1)")
        if not 0 < self.capacity_margin <= 1:
            raise ValueError("capacity_margin must lie in (0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    eps_target: float = 0.0
    epochs: int = 5000
    batch_size: int = 1024
    train_samples_per_epoch: int = 20480
    val_samples: int = 10240
    lr_init: float = 1e-3
    lr_floor: float = 1e-5
    lr_factor: float = 0.95
    patience_epochs: int = 50
    min_improvement: float = 1e-4
    seed: int = 0
    smoothing: float = DEFAULT_SMOOTHING
    hidden: tuple[int, ...] = nn.DEFAULT_HIDDEN
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.eps_target < 0:
            raise ValueError("eps_target must be nonnegative")
        if self.lr_floor > self.lr_init:
            raise ValueError("lr_floor must not exceed lr_init")
        if self.batch_size > self.train_samples_per_epoch:
            raise ValueError("batch_size must not exceed train_samples_per_epoch")
        if self.min_improvement < 0:
            raise ValueError("min_improvement must be nonnegative")
        if self.epochs < 1 or self.val_samples < 1:
            raise ValueError("epochs and val_samples must be positive")

    def to_dict(self) -> dict[str, Any]:
        doc = dataclasses.asdict(self)
        doc["hidden"] = list(self.hidden)
        doc["sampler"] = {k: list(v) if isinstance(v, tuple) else v
                          for k, v in doc["sampler"].items()}
        return doc

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "TrainConfig":
        doc = dict(doc)
        s = doc.pop("sampler", {})
        sampler = SamplerConfig(
            tuple(s.get("global_scale_range", (0.8, 1.2))),
            tuple(s.get("per_load_noise_range", (-0.05, 0.05))),
            s.get("capacity_margin", 0.98),
        )
        if "hidden" in doc:
            doc["hidden"] = tuple(doc["hidden"])
        return cls(sampler=sampler, **doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------- sampling

def sample_pd(grid: Grid, cfg: SamplerConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` demand vectors ``scale * (1 + noise) * pd_ref``, kept inside the capacity band."""
    if n < 1:
        raise ValueError("n must be at least 1")
    ref = grid.pd_ref
    if not np.any(ref > 0):
        raise ValueError("reference demand is zero everywhere")
    gamma = rng.uniform(*cfg.global_scale_range, size=n)
    noise = rng.uniform(*cfg.per_load_noise_range, size=(n, ref.size))
    pd = gamma[:, None] * (1.0 + noise) * ref
    totals = pd.sum(axis=1)
    cap = cfg.capacity_margin * grid.p_upper.sum()
    floor = grid.p_lower.sum()
    factor = np.ones(n)
    hi = totals > cap
    factor[hi] = cap / totals[hi]
    lo = totals < floor
    factor[lo] = floor / totals[lo]
    return pd * factor[:, None]


def sample_demands(grid: Grid, cfg: SamplerConfig, n: int, seed: int,
                   model: DispatchModel | None = None) -> list[EDInstance]:
    model = model or DispatchModel.from_grid(grid)
    pd = sample_pd(grid, cfg, n, stream(seed, "sampler"))
    return [EDInstance(model, row) for row in pd]


def _as_pd(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return np.atleast_2d(batch)
    return np.stack([inst.pd for inst in batch])


# --------------------------------------------------------------------------- loss

@dataclass
class LossResult:
    loss: float
    primal_grads: list[np.ndarray]
    dual_grads: list[np.ndarray]
    gaps: np.ndarray
    s3l_flagged: int


def training_loss(batch, primal: PrimalProxy, dual: DualProxy, eps: float = 0.0) -> LossResult:
    """Mean hinge of the midpoint-normalized gap, with gradients for both networks.

    The midpoint denominator is held constant when differentiating. Where the
    midpoint is not positive the primal objective is used as denominator.
    """
    if primal.model is not dual.model:
        raise ValueError("proxies are bound to different dispatch models")
    pd = _as_pd(batch)
    pb = primal.predict_batch(pd, training=True)
    db = dual.predict_batch(pd, mode=TRAINING, training=True)
    phi, psi = pb.phi, db.psi
    den = 0.5 * (phi + psi)
    bad = ~(den > 0)
    den = np.where(bad, np.abs(phi), den)
    gaps = (phi - psi) / den
    hinge = np.maximum(gaps - eps, 0.0)
    loss = float(hinge.mean())
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite training loss")
    weight = (gaps > eps) / (den * pd.shape[0])
    return LossResult(
        loss=loss,
        primal_grads=primal.backward(pb, weight),
        dual_grads=dual.backward(db, -weight),
        gaps=gaps,
        s3l_flagged=db.y_violations,
    )


# --------------------------------------------------------------------------- validation

@dataclass
class ValidationResult:
    mean_gap: float          # +inf when any certificate failed
    mean_certified: float    # mean over instances with a positive dual objective
    n_failed: int
    gaps: np.ndarray


def predict_gaps(pd: np.ndarray, primal: PrimalProxy, dual: DualProxy, chunk: int = 4096):
    """Inference-mode objectives and dual-normalized gaps (``inf`` where the dual
    objective is not positive)."""
    pd = np.atleast_2d(pd)
    phis, psis = [], []
    for start in range(0, pd.shape[0], chunk):
        part = pd[start:start + chunk]
        phis.append(primal.predict_batch(part, training=False).phi)
        psis.append(dual.predict_batch(part, mode=INFERENCE, training=False).psi)
    phi = np.concatenate(phis)
    psi = np.concatenate(psis)
    with np.errstate(divide="ignore", invalid="ignore"):
        gaps = np.where(psi > 0, (phi - psi) / psi, np.inf)
    return phi, psi, gaps


def validate(val_set, primal: PrimalProxy, dual: DualProxy) -> ValidationResult:
    """Mean dual-normalized gap of inference-mode predictions over a fixed set."""
    _, _, gaps = predict_gaps(_as_pd(val_set), primal, dual)
    ok = np.isfinite(gaps)
    n_failed = int((~ok).sum())
    certified = float(gaps[ok].mean()) if ok.any() else math.inf
    mean_gap = math.inf if n_failed else certified
    return ValidationResult(mean_gap, certified, n_failed, gaps)


# --------------------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    primal_net: nn.MLPParams
    dual_net: nn.MLPParams
    scaler: InputScaler
    config: TrainConfig
    case: dict[str, Any]
    best_val_gap: float
    best_epoch: int
    epochs_run: int
    aborted: bool = False
    history: list[dict[str, Any]] = field(default_factory=list)

    def proxies(self, model: DispatchModel | None = None) -> tuple[PrimalProxy, DualProxy]:
        if model is None:
            from .grid import grid_from_dict
            model = DispatchModel.from_grid(grid_from_dict(self.case))
        primal = PrimalProxy(model, self.primal_net.copy(), self.scaler)
        dual = DualProxy(model, self.dual_net.copy(), self.scaler, self.config.smoothing)
        primal.net.training = False
        dual.net.training = False
        return primal, dual

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "case": self.case,
            "best_val_gap": _fenc(self.best_val_gap),
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "aborted": self.aborted,
            "input_scaler": self.scaler.to_dict(),
            "primal": self.primal_net.to_dict(),
            "dual": self.dual_net.to_dict(),
            "history": self.history,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "Checkpoint":
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
        config = TrainConfig.from_dict(doc["config"])
        if config.digest() != doc["config_hash"]:
            raise ValueError("checkpoint config hash mismatch")
        return cls(
            primal_net=nn.MLPParams.from_dict(doc["primal"]),
            dual_net=nn.MLPParams.from_dict(doc["dual"]),
            scaler=InputScaler.from_dict(doc["input_scaler"]),
            config=config,
            case=doc["case"],
            best_val_gap=float(doc["best_val_gap"]),
            best_epoch=int(doc["best_epoch"]),
            epochs_run=int(doc["epochs_run"]),
            aborted=bool(doc.get("aborted", False)),
            history=list(doc.get("history", [])),
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _fenc(v: float):
    return "inf" if v == math.inf else float(v)


# --------------------------------------------------------------------------- training loop

class _Plateau:
    """Multiply the learning rate when the best validation gap stalls."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.lr_init
        self.reference = math.inf
        self.stalled = 0

    def update(self, val_gap: float) -> float:
        if math.isfinite(val_gap) and (
            not math.isfinite(self.reference) or val_gap < self.reference - self.cfg.min_improvement
        ):
            self.reference = val_gap
            self.stalled = 0
        else:
            self.stalled += 1
            if self.stalled >= self.cfg.patience_epochs:
                self.lr = max(self.lr * self.cfg.lr_factor, self.cfg.lr_floor)
                self.stalled = 0
        return self.lr


def train_joint(
    grid: Grid,
    cfg: TrainConfig,
    *,
    log_path=None,
    on_epoch: Callable[[dict[str, Any]], None] | None = None,
) -> Checkpoint:
    """Train primal and dual proxies jointly and return the best-validation checkpoint."""
    model = DispatchModel.from_grid(grid)
    sampler_rng = stream(cfg.seed, "sampler")
    val_pd = sample_pd(grid, cfg.sampler, cfg.val_samples, stream(cfg.seed, "validation"))
    scaler = InputScaler.fit(
        model, sample_pd(grid, cfg.sampler, cfg.train_samples_per_epoch, stream(cfg.seed, "scaler"))
    )
    init_rng = stream(cfg.seed, "init")
    primal = PrimalProxy.init(model, scaler, init_rng, cfg.hidden)
    dual = DualProxy.init(model, scaler, init_rng, cfg.hidden, cfg.smoothing)
    adam_p = nn.AdamState.like(primal.net, lr=cfg.lr_init)
    adam_d = nn.AdamState.like(dual.net, lr=cfg.lr_init)
    schedule = _Plateau(cfg)

    best = math.inf
    best_epoch = 0
    best_nets = (primal.net.copy(), dual.net.copy())
    history: list[dict[str, Any]] = []
    aborted = False
    log_file = None
    writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "train_loss", "val_gap", "lr", "wall_time"])
    t_start = time.perf_counter()
    epoch = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            pd = sample_pd(grid, cfg.sampler, cfg.train_samples_per_epoch, sampler_rng)
            losses = []
            flagged = 0
            try:
                for start in range(0, pd.shape[0] - cfg.batch_size + 1, cfg.batch_size):
                    res = training_loss(pd[start:start + cfg.batch_size], primal, dual, cfg.eps_target)
                    nn.adam_step(primal.net, res.primal_grads, adam_p)
                    nn.adam_step(dual.net, res.dual_grads, adam_d)
                    losses.append(res.loss)
                    flagged += res.s3l_flagged
            except (FloatingPointError, nn.NonFiniteError) as exc:
                logger.error("training diverged at epoch %d: %s", epoch, exc)
                aborted = True
                break
            primal.net.training = dual.net.training = False
            val = validate(val_pd, primal, dual)
            primal.net.training = dual.net.training = True
            if val.mean_gap < best:
                best = val.mean_gap
                best_epoch = epoch
                best_nets = (primal.net.copy(), dual.net.copy())
            lr = schedule.update(best)
            adam_p.lr = adam_d.lr = lr
            row = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_gap": _fenc(val.mean_gap),
                "val_failed": val.n_failed,
                "best_val_gap": _fenc(best),
                "lr": lr,
                "s3l_flagged": flagged,
            }
            history.append(row)
            if writer is not None:
                writer.writerow([epoch, row["train_loss"], val.mean_gap, lr,
                                 f"{time.perf_counter() - t_start:.3f}"])
                log_file.flush()
            if on_epoch is not None:
                on_epoch(row)
    finally:
        if log_file is not None:
            log_file.close()

    return Checkpoint(
        primal_net=best_nets[0],
        dual_net=best_nets[1],
        scaler=scaler,
        config=cfg,
        case=grid.to_dict(),
        best_val_gap=best,
        best_epoch=best_epoch,
        epochs_run=epoch,
        aborted=aborted,
        history=history,
    )
