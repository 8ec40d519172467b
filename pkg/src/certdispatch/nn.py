"""Small reverse-mode MLP library: affine, batch norm, softplus, bounded outputs, Adam.

Every forward pass returns a :class:`Tape` holding the intermediates the reverse
pass needs. A tape can be consumed once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import kernels

DEFAULT_HIDDEN = (256, 256, 256, 256)


class NonFiniteError(FloatingPointError):
    pass


class TapeConsumedError(RuntimeError):
    pass


def softplus(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def double_softplus(x, lower, upper):
    """``ln(1+e^(x-l)) - ln(1+e^(x-u)) + l``, evaluated stably.

    Scalars or arrays; ``lower``/``upper`` broadcast along the last axis and may be
    infinite (one-sided softplus, or the identity when both are).
    """
    lower_a = np.asarray(lower, dtype=float)
    upper_a = np.asarray(upper, dtype=float)
    if np.any(lower_a > upper_a):
        raise ValueError("double_softplus requires lower <= upper")
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y, _ = kernels.double_softplus(x, np.broadcast_to(lower_a, x.shape[-1:]),
                                   np.broadcast_to(upper_a, x.shape[-1:]))
    return float(y[0]) if scalar else y


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass
class MLPParams:
    """Weights of one proxy network plus the fixed output head.

    The raw network output ``r`` is mapped to ``double_softplus(shift + scale * r,
    out_lower, out_upper)``; shift and scale are not trained.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn: list[BatchNorm]
    out_lower: np.ndarray
    out_upper: np.ndarray
    out_shift: np.ndarray
    out_scale: np.ndarray
    training: bool = True

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]

    def trainable(self) -> list[np.ndarray]:
        out = []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out.extend((W, b))
            if i < len(self.bn):
                out.extend((self.bn[i].gamma, self.bn[i].beta))
        return out

    def copy(self) -> "MLPParams":
        return MLPParams.from_dict(self.to_dict())

    def to_dict(self) -> dict[str, Any]:
        return {
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "bn": [
                {"gamma": n.gamma.tolist(), "beta": n.beta.tolist(),
                 "running_mean": n.running_mean.tolist(), "running_var": n.running_var.tolist(),
                 "momentum": n.momentum, "eps": n.eps}
                for n in self.bn
            ],
            "out_lower": [_enc(v) for v in self.out_lower],
            "out_upper": [_enc(v) for v in self.out_upper],
            "out_shift": self.out_shift.tolist(),
            "out_scale": self.out_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "MLPParams":
        arr = lambda v: np.asarray(v, dtype=float)  # noqa: E731
        return cls(
            weights=[arr(W) for W in doc["weights"]],
            biases=[arr(b) for b in doc["biases"]],
            bn=[
                BatchNorm(arr(n["gamma"]), arr(n["beta"]), arr(n["running_mean"]),
                          arr(n["running_var"]), float(n["momentum"]), float(n["eps"]))
                for n in doc["bn"]
            ],
            out_lower=np.array([_dec(v) for v in doc["out_lower"]]),
            out_upper=np.array([_dec(v) for v in doc["out_upper"]]),
            out_shift=arr(doc["out_shift"]),
            out_scale=arr(doc["out_scale"]),
            training=False,
        )


def _enc(v: float):
    if np.isposinf(v):
        return "inf"
    if np.isneginf(v):
        return "-inf"
    return float(v)


def _dec(v) -> float:
    return float(v)


def init_mlp(
    n_in: int,
    n_out: int,
    rng: np.random.Generator,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    out_lower=None,
    out_upper=None,
    out_shift=None,
    out_scale=None,
) -> MLPParams:
    """He-initialized MLP with batch norm after every hidden affine layer."""
    sizes = [n_in, *hidden, n_out]
    weights, biases, bn = [], [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
        biases.append(np.zeros(b))
    for h in hidden:
        bn.append(BatchNorm(np.ones(h), np.zeros(h), np.zeros(h), np.ones(h)))

    def vec(v, default):
        return np.broadcast_to(np.asarray(default if v is None else v, dtype=float), (n_out,)).copy()

    lower = vec(out_lower, -np.inf)
    upper = vec(out_upper, np.inf)
    if np.any(lower > upper):
        raise ValueError("output lower bound exceeds upper bound")
    return MLPParams(weights, biases, bn, lower, upper, vec(out_shift, 0.0), vec(out_scale, 1.0))


@dataclass
class Tape:
    training: bool
    inputs: list[np.ndarray] = field(default_factory=list)      # input to each affine layer
    pre_bn: list[np.ndarray] = field(default_factory=list)
    xhat: list[np.ndarray] = field(default_factory=list)
    inv_std: list[np.ndarray] = field(default_factory=list)
    pre_act: list[np.ndarray] = field(default_factory=list)
    out_slope: np.ndarray | None = None
    raw: np.ndarray | None = None
    params: MLPParams | None = None
    consumed: bool = False


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite activation in {where}")


def forward(params: MLPParams, batch: np.ndarray, training: bool | None = None):
    """Evaluate the network on a batch (rows are samples).

    In training mode batch statistics normalize each hidden layer and the running
    statistics are updated; in inference mode the running statistics are used and
    nothing is mutated.
    """
    training = params.training if training is None else training
    X = np.asarray(batch, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.n_in:
        raise ValueError(f"input shape {X.shape} does not match network width {params.n_in}")
    if training and X.shape[0] < 2:
        raise ValueError("training-mode batch norm needs at least two rows")
    tape = Tape(training=training, params=params)
    h = X
    n_hidden = len(params.bn)
    for i in range(n_hidden):
        tape.inputs.append(h)
        a = h @ params.weights[i] + params.biases[i]
        norm = params.bn[i]
        if training:
            mean = a.mean(axis=0)
            var = a.var(axis=0)
            n = a.shape[0]
            norm.running_mean *= 1.0 - norm.momentum
            norm.running_mean += norm.momentum * mean
            norm.running_var *= 1.0 - norm.momentum
            norm.running_var += norm.momentum * var * n / (n - 1)
        else:
            mean, var = norm.running_mean, norm.running_var
        inv_std = 1.0 / np.sqrt(var + norm.eps)
        xhat = (a - mean) * inv_std
        z = norm.gamma * xhat + norm.beta
        tape.pre_bn.append(a)
        tape.xhat.append(xhat)
        tape.inv_std.append(inv_std)
        tape.pre_act.append(z)
        h = softplus(z)
        _check_finite(h, f"hidden layer {i}")
    tape.inputs.append(h)
    raw = h @ params.weights[-1] + params.biases[-1]
    out, slope = kernels.double_softplus(
        params.out_shift + params.out_scale * raw, params.out_lower, params.out_upper
    )
    _check_finite(out, "output layer")
    tape.raw = raw
    tape.out_slope = slope * params.out_scale
    return out, tape


def backward(tape: Tape, upstream: np.ndarray) -> list[np.ndarray]:
    """Gradients of ``sum(upstream * output)`` in :meth:`MLPParams.trainable` order."""
    if tape.consumed:
        raise TapeConsumedError("tape already used for a backward pass")
    tape.consumed = True
    params = tape.params
    g = np.asarray(upstream, dtype=float) * tape.out_slope
    n_hidden = len(params.bn)
    grads: list[list[np.ndarray]] = [[] for _ in range(n_hidden + 1)]
    grads[-1] = [tape.inputs[-1].T @ g, g.sum(axis=0)]
    dh = g @ params.weights[-1].T
    for i in reversed(range(n_hidden)):
        dz = dh * sigmoid(tape.pre_act[i])
        norm = params.bn[i]
        xhat = tape.xhat[i]
        dgamma = np.sum(dz * xhat, axis=0)
        dbeta = dz.sum(axis=0)
        dxhat = dz * norm.gamma
        if tape.training:
            n = dxhat.shape[0]
            da = (tape.inv_std[i] / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
            )
        else:
            da = dxhat * tape.inv_std[i]
        grads[i] = [tape.inputs[i].T @ da, da.sum(axis=0), dgamma, dbeta]
        dh = da @ params.weights[i].T
    return [arr for layer in grads for arr in layer]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def like(cls, params, lr: float = 1e-3) -> "AdamState":
        arrays = params.trainable() if isinstance(params, MLPParams) else list(params)
        return cls([np.zeros_like(p) for p in arrays], [np.zeros_like(p) for p in arrays], lr=lr)

    def to_dict(self) -> dict[str, Any]:
        return {"m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v],
                "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step}


def adam_step(params, grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    arrays = params.trainable() if isinstance(params, MLPParams) else list(params)
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ValueError("parameter, gradient and optimizer state lists differ in length")
    for p, g in zip(arrays, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
