"""Small dense kernel: linear / ReLU / BatchNorm layers with hand-written
backward passes, softmax, SGD, cosine learning-rate schedule and a
central-difference gradient checker.

All training math runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np


class DimensionError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def as_matrix(x, name: str = "input") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 1-D or 2-D, got shape {a.shape}")
    return a


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"inconsistent linear shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "LinearLayer":
        # Glorot-uniform weights, zero bias
        limit = math.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out))

    def params(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


def linear_forward(layer: LinearLayer, batch) -> np.ndarray:
    x = as_matrix(batch, "batch")
    if x.shape[1] != layer.in_features:
        raise DimensionError(
            f"batch has {x.shape[1]} columns, layer expects {layer.in_features}"
        )
    return x @ layer.weight.T + layer.bias


def linear_backward(layer: LinearLayer, x: np.ndarray, grad_out: np.ndarray):
    """Returns (grad_x, {"weight": dW, "bias": db})."""
    grads = {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}
    return grad_out @ layer.weight, grads


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum must be in (0, 1], got {self.momentum}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")

    @classmethod
    def init(cls, features: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormLayer":
        return cls(
            gamma=np.ones(features),
            beta=np.zeros(features),
            running_mean=np.zeros(features),
            running_var=np.ones(features),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def features(self) -> int:
        return self.gamma.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}


@dataclass
class _BNCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    train: bool


def batchnorm_forward(layer: BatchNormLayer, batch, mode: Optional[str] = None,
                      update_stats: bool = True, return_cache: bool = False):
    """Normalize each feature column.

    Train mode uses biased batch statistics for the normalization and folds
    them into the running estimates (``running = (1 - m) * running + m * batch``,
    with the unbiased variance for ``running_var``). Eval mode uses the
    running estimates and leaves the layer untouched.
    """
    x = as_matrix(batch, "batch")
    mode = mode or layer.mode
    if x.shape[1] != layer.features:
        raise DimensionError(f"batch has {x.shape[1]} columns, layer expects {layer.features}")
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise DegenerateBatchError("train-mode BatchNorm needs at least 2 rows")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        if update_stats:
            m = layer.momentum
            layer.running_mean = (1.0 - m) * layer.running_mean + m * mean
            layer.running_var = (1.0 - m) * layer.running_var + m * var * n / (n - 1)
    elif mode == "eval":
        mean = layer.running_mean
        var = layer.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + layer.epsilon)
    x_hat = (x - mean) * inv_std
    out = layer.gamma * x_hat + layer.beta
    if return_cache:
        return out, _BNCache(x_hat, inv_std, mode == "train")
    return out


def batchnorm_backward(layer: BatchNormLayer, cache: _BNCache, grad_out: np.ndarray):
    grads = {
        "gamma": (grad_out * cache.x_hat).sum(axis=0),
        "beta": grad_out.sum(axis=0),
    }
    g_hat = grad_out * layer.gamma
    if not cache.train:
        return g_hat * cache.inv_std, grads
    n = grad_out.shape[0]
    grad_x = (cache.inv_std / n) * (
        n * g_hat - g_hat.sum(axis=0) - cache.x_hat * (g_hat * cache.x_hat).sum(axis=0)
    )
    return grad_x, grads


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@dataclass(frozen=True)
class LrSchedule:
    lr0: float
    total_steps: int
    eta_min: float = 0.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.eta_min < 0 or self.eta_min > self.lr0:
            raise ValueError("need 0 <= eta_min <= lr0")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")


def cosine_lr(step: int, sched: LrSchedule) -> float:
    if step < 0 or step > sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if sched.total_steps == 0:
        return sched.lr0
    # cos(pi t / T) as sin(pi (T - 2t) / 2T): exact at t = 0, T/2, T
    cos = math.sin(math.pi * (sched.total_steps - 2 * step) / (2 * sched.total_steps))
    return sched.eta_min + 0.5 * (sched.lr0 - sched.eta_min) * (1.0 + cos)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
    """In-place ``p -= lr * grad`` for every named parameter."""
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise DimensionError(f"parameter/gradient names differ: {sorted(missing)}")
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
    for name, p in params.items():
        p -= lr * grads[name]


def grad_check(
    params: Mapping[str, np.ndarray],
    loss_fn: Callable[[], Tuple[float, Mapping[str, np.ndarray]]],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must read the arrays in ``params`` (they are perturbed in
    place) and return ``(loss, grads)``. With ``max_coords`` set, a seeded
    random subset of coordinates is checked instead of all of them.
    Relative error is ``|a - n| / max(|a| + |n|, floor)``.
    """
    loss, analytic = loss_fn()
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}

    coords = [(name, idx) for name, p in params.items() for idx in np.ndindex(p.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, idx in coords:
        p = params[name]
        old = p[idx]
        p[idx] = old + eps
        f_plus, _ = loss_fn()
        p[idx] = old - eps
        f_minus, _ = loss_fn()
        p[idx] = old
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite loss while perturbing {name}{idx}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[name][idx]
        err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
        worst = max(worst, err)
    return worst

