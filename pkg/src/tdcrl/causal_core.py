"""Confounder dictionary, intervention network g, linear classifier C and the
two training losses, with hand-derived gradients.

Shapes used throughout: B samples, N dictionary entries, K classes, ES
embedding size. g is applied to the B*N concatenations [f_b; z_n] as one
batch (row ``b * N + n``), so train-mode BatchNorm sees all of them together.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn_core as nn
from .augment import StyleBasis
from .encoder_io import Encoder
from .nn_core import BatchNormLayer, DimensionError, LinearLayer

COS_EPS = 1e-12


@dataclass
class ConfounderDictionary:
    vectors: np.ndarray  # (N, ES)
    words: List[str]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError("confounder dictionary must hold at least one vector")
        if len(self.words) != self.vectors.shape[0]:
            raise ValueError("one domain word per dictionary entry")

    @property
    def N(self) -> int:
        return self.vectors.shape[0]


def build_confounder_dictionary(enc: Encoder, basis: StyleBasis, N: int) -> ConfounderDictionary:
    """First N domain words of the basis, each encoded class-agnostically."""
    if not 1 <= N <= basis.D:
        raise ValueError(f"need 1 <= N <= D={basis.D}, got N={N}")
    Z = np.stack([enc.text_encode(None, basis.vectors[n]) for n in range(N)])
    return ConfounderDictionary(Z, list(basis.words[:N]))


def build_target_matrix(enc: Encoder, basis: StyleBasis, N: int, K: int) -> np.ndarray:
    """F[k, n] encodes "a <class k> in a <domain n> style"; shape (K, N, ES)."""
    if not 1 <= N <= basis.D:
        raise ValueError(f"need 1 <= N <= D={basis.D}, got N={N}")
    return np.stack([
        np.stack([enc.text_encode(k, basis.vectors[n]) for n in range(N)])
        for k in range(K)
    ])


@dataclass
class InterventionNet:
    linears: List[LinearLayer]
    norms: List[BatchNormLayer]

    def __post_init__(self):
        if len(self.linears) < 1 or len(self.linears) != len(self.norms):
            raise ValueError("need L >= 1 matching linear/BatchNorm blocks")
        es = self.linears[0].out_features
        if self.linears[0].in_features != 2 * es:
            raise DimensionError("first layer must map 2*ES -> ES")
        for lin, bn in zip(self.linears, self.norms):
            if lin.out_features != es or bn.features != es:
                raise DimensionError("every block must output ES features")
        for lin in self.linears[1:]:
            if lin.in_features != es:
                raise DimensionError("layers after the first map ES -> ES")

    @classmethod
    def init(cls, ES: int, layers: int, rng: np.random.Generator,
             momentum: float = 0.1, epsilon: float = 1e-5) -> "InterventionNet":
        if layers < 1:
            raise ValueError("need at least one layer")
        linears = [LinearLayer.init(2 * ES if i == 0 else ES, ES, rng) for i in range(layers)]
        norms = [BatchNormLayer.init(ES, momentum, epsilon) for _ in range(layers)]
        return cls(linears, norms)

    @property
    def ES(self) -> int:
        return self.linears[0].out_features

    @property
    def depth(self) -> int:
        return len(self.linears)

    def params(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, (lin, bn) in enumerate(zip(self.linears, self.norms)):
            out[f"g.{i}.weight"] = lin.weight
            out[f"g.{i}.bias"] = lin.bias
            out[f"g.{i}.gamma"] = bn.gamma
            out[f"g.{i}.beta"] = bn.beta
        return out

    def forward(self, x: np.ndarray, mode: str = "eval", keep: bool = False):
        caches = []
        h = x
        for lin, bn in zip(self.linears, self.norms):
            pre = nn.linear_forward(lin, h)
            act = nn.relu(pre)
            out, bn_cache = nn.batchnorm_forward(bn, act, mode=mode, return_cache=True)
            if keep:
                caches.append((h, pre, bn_cache))
            h = out
        return (h, caches) if keep else h

    def backward(self, grad_out: np.ndarray, caches) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        grads = {}
        g = grad_out
        for i in reversed(range(self.depth)):
            h_in, pre, bn_cache = caches[i]
            g, bn_grads = nn.batchnorm_backward(self.norms[i], bn_cache, g)
            g = g * (pre > 0)
            g, lin_grads = nn.linear_backward(self.linears[i], h_in, g)
            grads[f"g.{i}.weight"] = lin_grads["weight"]
            grads[f"g.{i}.bias"] = lin_grads["bias"]
            grads[f"g.{i}.gamma"] = bn_grads["gamma"]
            grads[f"g.{i}.beta"] = bn_grads["beta"]
        return g, grads


@dataclass
class Classifier:
    layer: LinearLayer

    @classmethod
    def init(cls, ES: int, K: int, rng: np.random.Generator) -> "Classifier":
        return cls(LinearLayer.init(ES, K, rng))

    @property
    def W(self) -> np.ndarray:
        return self.layer.weight

    @property
    def b(self) -> np.ndarray:
        return self.layer.bias

    @property
    def K(self) -> int:
        return self.layer.out_features

    def params(self) -> Dict[str, np.ndarray]:
        return {"C.weight": self.layer.weight, "C.bias": self.layer.bias}


def _pairs(f: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """All concatenations [f_b; z_n] in row order b * N + n."""
    B, N = f.shape[0], Z.shape[0]
    return np.concatenate([np.repeat(f, N, axis=0), np.tile(Z, (B, 1))], axis=1)


def _check_inputs(g: InterventionNet, f, Z) -> Tuple[np.ndarray, np.ndarray]:
    f = nn.as_matrix(f, "f")
    Z = Z.vectors if isinstance(Z, ConfounderDictionary) else nn.as_matrix(Z, "z")
    if Z.shape[0] < 1:
        raise ValueError("empty confounder dictionary")
    if f.shape[1] != g.ES or Z.shape[1] != g.ES:
        raise DimensionError(f"inputs must have length ES={g.ES}")
    return f, Z


def intervene(g: InterventionNet, f, z, mode: str = "eval") -> np.ndarray:
    """g([f; z]); 1-D inputs give a 1-D result, row-aligned batches otherwise."""
    single = np.ndim(f) == 1
    f = nn.as_matrix(f, "f")
    z = nn.as_matrix(z, "z")
    if f.shape[1] != g.ES or z.shape[1] != g.ES:
        raise DimensionError(f"inputs must have length ES={g.ES}")
    if z.shape[0] == 1 and f.shape[0] > 1:
        z = np.repeat(z, f.shape[0], axis=0)
    if z.shape[0] != f.shape[0]:
        raise DimensionError("f and z batches differ in length")
    out = g.forward(np.concatenate([f, z], axis=1), mode=mode)
    return out[0] if single else out


def intervened_outputs(g: InterventionNet, f, Z, mode: str = "eval") -> np.ndarray:
    """g(f_b, z_n) for every pair, shape (B, N, ES)."""
    f, Z = _check_inputs(g, f, Z)
    out = g.forward(_pairs(f, Z), mode=mode)
    return out.reshape(f.shape[0], Z.shape[0], g.ES)


def expected_intervention(g: InterventionNet, f, Z, mode: str = "eval") -> np.ndarray:
    single = np.ndim(f) == 1
    out = intervened_outputs(g, f, Z, mode).mean(axis=1)
    return out[0] if single else out


def classify(C: Classifier, feature) -> np.ndarray:
    single = np.ndim(feature) == 1
    x = nn.as_matrix(feature, "feature")
    if x.shape[1] != C.layer.in_features:
        raise DimensionError(f"feature must have length {C.layer.in_features}")
    out = nn.linear_forward(C.layer, x)
    return out[0] if single else out


def cosine_matrix(G: np.ndarray, T: np.ndarray):
    """Cosine similarities between rows of G (..., N, ES) and T (..., N, ES);
    returns (S[..., n, j], unit G, norms of G, unit T)."""
    g_norm = np.maximum(np.linalg.norm(G, axis=-1, keepdims=True), COS_EPS)
    t_hat = T / np.maximum(np.linalg.norm(T, axis=-1, keepdims=True), COS_EPS)
    g_hat = G / g_norm
    return g_hat @ np.swapaxes(t_hat, -1, -2), g_hat, g_norm, t_hat


def infonce_terms(G: np.ndarray, T: np.ndarray, tau: float):
    """InfoNCE over dictionary entries.

    ``G[..., n, :]`` is the intervened output for entry n, ``T[..., j, :]``
    the target for entry j; the positive for row n is target n and the
    negatives are the other targets of the same class. Returns the loss
    summed over n (one value per leading index) and dLoss/dG.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    S, g_hat, g_norm, t_hat = cosine_matrix(G, T)
    logits = S / tau
    logp = nn.log_softmax(logits, axis=-1)
    N = G.shape[-2]
    loss = -np.trace(logp, axis1=-2, axis2=-1)
    dlogits = (np.exp(logp) - np.eye(N)) / tau  # d loss / d S
    # dS[n, j]/dG[n] = (t_hat_j - S[n, j] * g_hat_n) / |G_n|
    grad = (dlogits @ t_hat - (dlogits * S).sum(axis=-1, keepdims=True) * g_hat) / g_norm
    return loss, grad


def l2_terms(G: np.ndarray, T: np.ndarray):
    """Mean over entries of squared Euclidean distance, and its gradient."""
    diff = G - T
    N = G.shape[-2]
    return (diff ** 2).sum(axis=(-2, -1)) / N, 2.0 * diff / N


@dataclass
class Objective:
    total: float
    loss_c: float  # mean over the batch
    loss_g: float  # mean over the batch
    grads: Dict[str, np.ndarray]
    logits: np.ndarray
    per_sample_c: np.ndarray
    per_sample_g: np.ndarray


def objective(g: InterventionNet, C: Classifier, f, labels, Z, F: Optional[np.ndarray],
              tau: float = 0.1, lam: float = 3.0, mode: str = "train",
              loss_g_kind: str = "infonce", grads: bool = True) -> Objective:
    """mean_b L_C + lam * mean_b L_g with gradients for every g and C parameter.

    With ``lam == 0`` the target matrix is not consulted (``F`` may be None).
    """
    f, Zv = _check_inputs(g, f, Z)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, N, ES = f.shape[0], Zv.shape[0], g.ES
    if labels.shape != (B,):
        raise DimensionError("one label per sample")
    if labels.min() < 0 or labels.max() >= C.K:
        raise ValueError(f"class ids must lie in [0, {C.K})")

    out, caches = g.forward(_pairs(f, Zv), mode=mode, keep=True)
    G = out.reshape(B, N, ES)
    E = G.mean(axis=1)
    logits = nn.linear_forward(C.layer, E)
    logp = nn.log_softmax(logits)
    per_c = -logp[np.arange(B), labels]

    use_g = lam != 0.0
    if use_g:
        if F is None:
            raise ValueError("target matrix required when lam != 0")
        if F.shape[1] != N or F.shape[2] != ES or F.shape[0] < C.K:
            raise DimensionError(f"target matrix shape {F.shape} does not match K={C.K}, N={N}, ES={ES}")
        T = F[labels]
        if loss_g_kind == "infonce":
            per_g, dG_g = infonce_terms(G, T, tau)
        elif loss_g_kind == "l2":
            per_g, dG_g = l2_terms(G, T)
        else:
            raise ValueError(f"unknown loss_g_kind {loss_g_kind!r}")
    else:
        per_g = np.zeros(B)
    loss_c = float(per_c.mean())
    loss_g = float(per_g.mean())
    total = loss_c + lam * loss_g

    result = {}
    if grads:
        dlogits = (np.exp(logp) - np.eye(C.K)[labels]) / B
        dE, c_grads = nn.linear_backward(C.layer, E, dlogits)
        dG = np.repeat(dE[:, None, :] / N, N, axis=1)
        if use_g:
            dG = dG + (lam / B) * dG_g
        _, result = g.backward(dG.reshape(B * N, ES), caches)
        result["C.weight"] = c_grads["weight"]
        result["C.bias"] = c_grads["bias"]
    return Objective(total, loss_c, loss_g, result, logits, per_c, per_g)


def infonce_loss(g: InterventionNet, f, k: int, Z, F: np.ndarray, tau: float = 0.1,
                 mode: str = "eval") -> Tuple[float, Dict[str, np.ndarray]]:
    """L_g for one embedding of class k, with gradients w.r.t. g's parameters."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    f, Zv = _check_inputs(g, f, Z)
    out, caches = g.forward(_pairs(f, Zv), mode=mode, keep=True)
    G = out.reshape(1, Zv.shape[0], g.ES)
    loss, dG = infonce_terms(G, F[[k]], tau)
    _, grads = g.backward(dG.reshape(-1, g.ES), caches)
    return float(loss[0]), grads


def l2_intervention_loss(g: InterventionNet, f, k: int, Z, F: np.ndarray,
                         mode: str = "eval") -> Tuple[float, Dict[str, np.ndarray]]:
    f, Zv = _check_inputs(g, f, Z)
    out, caches = g.forward(_pairs(f, Zv), mode=mode, keep=True)
    G = out.reshape(1, Zv.shape[0], g.ES)
    loss, dG = l2_terms(G, F[[k]])
    _, grads = g.backward(dG.reshape(-1, g.ES), caches)
    return float(loss[0]), grads


def ce_loss(C: Classifier, g: InterventionNet, f, k: int, Z,
            mode: str = "eval") -> Tuple[float, Dict[str, np.ndarray]]:
    """-log softmax(C(mean_n g(f, z_n)))[k] with gradients for g and C."""
    if not 0 <= k < C.K:
        raise ValueError(f"class id {k} outside [0, {C.K})")
    res = objective(g, C, f, [k], Z, None, lam=0.0, mode=mode)
    return res.loss_c, res.grads
