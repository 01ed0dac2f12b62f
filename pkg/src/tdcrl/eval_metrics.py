"""Inference over image embeddings and the invariance diagnostics: top-1
accuracy, Gaussian-kernel MMD between domains, and a linear style probe."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from .encoder_io import EmbeddingTable, write_table
from .nn_core import DimensionError, log_softmax, softmax
from .trainer import ModelState


def _vectors(images) -> np.ndarray:
    if isinstance(images, EmbeddingTable):
        images = images.vectors
    return np.asarray(images, dtype=np.float64)


def predict(state: ModelState, images) -> np.ndarray:
    """argmax of softmax(W (1/N) sum_n g(f, z_n) + b); np.argmax keeps the
    lowest index on ties."""
    X = _vectors(images)
    if X.ndim != 2 or X.shape[1] != state.g.ES:
        raise DimensionError(f"image vectors must have length {state.g.ES}")
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(softmax(state.logits(X)), axis=1)


def top1_accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise DimensionError("predictions and labels differ in length")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(preds == labels))


def _sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d, 0.0)


def median_bandwidth(A: np.ndarray, B: np.ndarray) -> float:
    P = np.concatenate([A, B])
    d = np.sqrt(_sq_dists(P, P)[np.triu_indices(len(P), k=1)])
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def mmd2_unbiased(A, B, bandwidth: Optional[float] = None) -> float:
    """Unbiased MMD^2 with k(x, y) = exp(-|x - y|^2 / (2 h^2)); may be negative."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    m, n = len(A), len(B)
    if m < 2 or n < 2:
        raise ValueError("the unbiased estimator needs at least 2 samples per set")
    if A.shape[1] != B.shape[1]:
        raise DimensionError("sets differ in dimension")
    h = median_bandwidth(A, B) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    k = lambda d: np.exp(-d / (2.0 * h * h))
    kaa = k(_sq_dists(A, A))
    kbb = k(_sq_dists(B, B))
    kab = k(_sq_dists(A, B))
    return float((kaa.sum() - np.trace(kaa)) / (m * (m - 1))
                 + (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
                 - 2.0 * kab.mean())


def mmd(A, B, bandwidth: Optional[float] = None) -> float:
    return float(np.sqrt(max(mmd2_unbiased(A, B, bandwidth), 0.0)))


def pairwise_mmd(features: np.ndarray, domains: np.ndarray,
                 bandwidth: Optional[float] = None) -> Dict[str, float]:
    out = {}
    ids = sorted(set(int(d) for d in domains))
    for a, b in itertools.combinations(ids, 2):
        out[f"{a}-{b}"] = mmd(features[domains == a], features[domains == b], bandwidth)
    return out


def style_probe(features, domains, epochs: int = 200, lr: float = 0.1, seed: int = 0) -> float:
    """Final training cross-entropy of a softmax regression predicting the
    domain from (per-feature standardized) features, trained full-batch."""
    X = np.asarray(features, dtype=np.float64)
    labels, y = np.unique(np.asarray(domains), return_inverse=True)
    if len(labels) < 2:
        raise ValueError("style probe needs at least two domains")
    sd = X.std(axis=0)
    X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    n, d = X.shape
    c = len(labels)
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 0.01, size=(d, c))
    b = np.zeros(c)
    onehot = np.eye(c)[y]
    for _ in range(epochs):
        p = softmax(X @ W + b)
        g = (p - onehot) / n
        W -= lr * (X.T @ g)
        b -= lr * g.sum(axis=0)
    return float(-log_softmax(X @ W + b)[np.arange(n), y].mean())


@dataclass
class EvalReport:
    per_domain_accuracy: Dict[str, float]
    mean_accuracy: float
    mmd_pre: Dict[str, float] = field(default_factory=dict)
    mmd_post: Dict[str, float] = field(default_factory=dict)
    probe_ce_pre: Optional[float] = None
    probe_ce_post: Optional[float] = None

    @property
    def mean_mmd_pre(self) -> float:
        return float(np.mean(list(self.mmd_pre.values()))) if self.mmd_pre else float("nan")

    @property
    def mean_mmd_post(self) -> float:
        return float(np.mean(list(self.mmd_post.values()))) if self.mmd_post else float("nan")

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["mean_mmd_pre"] = self.mean_mmd_pre if self.mmd_pre else None
        d["mean_mmd_post"] = self.mean_mmd_post if self.mmd_post else None
        return d


def evaluate(state: ModelState, images: EmbeddingTable, diagnostics: bool = True,
             bandwidth: Optional[float] = None, probe_epochs: int = 200,
             probe_lr: float = 0.1, seed: int = 0) -> EvalReport:
    if len(images) == 0:
        raise ValueError("no images to evaluate")
    X = images.vectors.astype(np.float64)
    preds = predict(state, X)
    per_domain = {}
    for d in sorted(set(images.domain_ids.tolist())):
        mask = images.domain_ids == d
        name = images.domain_labels[d] if images.domain_labels else str(d)
        per_domain[name] = top1_accuracy(preds[mask], images.class_ids[mask])
    report = EvalReport(per_domain, top1_accuracy(preds, images.class_ids))
    if diagnostics and len(per_domain) >= 2:
        post = state.features(X)
        report.mmd_pre = pairwise_mmd(X, images.domain_ids, bandwidth)
        report.mmd_post = pairwise_mmd(post, images.domain_ids, bandwidth)
        report.probe_ce_pre = style_probe(X, images.domain_ids, probe_epochs, probe_lr, seed)
        report.probe_ce_post = style_probe(post, images.domain_ids, probe_epochs, probe_lr, seed)
    return report


def export_features(state: ModelState, images: EmbeddingTable, path, stage: str = "intervened") -> EmbeddingTable:
    if stage == "raw":
        out = images
    elif stage == "intervened":
        feats = state.features(images.vectors.astype(np.float64)) if len(images) else np.zeros((0, state.g.ES))
        out = EmbeddingTable(feats, images.class_ids, images.domain_ids,
                             list(images.class_labels), list(images.domain_labels), state.g.ES)
    else:
        raise ValueError(f"stage must be 'raw' or 'intervened', got {stage!r}")
    write_table(out, path, {"stage": stage})
    return out
