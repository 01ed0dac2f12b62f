"""Training loop: per-epoch style regeneration, shuffled mini-batches,
SGD on mean(L_C) + lam * mean(L_g) with a per-epoch cosine schedule, the
no-intervention-loss ablation, and self-contained checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import nn_core as nn
from .augment import StyleBasis, generate_epoch_styles
from .causal_core import (
    Classifier, ConfounderDictionary, InterventionNet, build_confounder_dictionary,
    build_target_matrix, intervened_outputs, objective,
)
from .causal_oracle import nwgm_gap_batch
from .config import ConfigError, TrainConfig, substream
from .encoder_io import DTYPE_F64, Encoder, EmbeddingTable, FormatError, build_training_set, read_tdeb, write_tdeb
from .nn_core import BatchNormLayer, LinearLayer, LrSchedule, cosine_lr

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "tdcrl-checkpoint"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss_c: float, loss_g: float):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: L_C={loss_c}, L_g={loss_g}")
        self.epoch, self.batch = epoch, batch
        self.loss_c, self.loss_g = loss_c, loss_g


@dataclass
class ModelState:
    g: InterventionNet
    C: Classifier
    dictionary: ConfounderDictionary
    targets: Optional[np.ndarray] = None  # (K, N, ES)
    step: int = 0
    epoch: int = 0
    rng_state: Dict[str, Any] = field(default_factory=dict)

    def params(self) -> Dict[str, np.ndarray]:
        return {**self.g.params(), **self.C.params()}

    def features(self, vectors, mode: str = "eval") -> np.ndarray:
        """Expected intervention (1/N) sum_n g(f, z_n) for each row."""
        return intervened_outputs(self.g, vectors, self.dictionary, mode).mean(axis=1)

    def logits(self, vectors) -> np.ndarray:
        return nn.linear_forward(self.C.layer, self.features(vectors))


def init_state(cfg: TrainConfig, enc: Encoder, basis: StyleBasis) -> ModelState:
    if cfg.N > basis.D:
        raise ConfigError(f"N={cfg.N} exceeds the number of domain words D={basis.D}")
    rng = substream(cfg.seed, "init")
    g = InterventionNet.init(enc.dim, cfg.layers, rng, cfg.bn_momentum, cfg.bn_epsilon)
    C = Classifier.init(enc.dim, enc.num_classes, rng)
    Z = build_confounder_dictionary(enc, basis, cfg.N)
    F = build_target_matrix(enc, basis, cfg.N, enc.num_classes)
    return ModelState(g, C, Z, F)


def _batches(n: int, size: int, min_rows: int) -> List[slice]:
    out = [slice(i, min(i + size, n)) for i in range(0, n, size)]
    # a trailing batch too small for train-mode BatchNorm joins its predecessor
    if len(out) > 1 and (out[-1].stop - out[-1].start) < min_rows:
        out[-2:] = [slice(out[-2].start, out[-1].stop)]
    return out


def style_digest(styles) -> str:
    h = hashlib.sha256()
    for s in styles:
        h.update(np.ascontiguousarray(s.vector, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def mean_nwgm_gap(state: ModelState, vectors) -> float:
    """Mean over ``vectors`` of the inference-time (eval-mode) NWGM gap."""
    G = intervened_outputs(state.g, np.asarray(vectors, dtype=np.float64), state.dictionary, "eval")
    return float(np.mean(nwgm_gap_batch(state.C.W, state.C.b, G)))


def train(cfg: TrainConfig, enc: Encoder, basis: StyleBasis,
          eval_images: Optional[EmbeddingTable] = None,
          gap_probe: Optional[np.ndarray] = None) -> Tuple[ModelState, List[Dict[str, Any]]]:
    """Run ``cfg.epochs`` epochs; returns the final state and one metrics
    record per epoch. ``cfg.mode == "no_ci"`` trains with lam forced to 0.

    The NWGM gap is measured each epoch on ``gap_probe`` (defaults to the
    eval images, else the epoch's training embeddings).
    """
    no_ci = cfg.mode == "no_ci"
    lam = 0.0 if no_ci else cfg.lam
    state = init_state(cfg, enc, basis)
    aug_rng = substream(cfg.seed, "augment")
    shuffle_rng = substream(cfg.seed, "shuffle")
    sched = LrSchedule(cfg.lr0, cfg.epochs, cfg.eta_min)
    K = enc.num_classes
    history: List[Dict[str, Any]] = []

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, sched)
        styles = generate_epoch_styles(basis, cfg.aug.M, cfg.aug, aug_rng)
        data = build_training_set(enc, styles, K)
        X = data.vectors.astype(np.float64)
        y = data.class_ids
        order = shuffle_rng.permutation(len(data))
        sum_c = sum_g = 0.0
        for b, sl in enumerate(_batches(len(order), cfg.batch_size, math.ceil(2 / cfg.N))):
            idx = order[sl]
            res = objective(state.g, state.C, X[idx], y[idx], state.dictionary, state.targets,
                            tau=cfg.tau, lam=lam, mode="train", loss_g_kind=cfg.loss_g_kind)
            if not (np.isfinite(res.loss_c) and np.isfinite(res.loss_g)):
                raise NonFiniteLossError(epoch, b, res.loss_c, res.loss_g)
            nn.sgd_step(state.params(), res.grads, lr)
            state.step += 1
            sum_c += res.loss_c * len(idx)
            sum_g += res.loss_g * len(idx)
        state.epoch = epoch + 1

        record: Dict[str, Any] = {"epoch": epoch + 1, "lr": lr, "loss_c": sum_c / len(order)}
        if not no_ci:
            record["loss_g"] = sum_g / len(order)
        if eval_images is not None and len(eval_images):
            preds = np.argmax(state.logits(eval_images.vectors.astype(np.float64)), axis=1)
            record["eval_acc"] = float(np.mean(preds == eval_images.class_ids))
        probe = gap_probe
        if probe is None:
            probe = eval_images.vectors if eval_images is not None and len(eval_images) else X
        record["nwgm_gap"] = mean_nwgm_gap(state, probe)
        record["style_digest"] = style_digest(styles)
        log.info("epoch %d lr %.5f L_C %.4f%s", epoch + 1, lr, record["loss_c"],
                 f" L_g {record['loss_g']:.4f}" if "loss_g" in record else "")
        history.append(record)

    state.rng_state = {"augment": aug_rng.bit_generator.state, "shuffle": shuffle_rng.bit_generator.state}
    return state, history


def train_no_ci(cfg: TrainConfig, enc: Encoder, basis: StyleBasis, **kwargs):
    return train(dataclasses.replace(cfg, mode="no_ci", lam=0.0), enc, basis, **kwargs)


# ---- checkpoints -------------------------------------------------------------

def _tensor_entries(state: ModelState):
    for i, (lin, bn) in enumerate(zip(state.g.linears, state.g.norms)):
        yield f"g.{i}.weight", "linear.weight", i, lin.weight
        yield f"g.{i}.bias", "linear.bias", i, lin.bias
        yield f"g.{i}.gamma", "bn.gamma", i, bn.gamma
        yield f"g.{i}.beta", "bn.beta", i, bn.beta
        yield f"g.{i}.running_mean", "bn.running_mean", i, bn.running_mean
        yield f"g.{i}.running_var", "bn.running_var", i, bn.running_var
    yield "C.weight", "classifier.weight", -1, state.C.W
    yield "C.bias", "classifier.bias", -1, state.C.b
    yield "Z", "dictionary", -1, state.dictionary.vectors
    if state.targets is not None:
        yield "F", "targets", -1, state.targets


def save_checkpoint(state: ModelState, path, config: Optional[Dict[str, Any]] = None) -> None:
    """Float64 TDEB: the payload is every tensor flattened into one column."""
    tensors, chunks, offset = [], [], 0
    for name, role, layer, arr in _tensor_entries(state):
        tensors.append({"name": name, "role": role, "layer": layer,
                        "shape": list(arr.shape), "offset": offset})
        chunks.append(np.asarray(arr, dtype=np.float64).reshape(-1))
        offset += arr.size
    bn = state.g.norms[0]
    meta = {
        "kind": CHECKPOINT_KIND,
        "layers": state.g.depth,
        "ES": state.g.ES,
        "K": state.C.K,
        "bn_momentum": bn.momentum,
        "bn_epsilon": bn.epsilon,
        "dictionary_words": list(state.dictionary.words),
        "step": state.step,
        "epoch": state.epoch,
        "rng_state": state.rng_state,
        "config": config or {},
        "tensors": tensors,
    }
    payload = np.concatenate(chunks) if chunks else np.zeros(0)
    write_tdeb(path, payload.reshape(-1, 1), meta, DTYPE_F64)


def load_checkpoint(path) -> ModelState:
    matrix, meta, dtype = read_tdeb(path)
    if meta.get("kind") != CHECKPOINT_KIND or dtype != DTYPE_F64:
        raise FormatError("not a checkpoint file", 5)
    flat = matrix.reshape(-1)
    tensors = {}
    for t in meta["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        if t["offset"] + size > flat.size:
            raise FormatError(f"tensor {t['name']} runs past the payload", 16 + 8 * flat.size)
        tensors[t["name"]] = flat[t["offset"]:t["offset"] + size].reshape(t["shape"]).copy()
    try:
        L, ES, K = meta["layers"], meta["ES"], meta["K"]
        linears, norms = [], []
        for i in range(L):
            linears.append(LinearLayer(tensors[f"g.{i}.weight"], tensors[f"g.{i}.bias"]))
            norms.append(BatchNormLayer(tensors[f"g.{i}.gamma"], tensors[f"g.{i}.beta"],
                                        tensors[f"g.{i}.running_mean"], tensors[f"g.{i}.running_var"],
                                        meta["bn_momentum"], meta["bn_epsilon"], "eval"))
        g = InterventionNet(linears, norms)
        C = Classifier(LinearLayer(tensors["C.weight"], tensors["C.bias"]))
        Z = ConfounderDictionary(tensors["Z"], list(meta["dictionary_words"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}", 16) from None
    if g.ES != ES or C.K != K or C.layer.in_features != ES or Z.vectors.shape[1] != ES:
        raise FormatError("checkpoint tensor shapes disagree with its header", 16)
    return ModelState(g, C, Z, tensors.get("F"), meta.get("step", 0), meta.get("epoch", 0),
                      meta.get("rng_state", {}))
