"""Desk-scale synthetic benchmark: a seeded SyntheticEncoder, a training style
basis, and image tables for the training styles and for held-out styles that
appear neither in the mixup basis nor in the confounder dictionary.

Held-out styles are random directions inside the span of the training styles,
rescaled to ``heldout_scale`` times the training RMS norm: unseen mixtures at
an unseen intensity, rather than arbitrary new directions the style words say
nothing about."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from .augment import DOMAIN_WORDS, StyleBasis
from .config import BenchmarkConfig, EncoderConfig, substream
from .encoder_io import (
    DTYPE_F64, EmbeddingTable, FormatError, SyntheticEncoder, read_tdeb, write_table, write_tdeb,
)

ENCODER_FILE = "encoder.tdeb"
STYLES_FILE = "styles.tdeb"
TRAIN_IMAGES = "train_images.tdeb"
HELDOUT_IMAGES = "heldout_images.tdeb"

PACS_CLASSES = ("dog", "elephant", "giraffe", "guitar", "horse", "house", "person")


def class_labels(K: int) -> List[str]:
    if K == len(PACS_CLASSES):
        return list(PACS_CLASSES)
    return [f"class-{k}" for k in range(K)]


def domain_words(n: int) -> List[str]:
    words = list(DOMAIN_WORDS)
    words += [f"style-{i}" for i in range(len(words), n)]
    return words[:n]


@dataclass
class Benchmark:
    encoder: SyntheticEncoder
    basis: StyleBasis  # training styles only
    words: List[str]  # training words followed by held-out words
    classes: List[str]
    n_train: int

    @property
    def heldout_ids(self) -> List[int]:
        return list(range(self.n_train, len(self.words)))

    @property
    def train_ids(self) -> List[int]:
        return list(range(self.n_train))


def make_benchmark(seed: int, enc_cfg: EncoderConfig, bench_cfg: BenchmarkConfig) -> Benchmark:
    rng = substream(seed, "benchmark")
    total = bench_cfg.train_styles + bench_cfg.heldout_styles
    vectors = rng.standard_normal((total, enc_cfg.W)) / np.sqrt(enc_cfg.W)
    vectors[bench_cfg.train_styles:] = heldout_vectors(
        vectors[:bench_cfg.train_styles], bench_cfg.heldout_styles,
        bench_cfg.heldout_scale, substream(seed, "held"))
    words = domain_words(total)
    enc = SyntheticEncoder.from_seed(
        seed, enc_cfg.K, enc_cfg.ES, enc_cfg.W, vectors,
        class_scale=enc_cfg.class_scale, style_scale=enc_cfg.style_scale,
        text_noise=enc_cfg.text_noise, image_noise=enc_cfg.image_noise,
        gap_scale=enc_cfg.gap_scale,
    )
    basis = StyleBasis(vectors[:bench_cfg.train_styles], words[:bench_cfg.train_styles])
    return Benchmark(enc, basis, words, class_labels(enc_cfg.K), bench_cfg.train_styles)


def heldout_vectors(train: np.ndarray, n: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    rms = np.sqrt(np.mean(np.sum(train ** 2, axis=1)))
    out = np.empty((n, train.shape[1]))
    for i in range(n):
        v = rng.standard_normal(len(train)) @ train
        out[i] = v / np.linalg.norm(v) * rms * scale
    return out


def image_table(bench: Benchmark, domains: List[int], per_cell: int) -> EmbeddingTable:
    """``per_cell`` images for every (class, domain); instance seeds 0..per_cell-1."""
    enc = bench.encoder
    K = enc.num_classes
    rows = len(domains) * K * per_cell
    vectors = np.empty((rows, enc.dim), dtype=np.float32)
    cls = np.empty(rows, dtype=np.int64)
    dom = np.empty(rows, dtype=np.int64)
    i = 0
    for d in domains:
        for k in range(K):
            for s in range(per_cell):
                vectors[i] = enc.image_encode(k, d, s)
                cls[i] = k
                dom[i] = d
                i += 1
    return EmbeddingTable(vectors, cls, dom, list(bench.classes), list(bench.words), enc.dim)


def save_benchmark(bench: Benchmark, out, per_cell: int) -> Dict[str, Path]:
    """Write encoder, style basis (every domain word vector) and the two image
    tables into ``out``; returns the paths by role."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    enc = bench.encoder
    flat = np.concatenate([enc.class_codes.ravel(), enc.style_map.ravel(), enc.modality_gap])
    write_tdeb(out / ENCODER_FILE, flat.reshape(-1, 1), {
        "kind": "synthetic-encoder", "K": enc.num_classes, "ES": enc.dim, "W": enc.word_dim,
        "text_noise": enc.text_noise, "image_noise": enc.image_noise, "seed": enc.seed,
        "classes": list(bench.classes),
    }, DTYPE_F64)
    write_tdeb(out / STYLES_FILE, enc.domain_vectors, {
        "kind": "style-basis", "words": list(bench.words), "n_train": bench.n_train,
    }, DTYPE_F64)
    paths = {"encoder": out / ENCODER_FILE, "styles": out / STYLES_FILE,
             "train": out / TRAIN_IMAGES, "heldout": out / HELDOUT_IMAGES}
    write_table(image_table(bench, bench.train_ids, per_cell), paths["train"], {"split": "train"})
    write_table(image_table(bench, bench.heldout_ids, per_cell), paths["heldout"], {"split": "heldout"})
    return paths


def load_benchmark(directory) -> Benchmark:
    directory = Path(directory)
    flat, meta, _ = read_tdeb(directory / ENCODER_FILE)
    vectors, smeta, _ = read_tdeb(directory / STYLES_FILE)
    if meta.get("kind") != "synthetic-encoder" or smeta.get("kind") != "style-basis":
        raise FormatError("benchmark files have the wrong kind", 16)
    try:
        K, ES, W = meta["K"], meta["ES"], meta["W"]
        flat = flat.reshape(-1)
        if flat.size != K * ES + ES * W + ES or vectors.shape[1:] != (W,):
            raise FormatError("encoder tensor sizes disagree with the header", 16)
        enc = SyntheticEncoder(flat[:K * ES].reshape(K, ES), flat[K * ES:K * ES + ES * W].reshape(ES, W),
                               vectors, meta["text_noise"], meta["image_noise"],
                               flat[K * ES + ES * W:], meta["seed"])
        words, n_train = list(smeta["words"]), int(smeta["n_train"])
        basis = StyleBasis(vectors[:n_train], words[:n_train])
        return Benchmark(enc, basis, words, list(meta["classes"]), n_train)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"inconsistent benchmark files: {exc}", 16) from None
