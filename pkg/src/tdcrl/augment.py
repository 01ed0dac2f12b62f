"""Style word-vector augmentation: Beta-weighted mixup of the base domain
word vectors plus isotropic Gaussian noise, regenerated once per epoch."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .nn_core import DimensionError

# Predefined domain words, in the order the confounder dictionary consumes them.
DOMAIN_WORDS = (
    "sketch", "cartoon", "photo", "surrealism", "minimalist", "retro",
    "pixel-art", "collage", "pointillism", "stained-glass", "illustration",
    "fantasy", "landscape",
)


@dataclass
class StyleBasis:
    vectors: np.ndarray  # (D, W)
    words: List[str]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError("style basis needs at least one vector")
        if len(self.words) != self.vectors.shape[0]:
            raise ValueError("one word per basis vector")
        if len(set(self.words)) != len(self.words):
            raise ValueError("domain words must be unique")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("basis vectors must be finite")

    @property
    def D(self) -> int:
        return self.vectors.shape[0]

    @property
    def W(self) -> int:
        return self.vectors.shape[1]

    def rms_norm(self) -> float:
        return float(np.sqrt(np.mean(np.sum(self.vectors ** 2, axis=1))))


@dataclass
class StyleWordVector:
    vector: np.ndarray
    weights: np.ndarray
    noise_seed: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("style vector must be finite")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise ValueError("mixup weights must sum to 1")


@dataclass
class AugmentConfig:
    M: int = 80
    concentration: float = 0.5
    noise_sigma: float = 0.01  # relative to the RMS norm of the basis
    random_sampling_fraction: float = 0.0


def sample_mix_weights(D: int, concentration: float, rng: np.random.Generator) -> np.ndarray:
    if D < 1:
        raise ValueError("need D >= 1")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    w = rng.beta(concentration, concentration, size=D)
    total = w.sum()
    if total <= 0.0:
        # every Beta draw underflowed; fall back to a uniformly chosen vertex
        w = np.zeros(D)
        w[rng.integers(D)] = 1.0
        return w
    return w / total


def make_style_vector(basis: StyleBasis, weights, noise_sigma: float,
                      rng: np.random.Generator) -> StyleWordVector:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (basis.D,):
        raise DimensionError(f"expected {basis.D} weights, got shape {weights.shape}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    seed = int(rng.integers(2 ** 63))
    s = weights @ basis.vectors
    if noise_sigma > 0:
        s = s + np.random.default_rng(seed).normal(0.0, noise_sigma, size=basis.W)
    return StyleWordVector(s, weights, seed)


def generate_epoch_styles(basis: StyleBasis, M: int, cfg: AugmentConfig,
                          rng: np.random.Generator) -> List[StyleWordVector]:
    if M < 1:
        raise ValueError("need M >= 1")
    sigma = cfg.noise_sigma * basis.rms_norm()
    styles = []
    for _ in range(M):
        if cfg.random_sampling_fraction > 0 and rng.random() < cfg.random_sampling_fraction:
            w = np.zeros(basis.D)
            w[rng.integers(basis.D)] = 1.0
        else:
            w = sample_mix_weights(basis.D, cfg.concentration, rng)
        styles.append(make_style_vector(basis, w, sigma, rng))
    return styles
