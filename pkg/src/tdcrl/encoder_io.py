"""Encoders that map (class, style) text prompts and images to unit embeddings,
the deterministic synthetic stand-in for a vision-language model, and the
TDEB binary container used for every tensor file.

TDEB layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"TDEB"
    4       1     version (1)
    5       1     dtype (1 = float32, 2 = float64)
    6       2     reserved, zero
    8       4     rows   (uint32)
    12      4     dim    (uint32)
    16      r*d*s payload, row-major
    ...     4     metadata length L (uint32)
    ...     L     metadata, UTF-8 JSON
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .augment import StyleWordVector
from .nn_core import DimensionError

MAGIC = b"TDEB"
VERSION = 1
DTYPE_F32 = 1
DTYPE_F64 = 2
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}
_HEADER = struct.Struct("<4sBBHII")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_tdeb(matrix: np.ndarray, meta: Dict[str, Any], dtype: int = DTYPE_F32) -> bytes:
    if dtype not in _DTYPES:
        raise ValueError(f"unknown dtype code {dtype}")
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise DimensionError(f"TDEB payload must be 2-D, got {m.shape}")
    rows, dim = m.shape
    payload = np.ascontiguousarray(m, dtype=_DTYPES[dtype]).tobytes()
    doc = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([
        _HEADER.pack(MAGIC, VERSION, dtype, 0, rows, dim),
        payload,
        struct.pack("<I", len(doc)),
        doc,
    ])


def decode_tdeb(buf: bytes) -> Tuple[np.ndarray, Dict[str, Any], int]:
    """Returns (matrix, metadata, dtype code). Raises FormatError on any defect."""
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, dtype, reserved, rows, dim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype code {dtype}", 5)
    if reserved != 0:
        raise FormatError("reserved bytes must be zero", 6)
    off = _HEADER.size
    nbytes = rows * dim * _DTYPES[dtype].itemsize
    if len(buf) < off + nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes", len(buf))
    matrix = np.frombuffer(buf, dtype=_DTYPES[dtype], count=rows * dim, offset=off)
    matrix = matrix.reshape(rows, dim).copy()
    off += nbytes
    if len(buf) < off + 4:
        raise FormatError("missing metadata length", len(buf))
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) < off + mlen:
        raise FormatError(f"truncated metadata: need {mlen} bytes", len(buf))
    if len(buf) > off + mlen:
        raise FormatError("trailing bytes after metadata", off + mlen)
    try:
        meta = json.loads(buf[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid JSON: {exc}", off) from None
    if not isinstance(meta, dict):
        raise FormatError("metadata must be a JSON object", off)
    return matrix, meta, dtype


def write_tdeb(path, matrix, meta, dtype: int = DTYPE_F32) -> None:
    data = encode_tdeb(matrix, meta, dtype)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_tdeb(path) -> Tuple[np.ndarray, Dict[str, Any], int]:
    with open(path, "rb") as fh:
        return decode_tdeb(fh.read())


@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # (rows, ES) float32
    class_ids: np.ndarray
    domain_ids: np.ndarray
    class_labels: List[str] = field(default_factory=list)
    domain_labels: List[str] = field(default_factory=list)
    dim: Optional[int] = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            if self.dim is None:
                raise DimensionError("dim is required when vectors are not 2-D")
            self.vectors = self.vectors.reshape(self.vectors.size // max(self.dim, 1), self.dim)
        if self.dim is None:
            self.dim = self.vectors.shape[1]
        elif self.vectors.shape[1] != self.dim:
            raise DimensionError(f"vectors have width {self.vectors.shape[1]}, table dim {self.dim}")
        n = self.vectors.shape[0]
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64).reshape(-1)
        if self.class_ids.shape != (n,) or self.domain_ids.shape != (n,):
            raise DimensionError("one class id and one domain id per row")
        if self.class_labels and n and not (0 <= self.class_ids.min() and self.class_ids.max() < len(self.class_labels)):
            raise ValueError("class id outside the class label dictionary")
        if self.domain_labels and n and not (0 <= self.domain_ids.min() and self.domain_ids.max() < len(self.domain_labels)):
            raise ValueError("domain id outside the domain label dictionary")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def subset(self, mask) -> "EmbeddingTable":
        return EmbeddingTable(self.vectors[mask], self.class_ids[mask], self.domain_ids[mask],
                              list(self.class_labels), list(self.domain_labels), self.dim)

    @staticmethod
    def concat(tables: Sequence["EmbeddingTable"]) -> "EmbeddingTable":
        """Stack tables that share a class dictionary; domain ids are remapped
        onto the union of the domain label lists."""
        if not tables:
            raise ValueError("nothing to concatenate")
        domains: List[str] = []
        ids = []
        for t in tables:
            remap = []
            for i, label in enumerate(t.domain_labels or []):
                if label not in domains:
                    domains.append(label)
                remap.append(domains.index(label))
            ids.append(np.asarray(remap, dtype=np.int64)[t.domain_ids] if remap else t.domain_ids)
        return EmbeddingTable(
            np.concatenate([t.vectors for t in tables]),
            np.concatenate([t.class_ids for t in tables]),
            np.concatenate(ids),
            list(tables[0].class_labels), domains, tables[0].dim,
        )


def write_table(table: EmbeddingTable, path, extra: Optional[Dict[str, Any]] = None) -> None:
    meta = {
        "kind": "embeddings",
        "class_labels": list(table.class_labels),
        "domain_labels": list(table.domain_labels),
        "rows": [[int(c), int(d)] for c, d in zip(table.class_ids, table.domain_ids)],
    }
    if extra:
        meta.update(extra)
    write_tdeb(path, table.vectors.reshape(len(table), table.dim), meta, DTYPE_F32)


def read_table(path) -> EmbeddingTable:
    matrix, meta, dtype = read_tdeb(path)
    if dtype != DTYPE_F32:
        raise FormatError("embedding tables must hold float32", 5)
    rows = meta.get("rows")
    if not isinstance(rows, list) or len(rows) != matrix.shape[0]:
        raise FormatError("metadata 'rows' missing or wrong length", 16 + matrix.nbytes)
    ids = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    return EmbeddingTable(matrix, ids[:, 0], ids[:, 1],
                          list(meta.get("class_labels", [])),
                          list(meta.get("domain_labels", [])), matrix.shape[1])


def normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


class Encoder:
    """What the pipeline needs from a shared text/image embedding model.

    ``text_encode(None, s)`` encodes the class-agnostic prompt used for the
    confounder dictionary.
    """

    dim: int
    num_classes: int

    def text_encode(self, k: Optional[int], style) -> np.ndarray:
        raise NotImplementedError

    def image_encode(self, k: int, d: int, instance_seed: int) -> np.ndarray:
        raise NotImplementedError


def _style_array(style) -> np.ndarray:
    if isinstance(style, StyleWordVector):
        style = style.vector
    return np.asarray(style, dtype=np.float64)


@dataclass
class SyntheticEncoder(Encoder):
    class_codes: np.ndarray  # (K, ES)
    style_map: np.ndarray  # (ES, W)
    domain_vectors: np.ndarray  # (D_total, W) word vectors of every image domain
    text_noise: float = 0.0
    image_noise: float = 0.0
    modality_gap: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        self.class_codes = np.asarray(self.class_codes, dtype=np.float64)
        self.style_map = np.asarray(self.style_map, dtype=np.float64)
        self.domain_vectors = np.asarray(self.domain_vectors, dtype=np.float64).reshape(-1, self.style_map.shape[1])
        if self.modality_gap is None:
            self.modality_gap = np.zeros(self.dim)
        self.modality_gap = np.asarray(self.modality_gap, dtype=np.float64)
        if self.style_map.shape[0] != self.dim or self.modality_gap.shape != (self.dim,):
            raise DimensionError("encoder shapes disagree on the embedding size")
        if self.text_noise < 0 or self.image_noise < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def dim(self) -> int:
        return self.class_codes.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_codes.shape[0]

    @property
    def word_dim(self) -> int:
        return self.style_map.shape[1]

    @classmethod
    def from_seed(cls, seed: int, K: int, ES: int, W: int, domain_vectors,
                  class_scale: float = 1.0, style_scale: float = 1.0,
                  text_noise: float = 0.0, image_noise: float = 0.0,
                  gap_scale: float = 0.0) -> "SyntheticEncoder":
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x454E43,)))
        A = rng.standard_normal((K, ES)) * (class_scale / np.sqrt(ES))
        B = rng.standard_normal((ES, W)) * (style_scale / np.sqrt(ES))
        gap = rng.standard_normal(ES)
        gap = gap / np.linalg.norm(gap) * gap_scale
        return cls(A, B, domain_vectors, text_noise, image_noise, gap, seed)

    def _pseudo_noise(self, k: Optional[int], s: np.ndarray) -> np.ndarray:
        h = hashlib.blake2b(digest_size=16)
        h.update(struct.pack("<qq", self.seed, -1 if k is None else k))
        h.update(np.ascontiguousarray(s, dtype="<f8").tobytes())
        return np.random.default_rng(int.from_bytes(h.digest(), "little")).standard_normal(self.dim)

    def _class_code(self, k: Optional[int]) -> np.ndarray:
        if k is None:
            return np.zeros(self.dim)
        if not 0 <= k < self.num_classes:
            raise ValueError(f"class id {k} outside [0, {self.num_classes})")
        return self.class_codes[k]

    def text_encode(self, k: Optional[int], style) -> np.ndarray:
        s = _style_array(style)
        if s.shape != (self.word_dim,):
            raise DimensionError(f"style vector must have length {self.word_dim}")
        v = self._class_code(k) + self.style_map @ s
        if self.text_noise > 0:
            v = v + self.text_noise * self._pseudo_noise(k, s)
        return normalize(v)

    def image_encode(self, k: int, d: int, instance_seed: int) -> np.ndarray:
        if not 0 <= k < self.num_classes:
            raise ValueError(f"class id {k} outside [0, {self.num_classes})")
        if not 0 <= d < self.domain_vectors.shape[0]:
            raise ValueError(f"domain id {d} outside [0, {self.domain_vectors.shape[0]})")
        v = self.class_codes[k] + self.style_map @ self.domain_vectors[d] + self.modality_gap
        if self.image_noise > 0:
            rng = np.random.default_rng([self.seed, 0x494D47, k, d, instance_seed])
            v = v + rng.normal(0.0, self.image_noise, size=self.dim)
        return normalize(v)


def build_training_set(enc: Encoder, styles: Sequence, K: int) -> EmbeddingTable:
    """Encode every (style m, class k) prompt; row ``m * K + k``."""
    if len(styles) < 1 or K < 1:
        raise ValueError("need at least one style and one class")
    M = len(styles)
    vectors = np.empty((M * K, enc.dim), dtype=np.float32)
    for m, s in enumerate(styles):
        for k in range(K):
            vectors[m * K + k] = enc.text_encode(k, s)
    return EmbeddingTable(vectors, np.tile(np.arange(K), M), np.repeat(np.arange(M), K))
