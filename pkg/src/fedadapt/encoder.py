"""Frozen feature backbone stand-in and labeled embedding containers.

Real pretrained encoders stay outside the simulator: experiments either
import precomputed embeddings through the binary file format below or
generate features with a seeded linear map that is never updated by
training. The text side of the similarity head is modeled as one frozen
unit-norm prototype embedding per class.

Embedding file format (little-endian):
    magic "FTEM" | version u32=1 | dim u32 | num_classes u32 | num_samples u64
    then num_samples records of [dim x f32][label u32].
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "EmbeddingDataset",
    "ClassPrototypes",
    "EmbeddingFormatError",
    "PrototypeSeparationError",
    "SyntheticEncoder",
    "load_embeddings",
    "save_embeddings",
    "make_prototypes",
]

MAGIC = b"FTEM"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


class EmbeddingFormatError(ValueError):
    """The embedding file does not conform to the wire format."""


class PrototypeSeparationError(RuntimeError):
    """Could not place the requested number of prototypes far enough apart."""


@dataclass
class EmbeddingDataset:
    """Labeled feature vectors with a per-class histogram.

    ``synthetic`` flags generator-produced samples so metrics can separate
    real from synthetic contributions; it defaults to all-real.
    """

    vectors: np.ndarray
    labels: np.ndarray
    num_classes: int
    synthetic: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float32))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {self.vectors.shape}")
        if self.labels.shape != (self.vectors.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.vectors.shape[0]} samples"
            )
        if not np.isfinite(self.vectors).all():
            raise ValueError("vectors contain non-finite entries")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = int(self.labels[(self.labels < 0) | (self.labels >= self.num_classes)][0])
            raise ValueError(f"label {bad} out of range [0, {self.num_classes})")
        if self.synthetic is None:
            self.synthetic = np.zeros(len(self), dtype=bool)
        else:
            self.synthetic = np.asarray(self.synthetic, dtype=bool)
            if self.synthetic.shape != (len(self),):
                raise ValueError("synthetic mask length does not match sample count")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def n_real(self) -> int:
        return int((~self.synthetic).sum())

    @property
    def n_synthetic(self) -> int:
        return int(self.synthetic.sum())

    def subset(self, indices) -> "EmbeddingDataset":
        idx = np.asarray(indices)
        return EmbeddingDataset(
            self.vectors[idx], self.labels[idx], self.num_classes, self.synthetic[idx]
        )


def save_embeddings(dataset: EmbeddingDataset, path) -> None:
    """Write the dataset in the binary embedding format."""
    n, dim = len(dataset), dataset.dim
    if dataset.labels.max(initial=0) >= 2 ** 32:
        raise ValueError("labels exceed u32 range")
    rec_len = 4 * dim + 4
    body = np.empty((n, rec_len), dtype=np.uint8)
    body[:, : 4 * dim] = (
        dataset.vectors.astype("<f4").view(np.uint8).reshape(n, 4 * dim)
    )
    body[:, 4 * dim :] = dataset.labels.astype("<u4").view(np.uint8).reshape(n, 4)
    header = _HEADER.pack(MAGIC, VERSION, dim, dataset.num_classes, n)
    Path(path).write_bytes(header + body.tobytes())


def load_embeddings(path) -> EmbeddingDataset:
    """Read and validate a dataset written by :func:`save_embeddings`."""
    data = Path(path).read_bytes()
    if len(data) >= 4 and data[:4] != MAGIC:
        raise EmbeddingFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise EmbeddingFormatError(
            f"truncated payload: file ends at byte {len(data)}, "
            f"expected at least the {_HEADER.size}-byte header"
        )
    magic, version, dim, num_classes, n = _HEADER.unpack_from(data)
    if version != VERSION:
        raise EmbeddingFormatError(f"unsupported version {version}, expected {VERSION}")
    if dim == 0 or num_classes == 0:
        raise EmbeddingFormatError(f"invalid header: dim={dim}, num_classes={num_classes}")
    rec_len = 4 * dim + 4
    expected = _HEADER.size + n * rec_len
    if len(data) != expected:
        raise EmbeddingFormatError(
            f"truncated payload: file ends at byte {len(data)}, expected {expected} bytes "
            f"({n} records of {rec_len} bytes after the {_HEADER.size}-byte header)"
        )
    raw = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec_len)
    vectors = raw[:, : 4 * dim].copy().view("<f4").reshape(n, dim)
    labels = raw[:, 4 * dim :].copy().view("<u4").reshape(n).astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        offset = _HEADER.size + i * rec_len + 4 * dim
        raise EmbeddingFormatError(
            f"label {int(labels[i])} >= num_classes {num_classes} "
            f"in record {i} (byte offset {offset})"
        )
    if not np.isfinite(vectors).all():
        raise EmbeddingFormatError("vectors contain non-finite entries")
    return EmbeddingDataset(vectors, labels, num_classes)


class SyntheticEncoder:
    """Deterministic frozen linear map standing in for a pretrained backbone.

    Same seed gives a bit-identical map; the map has no bias and is never
    touched by training.
    """

    def __init__(self, seed: int, raw_dim: int, embed_dim: int):
        if raw_dim < 1 or embed_dim < 1:
            raise ValueError(f"dims must be positive, got raw_dim={raw_dim}, embed_dim={embed_dim}")
        self.seed = int(seed)
        self.raw_dim = raw_dim
        self.embed_dim = embed_dim
        rng = np.random.default_rng([self.seed, 40961])
        self.weight = (
            rng.standard_normal((raw_dim, embed_dim)) / np.sqrt(raw_dim)
        ).astype(np.float32)

    def encode_vectors(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float32)
        if raw.ndim != 2 or raw.shape[1] != self.raw_dim:
            raise ValueError(f"expected (*, {self.raw_dim}) raw vectors, got {raw.shape}")
        return (raw.astype(np.float64) @ self.weight.astype(np.float64)).astype(np.float32)

    def encode(self, raw: np.ndarray, labels, num_classes: int) -> EmbeddingDataset:
        return EmbeddingDataset(self.encode_vectors(raw), labels, num_classes)

    def fingerprint(self) -> str:
        """Digest of the map, used to assert frozenness across a run."""
        return hashlib.sha256(self.weight.tobytes()).hexdigest()


@dataclass
class ClassPrototypes:
    """One frozen unit-norm embedding per class (the text-side features)."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(np.asarray(self.matrix, dtype=np.float32))
        if self.matrix.ndim != 2:
            raise ValueError("prototype matrix must be 2-D")
        norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("prototype rows must be unit-norm within 1e-5")

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def fingerprint(self) -> str:
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()


def make_prototypes(num_classes: int, dim: int, seed: int,
                    max_cos: float = 0.5, max_retries: int = 200) -> ClassPrototypes:
    """Draw unit rows with pairwise |cosine| < ``max_cos``, resampling violators."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng([int(seed), 52429])
    rows: list[np.ndarray] = []
    for c in range(num_classes):
        for _ in range(max_retries):
            v = rng.standard_normal(dim)
            norm = np.linalg.norm(v)
            if norm < 1e-9:
                continue
            u = v / norm
            if all(abs(float(u @ r)) < max_cos for r in rows):
                rows.append(u)
                break
        else:
            raise PrototypeSeparationError(
                f"could not place prototype {c} of {num_classes} in {dim} dims "
                f"with pairwise |cos| < {max_cos} after {max_retries} draws"
            )
    return ClassPrototypes(np.stack(rows).astype(np.float32))
