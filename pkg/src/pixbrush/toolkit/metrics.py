"""Retrieval-style evaluation of edit renders against reference images."""

from __future__ import annotations

import hashlib
from typing import Protocol, Sequence

import numpy as np


class Embedder(Protocol):
    dim: int

    def embed(self, image: np.ndarray) -> np.ndarray: ...


class HistogramEmbedder:
    """Unit-normalized joint RGB histogram (4 bins per channel, 64 dims)."""

    def __init__(self, bins_per_channel: int = 4):
        self.bins = bins_per_channel
        self.dim = bins_per_channel**3

    def embed(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=-1)
        q = np.clip((img[..., :3] * self.bins).astype(int), 0, self.bins - 1)
        codes = (q[..., 0] * self.bins + q[..., 1]) * self.bins + q[..., 2]
        hist = np.bincount(codes.ravel(), minlength=self.dim).astype(np.float64)
        return hist / np.linalg.norm(hist)


class HashEmbedder:
    """Maps each distinct image (by exact bytes) to its own basis vector.

    Identical images get identical embeddings and distinct images are
    orthogonal, so retrieval with it is perfect whenever renders equal
    their references.
    """

    def __init__(self, dim: int = 256):
        self.dim = dim
        self._slots: dict[bytes, int] = {}

    def embed(self, image: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(image, dtype=np.float64)
        key = hashlib.sha256(arr.tobytes() + str(arr.shape).encode()).digest()
        if key not in self._slots:
            if len(self._slots) >= self.dim:
                raise ValueError("HashEmbedder ran out of orthogonal slots")
            self._slots[key] = len(self._slots)
        v = np.zeros(self.dim)
        v[self._slots[key]] = 1.0
        return v


def _embed_all(images, embedder) -> np.ndarray:
    vecs = [np.asarray(embedder.embed(im), dtype=np.float64) for im in images]
    dims = {v.shape for v in vecs}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ValueError(f"embedder dimension mismatch: {sorted(dims)}")
    return np.stack(vecs)


def _similarities(results: Sequence, references: Sequence, embedder) -> np.ndarray:
    if len(results) != len(references):
        raise ValueError("results and references must have equal length")
    a = _embed_all(results, embedder)
    b = _embed_all(references, embedder)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"embedder dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def r_precision(result_renders: Sequence, reference_images: Sequence, embedder) -> float:
    """Percentage of results whose own reference is the strict nearest neighbour.

    A tie with any other reference counts as a failure.
    """
    if len(result_renders) < 2:
        raise ValueError("need at least 2 result/reference pairs")
    sim = _similarities(result_renders, reference_images, embedder)
    own = np.diag(sim)
    others = sim.copy()
    np.fill_diagonal(others, -np.inf)
    hits = own > others.max(axis=1)
    return 100.0 * hits.sum() / len(hits)


def mean_similarity(result_renders: Sequence, reference_images: Sequence, embedder) -> float:
    """Average cosine similarity between each result and its own reference."""
    if len(result_renders) < 1:
        raise ValueError("need at least one pair")
    return float(np.mean(np.diag(_similarities(result_renders, reference_images, embedder))))
