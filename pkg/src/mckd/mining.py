"""Contrastive sample selection: class-aware batches and FIFO memory banks.

Batch mining builds mini-batches of B/2 distinct classes with exactly two
samples each, so every anchor sees one in-batch positive and B-2 negatives.
Memory mining keeps one ring buffer of detached unit-norm embeddings per
(network, stage); retrieval draws one same-label positive and K different-label
negatives uniformly. Banks driven in lockstep share their position->sample
correspondence, which the interactive losses rely on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ClassAwareBatch",
    "sample_batch",
    "batch_index_matrix",
    "MemoryBank",
    "RetrievalMiss",
    "PositiveMiss",
    "NegativeMiss",
    "Retrieval",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassAwareBatch:
    indices: np.ndarray  # dataset positions, size B
    labels: np.ndarray  # size B
    partner: np.ndarray  # within-batch position of each anchor's positive

    @property
    def batch_size(self) -> int:
        return self.indices.size


def sample_batch(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> ClassAwareBatch:
    """Draw B/2 eligible classes uniformly, then two distinct samples per class."""
    labels = np.asarray(labels)
    if batch_size % 2 != 0:
        raise ValueError(f"class-aware batches need an even batch size, got {batch_size}")
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= 2]
    need = batch_size // 2
    if eligible.size < need:
        short = classes[counts < 2]
        detail = f"class {short[0]} has fewer than 2 samples" if short.size else "too few classes"
        raise ValueError(
            f"cannot build a batch of {batch_size}: need {need} classes with >=2 samples, "
            f"have {eligible.size} ({detail})")
    chosen = rng.choice(eligible, size=need, replace=False)
    idx = np.empty(batch_size, dtype=np.int64)
    lab = np.empty(batch_size, dtype=labels.dtype)
    for i, c in enumerate(chosen):
        pair = rng.choice(np.flatnonzero(labels == c), size=2, replace=False)
        idx[2 * i : 2 * i + 2] = pair
        lab[2 * i : 2 * i + 2] = c
    partner = np.arange(batch_size) ^ 1  # samples are laid out in class pairs
    return ClassAwareBatch(idx, lab, partner)


def batch_index_matrix(batch: ClassAwareBatch) -> np.ndarray:
    """Per-anchor contrastive layout within the batch: positive first, then the
    B-2 negatives in batch order."""
    B = batch.batch_size
    rows = np.empty((B, B - 1), dtype=np.int64)
    all_idx = np.arange(B)
    for i in range(B):
        p = batch.partner[i]
        rest = all_idx[(all_idx != i) & (all_idx != p)]
        rows[i, 0] = p
        rows[i, 1:] = rest
    return rows


class RetrievalMiss(Exception):
    """Non-fatal signal: this anchor cannot be served; the loss skips it."""


class PositiveMiss(RetrievalMiss):
    """The bank holds no same-label entry for this anchor."""


class NegativeMiss(RetrievalMiss):
    """The bank holds no different-label entry, so even reuse cannot help."""


@dataclass(frozen=True)
class Retrieval:
    positions: np.ndarray  # (K+1,) bank positions, positive first
    negatives_reused: bool  # True when negatives were drawn with replacement


class MemoryBank:
    """FIFO queue of (unit-norm embedding, label, insertion tick) with capacity Q."""

    def __init__(self, capacity: int, dim: int, rng: np.random.Generator,
                 num_classes: int, dtype=np.float64):
        if capacity < 2:
            raise ValueError("bank capacity must be at least 2")
        v = rng.standard_normal((capacity, dim)).astype(dtype)
        self.embeddings = v / np.linalg.norm(v, axis=1, keepdims=True)
        self.labels = rng.integers(0, num_classes, size=capacity)
        self.ticks = np.zeros(capacity, dtype=np.int64)
        self.capacity = capacity
        self.dim = dim
        self._head = 0  # next slot to overwrite (oldest entry)
        self._tick = 0

    def __len__(self) -> int:
        return self.capacity

    def update(self, embeddings: np.ndarray, labels: np.ndarray) -> None:
        """Enqueue a detached batch, evicting the oldest entries."""
        embeddings = np.asarray(embeddings)
        labels = np.asarray(labels)
        if embeddings.ndim != 2 or embeddings.shape[1] != self.dim:
            raise ValueError(f"bank of width {self.dim} cannot store shape {embeddings.shape}")
        norms = np.linalg.norm(embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("bank entries must be unit-normalized")
        n = embeddings.shape[0]
        if n >= self.capacity:  # only the newest entries survive
            embeddings, labels = embeddings[-self.capacity :], labels[-self.capacity :]
            n = self.capacity
        self._tick += 1
        slots = (self._head + np.arange(n)) % self.capacity
        self.embeddings[slots] = embeddings
        self.labels[slots] = labels
        self.ticks[slots] = self._tick
        self._head = int((self._head + n) % self.capacity)

    def retrieve(self, anchor_label: int, num_negatives: int, rng: np.random.Generator) -> Retrieval:
        """One uniform same-label positive plus K uniform different-label negatives.

        Raises PositiveMiss when no same-label entry exists; a negative
        shortage falls back to drawing with replacement (logged).
        """
        same = np.flatnonzero(self.labels == anchor_label)
        if same.size == 0:
            raise PositiveMiss(f"no stored embedding with label {anchor_label}")
        diff = np.flatnonzero(self.labels != anchor_label)
        if diff.size == 0:
            raise NegativeMiss(f"no negatives available for label {anchor_label}")
        pos = rng.choice(same)
        reused = diff.size < num_negatives
        if reused:
            log.warning("bank holds %d negatives for label %s, need %d; sampling with replacement",
                        diff.size, anchor_label, num_negatives)
            negs = rng.choice(diff, size=num_negatives, replace=True)
        else:
            negs = rng.choice(diff, size=num_negatives, replace=False)
        return Retrieval(np.concatenate(([pos], negs)), reused)

    def snapshot(self) -> np.ndarray:
        """Copy of the stored embeddings, safe to wrap as a constant pool."""
        return self.embeddings.copy()
