"""Contrastive sample mining: class-aware mini-batches and the FIFO memory bank."""

import numpy as np

from mckd.mining import MemoryBank, PositiveMiss, batch_index_matrix, sample_batch

rng = np.random.default_rng(2)

# -- class-aware batches: B/2 classes, two samples each ------------------------------
labels = np.repeat(np.arange(10), 20)  # 10 classes x 20 samples
batch = sample_batch(labels, batch_size=8, rng=rng)
print("batch labels:", batch.labels)
idx = batch_index_matrix(batch)
print("anchor 0: positive is batch position", idx[0, 0],
      "| negatives:", idx[0, 1:])
print("every anchor sees 1 positive +", idx.shape[1] - 1, "negatives")

# -- memory bank: ring buffer of unit embeddings, oldest evicted first ------------------
bank = MemoryBank(capacity=8, dim=4, rng=rng, num_classes=3)
print("\nbank starts full of random unit vectors; labels:", bank.labels)


def unit(n):
    v = rng.normal(size=(n, 4))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


bank.update(unit(6), np.array([0, 0, 1, 1, 2, 2]))
bank.update(unit(6), np.array([2, 2, 0, 0, 1, 1]))
print("after enqueueing 6 then 6 into capacity 8, ticks:", bank.ticks,
      "(tick 1 entries mostly evicted)")

r = bank.retrieve(anchor_label=0, num_negatives=4, rng=rng)
print("retrieved positions:", r.positions, "labels:", bank.labels[r.positions],
      "(first is the positive)")

try:
    bank.retrieve(anchor_label=7, num_negatives=4, rng=rng)
except PositiveMiss as e:
    print("anchor with unseen label ->", type(e).__name__, "-", e)
