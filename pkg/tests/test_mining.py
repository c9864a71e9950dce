import numpy as np
import pytest

from mckd.mining import (
    MemoryBank,
    NegativeMiss,
    PositiveMiss,
    batch_index_matrix,
    sample_batch,
)


def _labels(classes, per_class, rng=None):
    lab = np.repeat(np.arange(classes), per_class)
    if rng is not None:
        rng.shuffle(lab)
    return lab


def _unit(n, d, rng):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_batch_layout_b8():
    rng = np.random.default_rng(0)
    batch = sample_batch(_labels(10, 5, rng), 8, rng)
    assert batch.batch_size == 8
    assert len(np.unique(batch.labels)) == 4
    for c in np.unique(batch.labels):
        assert (batch.labels == c).sum() == 2
    # each anchor: exactly 1 positive, 6 negatives
    idx = batch_index_matrix(batch)
    assert idx.shape == (8, 7)
    for i in range(8):
        assert batch.labels[idx[i, 0]] == batch.labels[i]
        assert idx[i, 0] != i
        assert (batch.labels[idx[i, 1:]] != batch.labels[i]).all()


def test_batch_b128_gives_126_negatives():
    rng = np.random.default_rng(1)
    batch = sample_batch(_labels(80, 3, rng), 128, rng)
    idx = batch_index_matrix(batch)
    assert idx.shape[1] == 127  # 1 positive + 126 negatives
    assert (batch.labels[idx[:, 1:]] != batch.labels[:, None]).all()


def test_batch_infeasible_configuration_fails():
    labels = np.array([0, 0, 1, 1, 2])  # class 2 has a single sample
    with pytest.raises(ValueError, match="class 2"):
        sample_batch(labels, 6, np.random.default_rng(0))
    with pytest.raises(ValueError, match="even"):
        sample_batch(_labels(4, 4), 5, np.random.default_rng(0))


def test_batch_sampling_distinct_members_and_indices():
    rng = np.random.default_rng(2)
    labels = _labels(6, 4, rng)
    for _ in range(50):
        b = sample_batch(labels, 8, rng)
        assert len(np.unique(b.indices)) == 8
        assert (labels[b.indices] == b.labels).all()


def test_bank_fifo_eviction():
    rng = np.random.default_rng(3)
    bank = MemoryBank(capacity=8, dim=4, rng=rng, num_classes=3)
    first = _unit(6, 4, rng)
    second = _unit(6, 4, rng)
    bank.update(first, np.zeros(6, dtype=int))
    bank.update(second, np.ones(6, dtype=int))
    stored = {tuple(np.round(r, 12)) for r in bank.embeddings}
    survivors = [tuple(np.round(r, 12)) for r in np.vstack([first[4:], second])]
    assert all(s in stored for s in survivors)
    evicted = [tuple(np.round(r, 12)) for r in first[:4]]
    assert not any(e in stored for e in evicted)


def test_bank_full_batch_replaces_everything():
    rng = np.random.default_rng(4)
    bank = MemoryBank(capacity=5, dim=3, rng=rng, num_classes=2)
    batch = _unit(5, 3, rng)
    bank.update(batch, np.arange(5) % 2)
    np.testing.assert_allclose(np.sort(bank.embeddings, axis=0), np.sort(batch, axis=0))


def test_bank_rejects_bad_entries():
    rng = np.random.default_rng(5)
    bank = MemoryBank(capacity=4, dim=3, rng=rng, num_classes=2)
    with pytest.raises(ValueError, match="width"):
        bank.update(_unit(2, 5, rng), np.zeros(2, dtype=int))
    with pytest.raises(ValueError, match="unit"):
        bank.update(np.ones((2, 3)), np.zeros(2, dtype=int))


def test_bank_initialized_with_random_unit_vectors():
    bank = MemoryBank(capacity=32, dim=6, rng=np.random.default_rng(6), num_classes=4)
    np.testing.assert_allclose(np.linalg.norm(bank.embeddings, axis=1), 1.0, atol=1e-6)
    assert set(np.unique(bank.labels)).issubset(set(range(4)))


def test_retrieve_label_partition():
    rng = np.random.default_rng(7)
    bank = MemoryBank(capacity=64, dim=4, rng=rng, num_classes=4)
    bank.update(_unit(64, 4, rng), rng.integers(0, 4, size=64))
    for _ in range(200):
        lab = int(rng.integers(0, 4))
        r = bank.retrieve(lab, 10, rng)
        assert bank.labels[r.positions[0]] == lab
        assert (bank.labels[r.positions[1:]] != lab).all()
        assert not r.negatives_reused
        assert len(np.unique(r.positions[1:])) == 10  # without replacement


def test_retrieve_positive_miss_and_negative_miss():
    rng = np.random.default_rng(8)
    bank = MemoryBank(capacity=6, dim=3, rng=rng, num_classes=2)
    bank.update(_unit(6, 3, rng), np.zeros(6, dtype=int))  # single label everywhere
    with pytest.raises(PositiveMiss):
        bank.retrieve(1, 3, rng)
    with pytest.raises(NegativeMiss):
        bank.retrieve(0, 3, rng)  # positive exists, zero eligible negatives


def test_retrieve_negative_shortage_reuses_with_warning(caplog):
    rng = np.random.default_rng(9)
    bank = MemoryBank(capacity=6, dim=3, rng=rng, num_classes=2)
    labels = np.array([0, 0, 0, 0, 1, 1])
    bank.update(_unit(6, 3, rng), labels)
    with caplog.at_level("WARNING"):
        r = bank.retrieve(0, 5, rng)
    assert r.negatives_reused
    assert (bank.labels[r.positions[1:]] == 1).all()
    assert "replacement" in caplog.text


def test_bank_age_property():
    # with Q = c*B, every resident entry comes from the last c enqueues
    rng = np.random.default_rng(10)
    c, B = 4, 8
    bank = MemoryBank(capacity=c * B, dim=3, rng=rng, num_classes=2)
    for t in range(20):
        bank.update(_unit(B, 3, rng), rng.integers(0, 2, size=B))
        assert bank.ticks.min() >= max(0, (t + 1) - c + 1) if t + 1 >= c else True
    assert bank.ticks.min() == 20 - c + 1


def test_bank_stress_fifo_and_partition_10k_ops():
    rng = np.random.default_rng(11)
    bank = MemoryBank(capacity=128, dim=4, rng=rng, num_classes=6)
    ops = 0
    while ops < 10_000:
        n = int(rng.integers(1, 20))
        bank.update(_unit(n, 4, rng), rng.integers(0, 6, size=n))
        ops += 1
        for _ in range(3):
            lab = int(rng.integers(0, 6))
            try:
                r = bank.retrieve(lab, 16, rng)
            except (PositiveMiss, NegativeMiss):
                ops += 1
                continue
            assert bank.labels[r.positions[0]] == lab
            assert (bank.labels[r.positions[1:]] != lab).all()
            ops += 1
    # oldest-first eviction held throughout: ticks of survivors are the latest
    assert bank.ticks.max() == bank._tick
