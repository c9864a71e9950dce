"""Desk-scale labeled datasets: Gaussian blob generator, CSV loader, subsampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

__all__ = ["LabeledDataset", "gaussian_blobs", "load_csv", "save_csv",
           "load_raw_binary", "stratified_subset"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) ints in [0, C)
    split: str = "train"

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (N, D) with one label per row")
        if not np.isfinite(self.features).all():
            raise ValueError("dataset features must be finite")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def gaussian_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int,
                   split: str = "train") -> LabeledDataset:
    """Isotropic Gaussian clusters with means on the unit sphere."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    feats = np.concatenate(
        [means[c] + spread * rng.standard_normal((per_class, dim)) for c in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(feats, labels, split=split)


def blob_splits(num_classes: int, per_class: int, dim: int, spread: float, seed: int,
                test_per_class: int | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/test pair drawn around the same class means with disjoint noise."""
    test_per_class = test_per_class or max(per_class // 5, 1)
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)

    def draw(n, split):
        feats = np.concatenate([means[c] + spread * rng.standard_normal((n, dim))
                                for c in range(num_classes)])
        return LabeledDataset(feats, np.repeat(np.arange(num_classes), n), split=split)

    return draw(per_class, "train"), draw(test_per_class, "test")


def load_csv(path) -> LabeledDataset:
    """Rows of D feature columns followed by one integer label; header optional."""
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if lineno == 1:
                try:
                    [float(c) for c in cells]
                except ValueError:
                    continue  # header
            try:
                values = [float(c) for c in cells]
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: non-numeric cell ({e})") from None
            if width is None:
                width = len(cells)
                if width < 2:
                    raise ValueError(f"{path}:{lineno}: need at least one feature and a label column")
            elif len(cells) != width:
                raise ValueError(f"{path}:{lineno}: ragged row, expected {width} cells, got {len(cells)}")
            lab = values[-1]
            if lab != int(lab):
                raise ValueError(f"{path}:{lineno}: label column must hold integers, got {lab}")
            rows.append(values[:-1])
            labels.append(int(lab))
    if not rows:
        raise ValueError(f"{path}: empty file")
    feats = np.asarray(rows, dtype=np.float64)
    lab = np.asarray(labels)
    present = np.unique(lab)
    if not np.array_equal(present, np.arange(present.size)):
        log.warning("label values %s are not dense; remapping to 0..%d", present.tolist(), present.size - 1)
        lab = np.searchsorted(present, lab)
    return LabeledDataset(feats, lab)


def save_csv(dataset: LabeledDataset, path) -> None:
    """17-significant-digit decimal output so a reload is value-exact at 64-bit."""
    with open(path, "w") as fh:
        for x, y in zip(dataset.features, dataset.labels):
            fh.write(",".join(f"{v:.17g}" for v in x) + f",{int(y)}\n")


def load_raw_binary(path, image_bytes: int, scale: float = 1.0 / 255.0) -> LabeledDataset:
    """Raw-binary image records: 1 label byte followed by ``image_bytes`` uint8
    pixels per record, concatenated. Pixels are flattened row-major and scaled
    to [0, 1]. Provided for externally supplied image data; not exercised by
    the test suite (desk-scale runs use the generators above)."""
    blob = np.fromfile(path, dtype=np.uint8)
    record = 1 + image_bytes
    if blob.size == 0 or blob.size % record != 0:
        raise ValueError(f"{path}: size {blob.size} is not a multiple of record length {record}")
    records = blob.reshape(-1, record)
    labels = records[:, 0].astype(np.int64)
    feats = records[:, 1:].astype(np.float64) * scale
    return LabeledDataset(feats, labels)


def stratified_subset(dataset: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Per-class proportional subsample of a training split; floor rule, the
    remainder going to the lowest class indices."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return dataset
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(dataset.labels, return_counts=True)
    total = int(round(fraction * dataset.num_samples))
    base = np.floor(fraction * counts).astype(int)
    remainder = total - int(base.sum())
    base[:remainder] += 1  # lowest class indices absorb the remainder
    if (base == 0).any():
        empty = classes[base == 0][0]
        raise ValueError(f"fraction {fraction} empties class {empty}")
    keep = []
    for c, n in zip(classes, base):
        members = np.flatnonzero(dataset.labels == c)
        keep.append(rng.choice(members, size=n, replace=False))
    keep = np.sort(np.concatenate(keep))
    return LabeledDataset(dataset.features[keep], dataset.labels[keep], split=dataset.split)
