"""Datasets, non-IID partitioning, and batch scheduling.

The heterogeneity knob is the standard label-skew construction: for each
class, a Dirichlet(alpha) draw over clients decides what share of that
class each client receives.  Small alpha concentrates each class on a
few clients (most of a client's data comes from one or two classes);
large alpha approaches a uniform IID split.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .rng import seeded_rng

# Purpose tags mixed into SeedSequence keys so the streams for dataset
# synthesis, train/test splitting, partitioning, and batch shuffling
# never collide even under the same base seed.
TAG_SYNTH = 1
TAG_SPLIT = 2
TAG_PARTITION = 3
TAG_BATCH = 4


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n, d) float64 plus labels (n,) int64 in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        labs = np.asarray(self.labels)
        if feats.ndim != 2 or labs.ndim != 1 or feats.shape[0] != labs.shape[0]:
            raise ValueError(
                f"features (n, d) and labels (n,) must align: {feats.shape} vs {labs.shape}"
            )
        if feats.shape[0] == 0:
            raise ValueError("dataset is empty")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain NaN or Inf")
        if not np.issubdtype(labs.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {labs.dtype}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if labs.min() < 0 or labs.max() >= self.num_classes:
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{int(labs.min())}, {int(labs.max())}]"
            )
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs.astype(np.int64))

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class Partition:
    """Disjoint assignment of sample indices to clients.

    assignment[i] is a sorted index array for client i; counts[i] its
    size; ratios[i] = counts[i] / n sums to 1 over clients.
    """

    assignment: tuple[np.ndarray, ...]
    counts: np.ndarray
    ratios: np.ndarray

    @classmethod
    def from_assignment(cls, assignment: list[np.ndarray], total: int) -> "Partition":
        arrays = tuple(np.sort(np.asarray(a, dtype=np.int64)) for a in assignment)
        counts = np.array([a.shape[0] for a in arrays], dtype=np.int64)
        merged = np.sort(np.concatenate(arrays)) if arrays else np.empty(0, np.int64)
        if merged.shape[0] != total or not np.array_equal(merged, np.arange(total)):
            raise ValueError("assignment is not a disjoint cover of all sample indices")
        if (counts == 0).any():
            raise ValueError("every client must receive at least one sample")
        return cls(arrays, counts, counts / counts.sum())

    @property
    def num_clients(self) -> int:
        return len(self.assignment)


def gen_synthetic(
    num_classes: int, dim: int, samples_per_class: int, spread: float, seed: int
) -> Dataset:
    """Gaussian blobs: class means ~ N(0, I), samples ~ N(mean, spread^2 I).

    Larger spread overlaps the blobs and makes the classification task
    harder; spread well below the typical inter-mean distance (~sqrt(2d))
    makes it nearly separable.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if dim < 1 or samples_per_class < 1:
        raise ValueError("dim and samples_per_class must be >= 1")
    if not (spread > 0):
        raise ValueError(f"spread must be positive, got {spread}")
    rng = seeded_rng(seed, TAG_SYNTH)
    means = rng.normal(0.0, 1.0, size=(num_classes, dim))
    feats = np.vstack(
        [means[k] + spread * rng.standard_normal((samples_per_class, dim)) for k in range(num_classes)]
    )
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    return Dataset(feats, labels, num_classes)


def split_train_test(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split: per class, the same fraction is held out for test."""
    if not (0.0 < test_fraction < 1.0):
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = seeded_rng(seed, TAG_SPLIT)
    train_idx, test_idx = [], []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        idx = rng.permutation(idx)
        n_test = int(round(test_fraction * idx.shape[0]))
        n_test = min(max(n_test, 1), idx.shape[0] - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return subset(ds, np.sort(np.concatenate(train_idx))), subset(
        ds, np.sort(np.concatenate(test_idx))
    )


def subset(ds: Dataset, indices: np.ndarray) -> Dataset:
    return Dataset(ds.features[indices], ds.labels[indices], ds.num_classes)


def dirichlet_partition(ds: Dataset, num_clients: int, alpha: float, seed: int) -> Partition:
    """Label-skew partition: per class k, shares over clients ~ Dirichlet(alpha).

    Class samples are allocated to clients multinomially by the drawn
    shares.  Clients left empty are repaired by moving one sample at a
    time from the currently largest client (ties to the lowest id), so
    the result is always a full disjoint cover with no empty client.
    """
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    if not (alpha > 0):
        raise ValueError(f"alpha must be positive, got {alpha}")
    if num_clients > len(ds):
        raise ValueError(
            f"cannot split {len(ds)} samples across {num_clients} clients "
            "with at least one sample each"
        )
    rng = seeded_rng(seed, TAG_PARTITION)
    lists: list[list[int]] = [[] for _ in range(num_clients)]
    for k in range(ds.num_classes):
        idx_k = np.flatnonzero(ds.labels == k)
        if idx_k.shape[0] == 0:
            continue
        shares = rng.dirichlet(np.full(num_clients, alpha))
        counts = rng.multinomial(idx_k.shape[0], shares)
        shuffled = rng.permutation(idx_k)
        bounds = np.cumsum(counts)[:-1]
        for cid, chunk in enumerate(np.split(shuffled, bounds)):
            lists[cid].extend(int(i) for i in chunk)
    sizes = np.array([len(l) for l in lists], dtype=np.int64)
    while (sizes == 0).any():
        empty = int(np.argmax(sizes == 0))
        donor = int(np.argmax(sizes))
        lists[empty].append(lists[donor].pop())
        sizes[empty] += 1
        sizes[donor] -= 1
    return Partition.from_assignment([np.array(l, dtype=np.int64) for l in lists], len(ds))


def epoch_batches(
    shard: np.ndarray, batch_size: int, epoch: int, seed: int
) -> list[np.ndarray]:
    """Shuffle the shard's indices for this epoch and chunk into batches.

    The shuffle is a pure function of (seed, epoch); the final partial
    batch is kept.  Every index appears in exactly one batch.
    """
    idx = np.asarray(shard, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] == 0:
        raise ValueError("shard must be a non-empty 1-D index array")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    perm = idx[seeded_rng(seed, TAG_BATCH, epoch).permutation(idx.shape[0])]
    return [perm[i : i + batch_size] for i in range(0, idx.shape[0], batch_size)]


def load_csv_dataset(
    path: str,
    label_col: int | str = -1,
    has_header: bool = False,
) -> Dataset:
    """Load a numeric CSV into a Dataset.

    ``label_col`` selects the label column by position (negative indexes
    from the right) or by header name (requires ``has_header``).  All
    remaining columns are features.  Labels must be non-negative
    integers forming a contiguous range 0..K-1; violations are reported
    with their row number (1-based, counting any header line).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: file is empty")
    header: list[str] | None = None
    if has_header:
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        if not rows:
            raise ValueError(f"{path}: no data rows after header")
    width = len(rows[0])
    if isinstance(label_col, str):
        if header is None:
            raise ValueError("label_col by name requires has_header=True")
        if label_col not in header:
            raise ValueError(f"{path}: no column named {label_col!r} in header {header}")
        label_idx = header.index(label_col)
    else:
        label_idx = label_col if label_col >= 0 else width + label_col
        if not (0 <= label_idx < width):
            raise ValueError(f"{path}: label_col {label_col} out of range for {width} columns")

    offset = 2 if has_header else 1
    feats, labels = [], []
    for r, row in enumerate(rows):
        line_no = r + offset
        if len(row) != width:
            raise ValueError(
                f"{path}: row {line_no} has {len(row)} columns, expected {width}"
            )
        vals = []
        for c, cell in enumerate(row):
            try:
                vals.append(float(cell))
            except ValueError:
                raise ValueError(
                    f"{path}: row {line_no}, column {c + 1}: {cell.strip()!r} is not numeric"
                ) from None
        lab = vals.pop(label_idx)
        if lab != int(lab):
            raise ValueError(f"{path}: row {line_no}: label {lab!r} is not an integer")
        if lab < 0:
            raise ValueError(f"{path}: row {line_no}: label {int(lab)} is negative")
        labels.append(int(lab))
        feats.append(vals)

    labs = np.array(labels, dtype=np.int64)
    num_classes = int(labs.max()) + 1
    present = np.unique(labs)
    if num_classes < 2:
        raise ValueError(f"{path}: needs at least 2 classes, found {num_classes}")
    if present.shape[0] != num_classes:
        missing = sorted(set(range(num_classes)) - set(int(x) for x in present))
        raise ValueError(
            f"{path}: labels must cover 0..{num_classes - 1}; missing classes {missing}"
        )
    return Dataset(np.array(feats, dtype=np.float64), labs, num_classes)
