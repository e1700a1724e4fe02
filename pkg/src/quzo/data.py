"""Synthetic tasks and the CSV dataset format."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError
from .rng import as_stream

TASKS = ("two-gaussians", "xor-clusters", "token-copy")


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    task: str = "custom"

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise InputError("empty dataset")
        if len(self.inputs) != len(self.targets):
            raise InputError("inputs and targets differ in length")

    def __len__(self):
        return len(self.inputs)

    def batch(self, idx=None):
        if idx is None:
            return self.inputs, self.targets
        return self.inputs[idx], self.targets[idx]

    @property
    def n_classes(self) -> int:
        return int(self.targets.max()) + 1


def gen_synthetic(task: str, n: int, seed=0, dim: int = 2, margin: float = 4.0,
                  vocab: int = 8, seq_len: int = 8) -> Dataset:
    """Reproducible synthetic dataset.

    two-gaussians
        Unit-variance clusters whose means sit ``margin`` standard deviations
        on either side of a random hyperplane through the origin.
    xor-clusters
        Four clusters at ``(+-margin, +-margin)`` in the first two dims, label
        is the XOR of the signs; remaining dims are noise.
    token-copy
        Uniform random token sequences; every position must predict the first
        token, which forces information to move through attention.
    """
    if n < 1:
        raise InputError("n must be at least 1")
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}; expected one of {TASKS}")
    g = as_stream(seed).at(role="data").generator()
    if task == "two-gaussians":
        direction = g.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        y = g.integers(0, 2, n)
        x = g.standard_normal((n, dim)) + np.where(y[:, None] == 1, margin, -margin) * direction
        return Dataset(x, y, task)
    if task == "xor-clusters":
        if dim < 2:
            raise ConfigurationError("xor-clusters needs dim >= 2")
        signs = g.integers(0, 2, (n, 2))
        x = g.standard_normal((n, dim))
        x[:, :2] += np.where(signs == 1, margin, -margin)
        return Dataset(x, signs[:, 0] ^ signs[:, 1], task)
    tokens = g.integers(0, vocab, (n, seq_len))
    targets = np.repeat(tokens[:, :1], seq_len, axis=1)
    return Dataset(tokens, targets, task)


def sample_batch(dataset: Dataset, batch_size: int, stream):
    """Indices drawn without replacement (or the full set when it is smaller)."""
    n = len(dataset)
    if batch_size >= n:
        return dataset.batch()
    idx = as_stream(stream).generator().choice(n, size=batch_size, replace=False)
    return dataset.batch(np.sort(idx))


def save_csv(dataset: Dataset, path):
    """Float feature columns ``x0..x{d-1}`` then an integer ``label`` column.

    Sequence datasets write one column per position and ``label`` holds the
    first-position target.
    """
    inputs = np.asarray(dataset.inputs)
    targets = np.asarray(dataset.targets)
    labels = targets[:, 0] if targets.ndim == 2 else targets
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(inputs.shape[1])] + ["label"])
        for row, lab in zip(inputs, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def load_csv(path, label_column: str = "label") -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if label_column not in header:
            raise InputError(f"{path}: no {label_column!r} column")
        li = header.index(label_column)
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ys.append(int(row[li]))
                xs.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    if not xs:
        raise InputError(f"{path}: no data rows")
    y = np.asarray(ys)
    if y.min() < 0:
        raise InputError(f"{path}: negative class label")
    return Dataset(np.asarray(xs, dtype=np.float64), y, "csv")
