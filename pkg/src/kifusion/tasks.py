"""Synthetic task streams and dataset handling.

Two seeded stream families stand in for real task sequences.  Both are
domain-incremental: every task shares one label space.

* rotated Gaussians: a ring of class clusters placed off-center in a fixed
  2-plane and rotated about the origin by ``k * rotation_step_degrees`` for
  source task ``k``.  Small steps give overlapping, compatible tasks; large
  steps give tasks that live in different regions with conflicting class
  arrangements.
* permuted features: one base Gaussian mixture whose features are shuffled by
  a per-task permutation (the identity for source task 0).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numkit import Rng

DEFAULT_N_TRAIN = 1000


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    inputs: np.ndarray  # (batch, input_dim)
    labels: np.ndarray  # (batch,) int64

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.inputs[idx], self.labels[idx])

    @staticmethod
    def concat(batches: Sequence["LabeledBatch"]) -> "LabeledBatch":
        return LabeledBatch(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.labels for b in batches]),
        )


@dataclass(frozen=True, eq=False)
class TaskDataset:
    task_id: int
    train: LabeledBatch
    test: LabeledBatch
    descriptor: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.train)


@dataclass(frozen=True, eq=False)
class TaskSequence:
    tasks: tuple[TaskDataset, ...]
    order_id: str = "order1"

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError(f"task ids must increase in presentation order, got {ids}")

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> TaskDataset:
        return self.tasks[i]

    @property
    def descriptor(self) -> dict:
        """Stream parameters shared by all tasks, without order, seed or per-task fields."""
        d = dict(self.tasks[0].descriptor)
        for key in ("source_index", "seed", "order", "permutation"):
            d.pop(key, None)
        return d


def default_orders(num_tasks: int) -> list[list[int]]:
    """Three fixed presentation orders: identity, reversed, evens-then-odds."""
    ident = list(range(num_tasks))
    return [ident, ident[::-1], ident[::2] + ident[1::2]]


def _check_dims(num_tasks, num_classes, input_dim, n_train, n_test, min_dim=1):
    if num_tasks < 2:
        raise ValueError("a stream needs at least 2 tasks")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if input_dim < min_dim:
        raise ValueError(f"input_dim must be >= {min_dim}")
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be positive")


def _resolve_order(order, num_tasks):
    order = list(range(num_tasks)) if order is None else [int(k) for k in order]
    if sorted(order) != list(range(num_tasks)):
        raise ValueError(f"order must be a permutation of range({num_tasks}), got {order}")
    return order


def _balanced_labels(n: int, num_classes: int, rng: Rng) -> np.ndarray:
    return (np.arange(n) % num_classes)[rng.permutation(n)].astype(np.int64)


def _gaussian_split(means, n_train, n_test, noise_std, rng: Rng):
    num_classes = means.shape[0]
    out = []
    for tag, n in (("train", n_train), ("test", n_test)):
        sub = rng.split(0, tag)
        labels = _balanced_labels(n, num_classes, sub)
        x = means[labels] + sub.normal(means[labels].shape, scale=noise_std)
        out.append(LabeledBatch(x, labels))
    return out


def rotated_means(
    source_index: int,
    num_classes: int,
    input_dim: int,
    rotation_step_degrees: float,
    center_radius: float = 2.5,
    class_radius: float = 1.5,
    context_offset: float = 0.0,
    plane: tuple[int, int] = (0, 1),
) -> np.ndarray:
    """Class means of rotated-Gaussian source task ``source_index``.

    ``context_offset`` shifts every mean along the first axis outside the
    rotation plane; it is the same for all tasks and classes.
    """
    theta = math.radians(source_index * rotation_step_degrees)
    means = np.zeros((num_classes, input_dim))
    if input_dim > 2:
        off_axis = min(set(range(3)) - set(plane))
        means[:, off_axis] = context_offset
    for c in range(num_classes):
        phi = theta + 2.0 * math.pi * c / num_classes
        means[c, plane[0]] = center_radius * math.cos(theta) + class_radius * math.cos(phi)
        means[c, plane[1]] = center_radius * math.sin(theta) + class_radius * math.sin(phi)
    return means


def make_rotated_gaussian_stream(
    num_tasks: int,
    num_classes: int,
    input_dim: int,
    n_train: int = DEFAULT_N_TRAIN,
    n_test: int = 500,
    rotation_step_degrees: float = 60.0,
    seed: int = 0,
    *,
    order: Sequence[int] | None = None,
    order_id: str = "order1",
    center_radius: float = 2.5,
    class_radius: float = 1.5,
    noise_std: float = 0.6,
    context_offset: float = 0.0,
) -> TaskSequence:
    _check_dims(num_tasks, num_classes, input_dim, n_train, n_test, min_dim=2)
    order = _resolve_order(order, num_tasks)
    params = dict(
        generator="rotated_gaussian", num_tasks=num_tasks, num_classes=num_classes,
        input_dim=input_dim, n_train=n_train, n_test=n_test,
        rotation_step_degrees=float(rotation_step_degrees), center_radius=center_radius,
        class_radius=class_radius, noise_std=noise_std, context_offset=context_offset,
    )
    root = Rng(seed).split(0, "rotated_gaussian")
    tasks = []
    for pos, k in enumerate(order):
        means = rotated_means(k, num_classes, input_dim, rotation_step_degrees, center_radius, class_radius, context_offset)
        # samples depend on the source task only, so reordering never changes a task's data
        train, test = _gaussian_split(means, n_train, n_test, noise_std, root.split(k, "samples"))
        desc = dict(params, seed=seed, source_index=k, order=order)
        tasks.append(TaskDataset(pos, train, test, desc))
    return TaskSequence(tuple(tasks), order_id)


def task_permutations(num_tasks: int, input_dim: int, rng: Rng) -> list[np.ndarray]:
    """Identity for task 0, then distinct seeded permutations."""
    if num_tasks > math.factorial(min(input_dim, 20)):
        raise ValueError("more tasks than distinct feature permutations")
    perms = [np.arange(input_dim)]
    seen = {tuple(perms[0])}
    while len(perms) < num_tasks:
        p = rng.permutation(input_dim)
        if tuple(p) not in seen:
            seen.add(tuple(p))
            perms.append(p)
    return perms


def make_permuted_feature_stream(
    num_tasks: int,
    num_classes: int,
    input_dim: int,
    n_train: int = DEFAULT_N_TRAIN,
    n_test: int = 500,
    seed: int = 0,
    *,
    order: Sequence[int] | None = None,
    order_id: str = "order1",
    mean_scale: float = 1.0,
    noise_std: float = 1.0,
) -> TaskSequence:
    _check_dims(num_tasks, num_classes, input_dim, n_train, n_test, min_dim=2)
    order = _resolve_order(order, num_tasks)
    params = dict(
        generator="permuted_feature", num_tasks=num_tasks, num_classes=num_classes,
        input_dim=input_dim, n_train=n_train, n_test=n_test,
        mean_scale=mean_scale, noise_std=noise_std,
    )
    root = Rng(seed).split(0, "permuted_feature")
    means = root.split(0, "means").normal((num_classes, input_dim), scale=mean_scale)
    perms = task_permutations(num_tasks, input_dim, root.split(0, "perms"))
    tasks = []
    for pos, k in enumerate(order):
        train, test = _gaussian_split(means, n_train, n_test, noise_std, root.split(k, "samples"))
        p = perms[k]
        train = LabeledBatch(train.inputs[:, p], train.labels)
        test = LabeledBatch(test.inputs[:, p], test.labels)
        desc = dict(params, seed=seed, source_index=k, order=order, permutation=p.tolist())
        tasks.append(TaskDataset(pos, train, test, desc))
    return TaskSequence(tuple(tasks), order_id)


GENERATORS = {
    "rotated_gaussian": make_rotated_gaussian_stream,
    "permuted_feature": make_permuted_feature_stream,
}


def make_stream(spec: dict, seed: int, order=None, order_id: str = "order1") -> TaskSequence:
    """Build a stream from a config mapping with a ``generator`` key."""
    kwargs = dict(spec)
    gen = kwargs.pop("generator")
    kwargs.pop("orders", None)
    try:
        fn = GENERATORS[gen]
    except KeyError:
        raise ValueError(f"unknown stream generator {gen!r}") from None
    return fn(seed=seed, order=order, order_id=order_id, **kwargs)


def batch_iter(dataset: TaskDataset, batch_size: int, rng: Rng, epochs: int | None = None) -> Iterator[LabeledBatch]:
    """Shuffled mini-batches, one fresh permutation per epoch.

    The last batch of an epoch is short when ``batch_size`` does not divide
    the training-set size.  Runs forever unless ``epochs`` is given.
    """
    n = dataset.n_train
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield dataset.train.take(perm[start:start + batch_size])
        epoch += 1


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


class DatasetFormatError(ValueError):
    pass


def write_csv_dataset(dataset: TaskDataset, path) -> None:
    """Rows of ``x_1..x_d,label,split``; floats written with repr precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for split, part in (("train", dataset.train), ("test", dataset.test)):
            for x, y in zip(part.inputs, part.labels):
                w.writerow([repr(float(v)) for v in x] + [int(y), split])


def load_csv_dataset(path, input_dim: int, num_classes: int, task_id: int = 0) -> TaskDataset:
    """Parse a CSV dataset.

    Each row holds ``input_dim`` reals and an integer label, optionally
    followed by ``train`` or ``test``; rows without the split column are
    training rows.  Blank lines and lines starting with ``#`` are skipped.
    """
    rows: dict[str, tuple[list, list]] = {"train": ([], []), "test": ([], [])}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            split = "train"
            if len(row) == input_dim + 2:
                split = row[-1].strip()
                if split not in rows:
                    raise DatasetFormatError(f"{path}:{lineno}: unknown split {split!r}")
                row = row[:-1]
            if len(row) != input_dim + 1:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {input_dim + 1} fields, got {len(row)}"
                )
            try:
                x = [float(v) for v in row[:input_dim]]
                label = int(row[input_dim])
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in x):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite value")
            if not 0 <= label < num_classes:
                raise DatasetFormatError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
            rows[split][0].append(x)
            rows[split][1].append(label)
    if not rows["train"][0] and not rows["test"][0]:
        raise DatasetFormatError(f"{path}: no rows")
    if not rows["train"][0]:
        raise DatasetFormatError(f"{path}: no training rows")

    def batch(split):
        xs, ys = rows[split]
        if not xs:
            return LabeledBatch(np.empty((0, input_dim)), np.empty(0, dtype=np.int64))
        return LabeledBatch(np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64))

    desc = dict(generator="csv", path=str(Path(path)), input_dim=input_dim, num_classes=num_classes)
    return TaskDataset(task_id, batch("train"), batch("test"), desc)
