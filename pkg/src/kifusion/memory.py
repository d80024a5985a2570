"""Replay memory: a fixed random subset of each finished task's training data."""

from __future__ import annotations

import csv
import math

import numpy as np

from .numkit import Rng
from .tasks import LabeledBatch, TaskDataset

DEFAULT_CAPACITY_FRACTION = 0.02


class EmptyBufferError(LookupError):
    """No task has been admitted yet; callers skip replay."""


class ReplayBuffer:
    """Per-task reservoirs of stored training examples.

    Args:
        rng: stream used for admission and sampling; admission of task ``k``
            draws from its own ``split(k, "admit")`` substream.
        capacity_fraction: share of each task's training set kept.
        stratified: sample each replay batch round-robin over tasks instead
            of uniformly over the union of stored examples.
    """

    def __init__(self, rng: Rng, capacity_fraction: float = DEFAULT_CAPACITY_FRACTION, stratified: bool = False):
        if not 0.0 < capacity_fraction <= 1.0:
            raise ValueError("capacity_fraction must be in (0, 1]")
        self.capacity_fraction = capacity_fraction
        self.stratified = stratified
        self._rng = rng
        self.per_task: dict[int, LabeledBatch] = {}
        self._union: LabeledBatch | None = None
        self._owner: np.ndarray | None = None

    def __len__(self) -> int:
        return 0 if self._union is None else len(self._union)

    @property
    def task_ids(self) -> list[int]:
        return list(self.per_task)

    def capacity_for(self, n: int) -> int:
        return min(n, math.ceil(round(self.capacity_fraction * n, 9)))

    def admit_task(self, dataset: TaskDataset) -> None:
        if dataset.task_id in self.per_task:
            raise ValueError(f"task {dataset.task_id} already admitted")
        m = self.capacity_for(dataset.n_train)
        idx = self._rng.split(dataset.task_id, "admit").choice(dataset.n_train, m, replace=False)
        stored = dataset.train.take(np.sort(idx))
        stored.inputs.setflags(write=False)
        stored.labels.setflags(write=False)
        self.per_task[dataset.task_id] = stored
        self._union = LabeledBatch.concat(list(self.per_task.values()))
        self._owner = np.concatenate([np.full(len(b), t) for t, b in self.per_task.items()])

    def sampler(self, task_id: int) -> Rng:
        """Sampling stream to use while training ``task_id``."""
        return self._rng.split(task_id, "replay")

    def sample_replay(self, batch_size: int, rng: Rng) -> LabeledBatch:
        return self.take(self.sample_indices(batch_size, rng))

    def sample_indices(self, batch_size: int, rng: Rng) -> np.ndarray:
        """Indices into the union of stored examples.

        Drawn without replacement, unless the union is smaller than the batch.
        """
        if self._union is None:
            raise EmptyBufferError("replay buffer is empty")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        n = len(self._union)
        if not self.stratified:
            return rng.choice(n, batch_size, replace=n < batch_size)
        tasks = self.task_ids
        picks = []
        for j in range(batch_size):
            t = tasks[(j + int(rng.integers(len(tasks)))) % len(tasks)]
            pool = np.flatnonzero(self._owner == t)
            picks.append(pool[int(rng.integers(pool.size))])
        return np.array(picks)

    def take(self, idx) -> LabeledBatch:
        return self._union.take(idx)

    def owner_of(self, idx) -> np.ndarray:
        return self._owner[idx]

    def all_examples(self) -> LabeledBatch:
        if self._union is None:
            raise EmptyBufferError("replay buffer is empty")
        return self._union

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for t, b in self.per_task.items():
                for x, y in zip(b.inputs, b.labels):
                    w.writerow([t, int(y)] + [repr(float(v)) for v in x])
