"""Recurrent inner/outer training with importance-masked fusion, plus baselines.

One training iteration ("cycle") of the ``kif`` method:

1. inner loop: ``Q`` SGD steps on current-task batches from ``theta_b``,
   smoothing raw importance along the way; ``tau_in = theta_bQ - theta_b``.
2. outer loop: one SGD step on a replay batch taken at ``theta_bQ``, with the
   historical importance re-estimated at ``theta_bQ``;
   ``tau_out = theta_bM - theta_bQ``.
3. fusion: the parameters are rewound to ``theta_b`` and the masked task
   vectors are added there.

Baselines: ``seq`` (plain SGD), ``replay`` (a task step followed by a replay
step), ``static_importance`` (kif with historical importance measured once
at each task's end and then frozen) and ``mtl`` (pooled training on all tasks
seen so far, for reference).
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import _backend
from .fusion import FusionPolicy, fuse_with_masks, overlap_stats
from .importance import ImportanceState, record_static, snapshot, update_inner, update_outer
from .memory import EmptyBufferError, ReplayBuffer
from .metrics import AccuracyMatrix, RunReport
from .model import Classifier, FlatParams, dropout_masks, forward, loss_and_grad, save_checkpoint, sgd_step
from .numkit import NonFiniteError, Rng
from .tasks import LabeledBatch, TaskDataset, TaskSequence, batch_iter, batches_per_epoch

log = logging.getLogger(__name__)

METHODS = ("kif", "seq", "replay", "static_importance", "mtl")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "kif"
    inner_steps: int = 8
    outer_steps_per_cycle: int = 1
    lr_inner: float = 3e-4
    lr_outer: float = 3e-4
    batch_inner: int = 8
    batch_outer: int = 8
    alpha1: float = 0.55
    alpha2: float = 0.55
    epochs: int = 10
    policy: FusionPolicy = FusionPolicy()
    capacity_fraction: float = 0.02
    stratified_replay: bool = False
    replay_every: int | None = None  # replay baseline: task steps per replay step; None = inner_steps
    importance_metric: str = "grad_weight"
    inner_ema_carryover: bool = False
    # model shape
    hidden_dims: tuple[int, ...] = (64, 64)
    rank: int = 8
    lora_alpha: float = 32.0
    base_scale: float = 1.0
    init_std: float = 0.02
    dropout: float = 0.0
    # reporting
    log_every: int = 10
    snapshot_cycles: tuple[int, ...] = ()
    snapshot_task_ends: bool = False
    eval_workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.inner_steps < 1 or self.outer_steps_per_cycle < 1:
            raise ValueError("inner_steps and outer_steps_per_cycle must be >= 1")
        if not (self.lr_inner > 0 and self.lr_outer > 0):
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.batch_inner < 1 or self.batch_outer < 1:
            raise ValueError("epochs and batch sizes must be >= 1")
        if self.replay_every is not None and self.replay_every < 1:
            raise ValueError("replay_every must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        object.__setattr__(self, "snapshot_cycles", tuple(self.snapshot_cycles))

    @property
    def keep_fraction(self) -> float:
        return self.policy.keep_fraction

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["snapshot_cycles"] = list(self.snapshot_cycles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("policy"), dict):
            d["policy"] = FusionPolicy(**d["policy"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def label(self) -> str:
        if self.method in ("kif", "static_importance") and self.policy.variant != "masked":
            return f"{self.method}/{self.policy.variant}"
        return self.method


@dataclass(eq=False)
class RunState:
    model: Classifier
    params: FlatParams
    importance: ImportanceState
    buffer: ReplayBuffer
    current_task: int = 0
    cycle: int = 0
    update_counter: int = 0
    replay_rng: Rng | None = None
    dropout_rng: Rng | None = None
    cycle_log: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    mask_dump_dir: Path | None = None


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss; ``report`` holds what was finished."""

    def __init__(self, message: str, report: RunReport):
        super().__init__(message)
        self.report = report


def cycle_plan(total_inner_steps: int, q: int) -> list[int]:
    """Inner-loop lengths for one task.

    ``floor(N'/Q)`` cycles of ``Q`` steps with the remainder folded into the
    last one.  Fewer than ``Q`` steps in total gives a single short cycle.
    """
    full = total_inner_steps // q
    if full == 0:
        return [total_inner_steps]
    plan = [q] * full
    plan[-1] += total_inner_steps % q
    return plan


def _grad(state: RunState, cfg: TrainConfig, params: FlatParams, batch: LabeledBatch):
    masks = None
    if cfg.dropout > 0:
        masks = dropout_masks(state.model, len(batch), cfg.dropout, state.dropout_rng)
    return loss_and_grad(state.model, params, batch, masks)


def run_inner_loop(state: RunState, batches: Iterator[LabeledBatch], cfg: TrainConfig, steps: int | None = None):
    """``steps`` (default Q) SGD steps from ``state.params``.

    Returns ``(tau_in, I_in, mean_loss)`` and leaves ``state.params`` at the
    end of the trajectory.
    """
    steps = cfg.inner_steps if steps is None else steps
    theta_start = state.params
    params = theta_start
    state.importance.begin_iteration()
    losses = []
    for _ in range(steps):
        batch = next(batches)
        loss, grad = _grad(state, cfg, params, batch)
        update_inner(state.importance, params, grad)
        params = sgd_step(params, grad, cfg.lr_inner)
        state.update_counter += 1
        losses.append(loss)
    state.params = params
    tau_in = params.like(params.data - theta_start.data)
    return tau_in, state.importance.inner.copy(), float(np.mean(losses))


def run_outer_loop(state: RunState, cfg: TrainConfig, dynamic: bool = True):
    """Replay step(s) from ``state.params``; returns ``(tau_out, skipped, loss)``.

    With an empty buffer nothing happens and ``tau_out`` is zero.  The
    historical importance is re-estimated at the pre-step parameters unless
    ``dynamic`` is false.
    """
    start = state.params
    try:
        batch = state.buffer.sample_replay(cfg.batch_outer, state.replay_rng)
    except EmptyBufferError:
        return start.like(np.zeros(start.n)), True, float("nan")
    params = start
    losses = []
    for step in range(cfg.outer_steps_per_cycle):
        if step > 0:
            batch = state.buffer.sample_replay(cfg.batch_outer, state.replay_rng)
        loss, grad = _grad(state, cfg, params, batch)
        if dynamic and step == 0:
            update_outer(state.importance, params, grad)
        params = sgd_step(params, grad, cfg.lr_outer)
        state.update_counter += 1
        losses.append(loss)
    state.params = params
    return params.like(params.data - start.data), False, float(np.mean(losses))


def run_cycle(state: RunState, batches: Iterator[LabeledBatch], cfg: TrainConfig, steps: int | None = None, outer: bool = True) -> dict:
    """One inner loop, one outer loop, and the fused update applied to ``theta_b``."""
    theta_b = state.params
    tau_in, i_in, loss = run_inner_loop(state, batches, cfg, steps)
    if outer:
        tau_out, skipped, replay_loss = run_outer_loop(state, cfg, dynamic=cfg.method == "kif")
    else:
        tau_out, skipped, replay_loss = theta_b.like(np.zeros(theta_b.n)), True, float("nan")
    fused, m_in, m_out = fuse_with_masks(theta_b, tau_in, tau_out, i_in, state.importance.outer, cfg.policy)
    state.params = fused
    state.cycle += 1

    entry = {"task": state.current_task, "cycle": state.cycle, "loss": loss,
             "replay_loss": None if skipped else replay_loss, "outer_skipped": skipped}
    if m_in is not None:
        shared, in_only, out_only = overlap_stats(m_in, m_out)
        entry.update(popcount_in=m_in.popcount, popcount_out=m_out.popcount,
                     shared=shared, in_only=in_only, out_only=out_only)
        if state.mask_dump_dir is not None:
            _dump_masks(state.mask_dump_dir / f"masks_cycle{state.cycle:06d}.csv", m_in.bits, m_out.bits)
    if cfg.log_every > 0 and state.cycle % cfg.log_every == 0:
        state.cycle_log.append(entry)
    if state.cycle in cfg.snapshot_cycles:
        _take_snapshot(state, "cycle")
    return entry


def _dump_masks(path: Path, m_in: np.ndarray, m_out: np.ndarray) -> None:
    rows = np.column_stack([np.arange(m_in.size), m_in.astype(int), m_out.astype(int)])
    np.savetxt(path, rows, fmt="%d", delimiter=",", header="index,m_in,m_out", comments="")


def _take_snapshot(state: RunState, kind: str) -> None:
    inner, outer = snapshot(state.importance)
    state.snapshots.append({"cycle": state.cycle, "task": state.current_task, "kind": kind,
                            "inner": inner.tolist(), "outer": outer.tolist()})


def evaluate(params: FlatParams, model: Classifier, test: LabeledBatch) -> float:
    """Fraction of ``test`` whose argmax logit equals the label."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = np.argmax(forward(model, params, test.inputs), axis=1)
    return float(np.mean(pred == test.labels))


def _train_task_kif(state: RunState, task: TaskDataset, cfg: TrainConfig, batches) -> tuple[int, int]:
    per_epoch = batches_per_epoch(task.n_train, cfg.batch_inner)
    plan = cycle_plan(cfg.epochs * per_epoch, cfg.inner_steps)
    fusions = 0
    for steps in plan:
        run_cycle(state, batches, cfg, steps, outer=steps >= cfg.inner_steps)
        fusions += 1
    return sum(plan), fusions


def _sgd_steps(state: RunState, cfg: TrainConfig, batches, n: int, replay: bool) -> None:
    every = cfg.inner_steps if cfg.replay_every is None else cfg.replay_every
    for step in range(1, n + 1):
        loss, grad = _grad(state, cfg, state.params, next(batches))
        state.params = sgd_step(state.params, grad, cfg.lr_inner)
        state.update_counter += 1
        if replay and step % every == 0 and len(state.buffer):
            batch = state.buffer.sample_replay(cfg.batch_outer, state.replay_rng)
            _, grad = _grad(state, cfg, state.params, batch)
            state.params = sgd_step(state.params, grad, cfg.lr_outer)
            state.update_counter += 1


def _pooled(tasks: list[TaskDataset]) -> TaskDataset:
    return TaskDataset(tasks[-1].task_id, LabeledBatch.concat([t.train for t in tasks]), tasks[-1].test)


def _static_importance(state: RunState, task: TaskDataset) -> None:
    _, grad = loss_and_grad(state.model, state.params, task.train)
    record_static(state.importance, state.params, grad)


def init_state(seq: TaskSequence, cfg: TrainConfig, seed: int) -> RunState:
    root = Rng(seed)
    first = seq[0]
    input_dim = first.train.inputs.shape[1]
    num_classes = int(first.descriptor.get("num_classes", 1 + max(int(t.train.labels.max()) for t in seq)))
    model = Classifier.build(input_dim, cfg.hidden_dims, num_classes, root.split(0, "model"),
                             rank=cfg.rank, lora_alpha=cfg.lora_alpha, base_scale=cfg.base_scale)
    params = model.init_params(root.split(0, "init"), std=cfg.init_std)
    imp = ImportanceState(model.layout, cfg.alpha1, cfg.alpha2, cfg.importance_metric, cfg.inner_ema_carryover)
    buffer = ReplayBuffer(root.split(0, "memory"), cfg.capacity_fraction, cfg.stratified_replay)
    return RunState(model, params, imp, buffer)


def _evaluate_upto(state: RunState, seq: TaskSequence, j: int, workers: int) -> list[float]:
    tests = [seq[i].test for i in range(j + 1)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda t: evaluate(state.params, state.model, t), tests))
    return [evaluate(state.params, state.model, t) for t in tests]


def train_sequence(
    seq: TaskSequence,
    cfg: TrainConfig,
    seed: int,
    *,
    on_task_end: Callable[[RunState, int], None] | None = None,
    checkpoint_dir=None,
    mask_dump_dir=None,
    label: str | None = None,
) -> RunReport:
    """Train on every task of ``seq`` in order and return the run report.

    After task ``j`` all tasks ``i <= j`` are evaluated, filling column ``j``
    of the accuracy matrix; then task ``j`` is admitted to the replay buffer.
    """
    root = Rng(seed)
    state = init_state(seq, cfg, seed)
    if mask_dump_dir is not None:
        state.mask_dump_dir = Path(mask_dump_dir)
        state.mask_dump_dir.mkdir(parents=True, exist_ok=True)
    k_tasks = len(seq)
    matrix = AccuracyMatrix(k_tasks)
    steps_per_task, fusions_per_task = [], []

    def report(aborted=None) -> RunReport:
        return RunReport.from_matrix(
            matrix, config=cfg.to_dict(), seed=seed, label=label or cfg.label(), stream=seq.descriptor,
            order_id=seq.order_id, order=[t.descriptor.get("source_index", t.task_id) for t in seq],
            update_counter=state.update_counter, steps_per_task=steps_per_task,
            fusions_per_task=fusions_per_task, cycle_log=state.cycle_log, snapshots=state.snapshots,
            backend=_backend.name, aborted=aborted,
        )

    for j, task in enumerate(seq):
        state.current_task = task.task_id
        state.replay_rng = state.buffer.sampler(task.task_id)
        state.dropout_rng = root.split(task.task_id, "dropout")
        batch_rng = root.split(task.task_id, "batches")
        before = state.update_counter
        fusions = 0
        try:
            if cfg.method in ("kif", "static_importance"):
                _, fusions = _train_task_kif(state, task, cfg, batch_iter(task, cfg.batch_inner, batch_rng))
            else:
                data = _pooled(list(seq)[:j + 1]) if cfg.method == "mtl" else task
                n = cfg.epochs * batches_per_epoch(data.n_train, cfg.batch_inner)
                _sgd_steps(state, cfg, batch_iter(data, cfg.batch_inner, batch_rng), n, cfg.method == "replay")
        except NonFiniteError as exc:
            msg = f"task {task.task_id}, cycle {state.cycle}: {exc}"
            log.error("aborting run: %s", msg)
            raise TrainingAborted(msg, report(aborted=msg)) from exc
        steps_per_task.append(state.update_counter - before)
        fusions_per_task.append(fusions)

        for i, acc in enumerate(_evaluate_upto(state, seq, j, cfg.eval_workers)):
            matrix.set(i, j, acc)
        if cfg.method == "static_importance":
            _static_importance(state, task)
        state.buffer.admit_task(task)
        if cfg.snapshot_task_ends:
            _take_snapshot(state, "task_end")
        if checkpoint_dir is not None:
            save_checkpoint(state.params, Path(checkpoint_dir) / f"task{task.task_id}.ckpt")
        if on_task_end is not None:
            on_task_end(state, j)
        log.info("task %d done: acc %s", task.task_id, np.round(matrix.cells[: j + 1, j], 3).tolist())
    return report()
