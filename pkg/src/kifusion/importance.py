"""Per-parameter importance for the current task and for replayed history.

Raw importance of a parameter is ``|w * dL/dw|``.  The current-task estimate
is smoothed over the inner-loop trajectory with the previous value weighted by
``alpha1``; the historical estimate is recomputed at the latest parameters on
each replay batch and blended with the new observation weighted by
``alpha2``.  The two recurrences are deliberately kept in these two forms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .model import FlatParams, Layout, check_layout
from .numkit import ema_update

DEFAULT_ALPHA = 0.55
METRICS = ("grad_weight", "abs_grad")


def raw_importance(params: FlatParams, grad: FlatParams) -> np.ndarray:
    check_layout(params, grad)
    return _backend.kernels.abs_product(params.data, grad.data)


def raw_importance_gradonly(grad: FlatParams) -> np.ndarray:
    return np.abs(grad.data)


def raw_metric(metric: str, params: FlatParams, grad: FlatParams) -> np.ndarray:
    if metric == "grad_weight":
        return raw_importance(params, grad)
    if metric == "abs_grad":
        check_layout(params, grad)
        return raw_importance_gradonly(grad)
    raise ValueError(f"unknown importance metric {metric!r}")


@dataclass(eq=False)
class ImportanceState:
    """Smoothed inner (current task) and outer (historical) importance.

    ``inner_ema_carryover=False`` restarts the inner average at every
    iteration: the first observation of an iteration is taken as is.
    """

    layout: Layout
    alpha1: float = DEFAULT_ALPHA
    alpha2: float = DEFAULT_ALPHA
    metric: str = "grad_weight"
    inner_ema_carryover: bool = False
    inner: np.ndarray = field(init=False)
    outer: np.ndarray = field(init=False)
    inner_step_count: int = 0
    outer_step_count: int = 0
    static_count: int = 0
    _fresh_inner: bool = True

    def __post_init__(self):
        for a in (self.alpha1, self.alpha2):
            if not 0.0 <= a <= 1.0:
                raise ValueError("smoothing factors must be in [0, 1]")
        if self.metric not in METRICS:
            raise ValueError(f"unknown importance metric {self.metric!r}")
        n = sum(s.size for s in self.layout)
        self.inner = np.zeros(n)
        self.outer = np.zeros(n)

    @property
    def n(self) -> int:
        return self.inner.shape[0]

    def begin_iteration(self) -> None:
        if not self.inner_ema_carryover or self.inner_step_count == 0:
            self._fresh_inner = True

    def _observe(self, params: FlatParams, grad: FlatParams) -> np.ndarray:
        if params.layout != self.layout:
            raise ValueError("parameter layout does not match the importance state")
        return raw_metric(self.metric, params, grad)


def update_inner(state: ImportanceState, params: FlatParams, grad: FlatParams) -> np.ndarray:
    """One inner step: ``inner = alpha1 * inner + (1 - alpha1) * raw``."""
    raw = state._observe(params, grad)
    if state._fresh_inner:
        state.inner = raw.copy()
        state._fresh_inner = False
    else:
        state.inner = ema_update(state.inner, raw, state.alpha1)
    state.inner_step_count += 1
    return raw


def update_outer(state: ImportanceState, params_after_inner: FlatParams, replay_grad: FlatParams) -> np.ndarray:
    """Recompute historical importance at the current parameters and blend it in.

    ``outer = alpha2 * raw + (1 - alpha2) * outer``; ``replay_grad`` must be
    the replay-batch gradient taken at ``params_after_inner``.
    """
    raw = state._observe(params_after_inner, replay_grad)
    state.outer = ema_update(raw, state.outer, state.alpha2)
    state.outer_step_count += 1
    return raw


def record_static(state: ImportanceState, params: FlatParams, grad: FlatParams) -> np.ndarray:
    """Fold one finished task's importance into a frozen historical estimate.

    Used when historical importance is not re-estimated during training: each
    task contributes the importance measured once at its end, and the stored
    estimate is the running mean over finished tasks.
    """
    raw = state._observe(params, grad)
    state.static_count += 1
    state.outer = state.outer + (raw - state.outer) / state.static_count
    return raw


def snapshot(state: ImportanceState) -> tuple[np.ndarray, np.ndarray]:
    return state.inner.copy(), state.outer.copy()


def layer_sums(values: np.ndarray, layout: Layout) -> dict[tuple[int, str], float]:
    return {(s.layer, s.tensor): float(values[s.offset:s.offset + s.size].sum()) for s in layout}


def write_snapshot_csv(inner: np.ndarray, outer: np.ndarray, layout: Layout, path) -> None:
    """One row per parameter: layer, tensor, row, col, inner, outer."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "tensor", "row", "col", "inner", "outer"])
        for s in layout:
            rows, cols = s.shape
            for i in range(rows):
                for j in range(cols):
                    k = s.offset + i * cols + j
                    w.writerow([s.layer, s.tensor, i, j, repr(float(inner[k])), repr(float(outer[k]))])
