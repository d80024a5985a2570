"""Feed-forward tanh classifier with frozen base weights and low-rank adapters.

Each layer computes ``h @ (W + s * B @ A).T + b`` with ``W``/``b`` frozen and
only the adapter factors ``A`` (r x d_in) and ``B`` (d_out x r) trainable.  All
trainable state lives in one flat ``float64`` vector; :class:`FlatParams`
pairs that vector with the layout mapping it back onto the factors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _backend
from .numkit import NonFiniteError, Rng, check_finite

CHECKPOINT_MAGIC = b"KIFUSION-PARAMS\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TensorSlot:
    layer: int
    tensor: str  # "A" or "B"
    shape: tuple[int, int]
    offset: int

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]


Layout = tuple[TensorSlot, ...]


@dataclass(frozen=True, eq=False)
class FlatParams:
    """Trainable adapter parameters as one flat vector plus its layout."""

    data: np.ndarray
    layout: Layout

    def __post_init__(self):
        n = sum(s.size for s in self.layout)
        if self.data.shape != (n,):
            raise ValueError(f"data has shape {self.data.shape}, layout needs ({n},)")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def like(self, data: np.ndarray) -> "FlatParams":
        return FlatParams(np.ascontiguousarray(data, dtype=np.float64), self.layout)

    def copy(self) -> "FlatParams":
        return FlatParams(self.data.copy(), self.layout)

    def tensor(self, layer: int, which: str) -> np.ndarray:
        for slot in self.layout:
            if slot.layer == layer and slot.tensor == which:
                return self.data[slot.offset:slot.offset + slot.size].reshape(slot.shape)
        raise KeyError((layer, which))


def check_layout(a: FlatParams, b: FlatParams) -> None:
    if a.layout != b.layout:
        raise ValueError("parameter layouts do not match")


def unflatten(params: FlatParams) -> dict[tuple[int, str], np.ndarray]:
    return {(s.layer, s.tensor): params.tensor(s.layer, s.tensor).copy() for s in params.layout}


def flatten(tensors: dict[tuple[int, str], np.ndarray], layout: Layout) -> FlatParams:
    data = np.empty(sum(s.size for s in layout), dtype=np.float64)
    for s in layout:
        t = np.asarray(tensors[(s.layer, s.tensor)], dtype=np.float64)
        if t.shape != s.shape:
            raise ValueError(f"tensor {(s.layer, s.tensor)} has shape {t.shape}, expected {s.shape}")
        data[s.offset:s.offset + s.size] = t.ravel()
    return FlatParams(data, layout)


@dataclass(frozen=True, eq=False)
class AdapterLinear:
    base_weight: np.ndarray  # d_out x d_in, frozen
    base_bias: np.ndarray  # d_out, frozen
    rank: int
    scaling: float

    def __post_init__(self):
        self.base_weight.setflags(write=False)
        self.base_bias.setflags(write=False)

    @property
    def d_in(self) -> int:
        return self.base_weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.base_weight.shape[0]

    def effective_weight(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.base_weight + self.scaling * (b @ a)


def adapter_layout(widths: Sequence[int], rank: int) -> Layout:
    """Flat layout of the adapter factors for layer widths ``widths``."""
    slots, off = [], 0
    for i, (d_in, d_out) in enumerate(zip(widths, widths[1:])):
        for which, shape in (("A", (rank, d_in)), ("B", (d_out, rank))):
            slots.append(TensorSlot(i, which, shape, off))
            off += shape[0] * shape[1]
    return tuple(slots)


@dataclass(frozen=True, eq=False)
class Classifier:
    layers: tuple[AdapterLinear, ...]
    layout: Layout = field(init=False)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ValueError(f"layer widths do not chain: {prev.d_out} -> {nxt.d_in}")
        if len({l.rank for l in self.layers}) != 1:
            raise ValueError("all layers must share one adapter rank")
        widths = [self.layers[0].d_in] + [l.d_out for l in self.layers]
        slots = adapter_layout(widths, self.layers[0].rank)
        object.__setattr__(self, "layout", slots)
        # cached kernel arguments
        object.__setattr__(self, "_weights", [l.base_weight for l in self.layers])
        object.__setattr__(self, "_biases", [l.base_bias for l in self.layers])
        object.__setattr__(self, "_dims", [(l.d_in, l.d_out) for l in self.layers])
        object.__setattr__(self, "_offsets", [s.offset for s in slots if s.tensor == "A"])

    @classmethod
    def build(
        cls,
        input_dim: int,
        hidden_dims: Sequence[int],
        num_classes: int,
        rng: Rng,
        rank: int = 8,
        lora_alpha: float = 32.0,
        base_scale: float = 1.0,
    ) -> "Classifier":
        """Random frozen base network; weights ~ N(0, base_scale^2 / d_in)."""
        if rank < 1:
            raise ValueError("rank must be >= 1")
        widths = [input_dim, *hidden_dims, num_classes]
        if min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        layers = []
        for d_in, d_out in zip(widths, widths[1:]):
            w = rng.normal((d_out, d_in), scale=base_scale / np.sqrt(d_in))
            b = rng.normal(d_out, scale=0.1 * base_scale)
            layers.append(AdapterLinear(w, b, rank, lora_alpha / rank))
        return cls(tuple(layers))

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def num_classes(self) -> int:
        return self.layers[-1].d_out

    @property
    def rank(self) -> int:
        return self.layers[0].rank

    @property
    def scaling(self) -> float:
        return self.layers[0].scaling

    @property
    def n_params(self) -> int:
        return sum(s.size for s in self.layout)

    def init_params(self, rng: Rng, std: float = 0.02) -> FlatParams:
        """A ~ N(0, std^2), B = 0, so the adapters start as a no-op."""
        data = np.zeros(self.n_params)
        for s in self.layout:
            if s.tensor == "A":
                data[s.offset:s.offset + s.size] = rng.normal(s.size, scale=std)
        return FlatParams(data, self.layout)

    def zero_params(self) -> FlatParams:
        return FlatParams(np.zeros(self.n_params), self.layout)

    def _kernel_args(self):
        return self._weights, self._biases, self._dims, self._offsets, self.rank, self.scaling


def _check_inputs(model: Classifier, params: FlatParams, inputs: np.ndarray) -> np.ndarray:
    if params.layout != model.layout:
        raise ValueError("params layout does not belong to this model")
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"inputs must be (batch, {model.input_dim}), got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return x


def forward(model: Classifier, params: FlatParams, inputs: np.ndarray) -> np.ndarray:
    """Logits of shape (batch, num_classes)."""
    x = _check_inputs(model, params, inputs)
    w, b, dims, offs, r, s = model._kernel_args()
    logits = _backend.kernels.mlp_forward(w, b, params.data, dims, offs, r, s, x)
    return check_finite(logits, "logits")


def loss_and_grad(model: Classifier, params: FlatParams, batch, dropout_masks=None) -> tuple[float, FlatParams]:
    """Mean cross-entropy over ``batch`` and its gradient w.r.t. adapter factors.

    ``dropout_masks``, if given, holds one pre-scaled (batch, d_in) mask per
    layer applied to the adapter input only.
    """
    x = _check_inputs(model, params, batch.inputs)
    labels = np.ascontiguousarray(batch.labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ValueError("labels must match the batch size")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    w, b, dims, offs, r, s = model._kernel_args()
    loss, grad = _backend.kernels.mlp_loss_grad(w, b, params.data, dims, offs, r, s, x, labels, dropout_masks)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    return loss, params.like(check_finite(grad, "gradient"))


def dropout_masks(model: Classifier, batch_size: int, rate: float, rng: Rng) -> list[np.ndarray]:
    keep = 1.0 - rate
    return [(rng.uniform((batch_size, l.d_in)) < keep) / keep for l in model.layers]


def sgd_step(params: FlatParams, grad: FlatParams, lr: float) -> FlatParams:
    check_layout(params, grad)
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    return params.like(params.data - lr * grad.data)


def save_checkpoint(params: FlatParams, path) -> None:
    """Write params in the binary checkpoint format (see docs/formats.md)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(params.layout))]
    for s in params.layout:
        chunks.append(struct.pack("<IcIIQ", s.layer, s.tensor.encode(), s.shape[0], s.shape[1], s.offset))
    chunks.append(struct.pack("<Q", params.n))
    chunks.append(params.data.astype("<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> FlatParams:
    raw = Path(path).read_bytes()
    if raw[:16] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    try:
        version, count = struct.unpack_from("<BI", raw, 16)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        pos = 21
        slots = []
        for _ in range(count):
            layer, which, rows, cols, off = struct.unpack_from("<IcIIQ", raw, pos)
            slots.append(TensorSlot(layer, which.decode(), (rows, cols), off))
            pos += struct.calcsize("<IcIIQ")
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if pos + 8 * n != len(raw):
        raise ValueError(f"{path}: checkpoint size does not match its header")
    return FlatParams(data, tuple(slots))
