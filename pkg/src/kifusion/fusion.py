"""Importance-masked merging of inner and outer task vectors.

The default ``masked`` policy keeps the top ``keep_fraction`` of coordinates
of each importance vector and applies ``theta + m_in * tau_in + m_out * tau_out``.
The remaining variants are the comparison points used in ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FlatParams, Layout, check_layout
from .numkit import as_vec, check_finite, masked_add, top_fraction

VARIANTS = ("masked", "no_ki", "global_merge", "adaptive_soft", "no_share")
DEFAULT_KEEP_FRACTION = 0.20


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray  # bool
    keep_fraction: float
    threshold: float

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __len__(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class FusionPolicy:
    variant: str = "masked"
    keep_fraction: float = DEFAULT_KEEP_FRACTION
    gm_weight: float = 1.0
    per_matrix: bool = False  # experimental: one threshold per adapter factor

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must be in (0, 1]")


def build_mask(importance, keep_fraction: float = DEFAULT_KEEP_FRACTION, layout: Layout | None = None) -> BinaryMask:
    """Mark exactly ``ceil(keep_fraction * n)`` most important coordinates.

    With ``layout`` the selection is made independently inside every tensor
    slot instead of over the whole vector.
    """
    imp = check_finite(as_vec(importance, "importance"), "importance")
    if np.any(imp < 0):
        raise ValueError("importance must be non-negative")
    if layout is None:
        bits, delta = top_fraction(imp, keep_fraction)
        return BinaryMask(bits, keep_fraction, delta)
    bits = np.zeros(imp.shape[0], dtype=bool)
    deltas = []
    for s in layout:
        sel, d = top_fraction(imp[s.offset:s.offset + s.size], keep_fraction)
        bits[s.offset:s.offset + s.size] = sel
        deltas.append(d)
    return BinaryMask(bits, keep_fraction, float(min(deltas)))


def overlap_stats(m_in: BinaryMask, m_out: BinaryMask) -> tuple[int, int, int]:
    """Counts of (shared, in-only, out-only) coordinates."""
    if len(m_in) != len(m_out):
        raise ValueError("mask lengths differ")
    a, b = m_in.bits, m_out.bits
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a & ~b)), int(np.count_nonzero(~a & b))


def _normalized(imp: np.ndarray) -> np.ndarray:
    top = imp.max()
    return imp / top if top > 0 else np.zeros_like(imp)


def fuse_with_masks(
    theta_b: FlatParams,
    tau_in: FlatParams,
    tau_out: FlatParams,
    i_in: np.ndarray,
    i_out: np.ndarray,
    policy: FusionPolicy,
) -> tuple[FlatParams, BinaryMask | None, BinaryMask | None]:
    """Like :func:`fuse`, also returning the binary masks when the variant uses them."""
    check_layout(theta_b, tau_in)
    check_layout(theta_b, tau_out)
    n = theta_b.n
    if i_in.shape != (n,) or i_out.shape != (n,):
        raise ValueError("importance vectors must match the parameter count")
    v = policy.variant
    base, d_in, d_out = theta_b.data, tau_in.data, tau_out.data

    if v in ("masked", "no_share"):
        layout = theta_b.layout if policy.per_matrix else None
        m_in = build_mask(i_in, policy.keep_fraction, layout)
        m_out = build_mask(i_out, policy.keep_fraction, layout)
        bits_in = m_in.bits & ~m_out.bits if v == "no_share" else m_in.bits
        return theta_b.like(masked_add(base, bits_in, d_in, m_out.bits, d_out)), m_in, m_out
    if v == "no_ki":
        ones = np.ones(n, dtype=bool)
        return theta_b.like(masked_add(base, ones, d_in, ones, d_out)), None, None
    if v == "global_merge":
        s_in, s_out = float(i_in.mean()), float(i_out.mean())
        total = s_in + s_out
        s_in, s_out = (s_in / total, s_out / total) if total > 0 else (0.5, 0.5)
        out = base + policy.gm_weight * (s_in * d_in + s_out * d_out)
        return theta_b.like(check_finite(out, "fused params")), None, None
    if v == "adaptive_soft":
        out = base + _normalized(i_in) * d_in + _normalized(i_out) * d_out
        return theta_b.like(check_finite(out, "fused params")), None, None
    raise ValueError(f"unknown fusion variant {v!r}")


def fuse(
    theta_b: FlatParams,
    tau_in: FlatParams,
    tau_out: FlatParams,
    i_in: np.ndarray,
    i_out: np.ndarray,
    policy: FusionPolicy = FusionPolicy(),
) -> FlatParams:
    """Merge the inner and outer task vectors into ``theta_b`` under ``policy``.

    Variants:
        masked: ``theta + m_in*tau_in + m_out*tau_out`` (masks from importance)
        no_ki: ``theta + tau_in + tau_out``
        global_merge: ``theta + c*(s_in*tau_in + s_out*tau_out)`` with scalar
            mean importances ``s`` normalized to sum to one and ``c = gm_weight``
        adaptive_soft: importances rescaled to max 1 used as soft masks
        no_share: masked, but shared coordinates only receive ``tau_out``
    """
    return fuse_with_masks(theta_b, tau_in, tau_out, i_in, i_out, policy)[0]
