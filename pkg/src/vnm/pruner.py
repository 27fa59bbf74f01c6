"""V:N:M pruning: padding, the column-then-row block prune, and mask application.

Every V x M block keeps the 4 columns with the largest L1 norm of importance
scores, then each row of the block keeps its 2 highest-scoring entries among
those 4 columns. Ties go to the smaller column index at both steps.
"""

from __future__ import annotations

import numpy as np

from .core import (
    GROUP,
    N_KEPT,
    DimensionError,
    PaddingRecord,
    SparseMask,
    VnmPattern,
    as_matrix,
    as_scores,
)


def _ceil_to(n: int, k: int) -> int:
    return -(-n // k) * k


def pad_weights(w, pattern: VnmPattern) -> tuple[np.ndarray, PaddingRecord]:
    w = as_matrix(w, "weights")
    rows, cols = w.shape
    pr, pc = _ceil_to(rows, pattern.v), _ceil_to(cols, pattern.m)
    out = np.zeros((pr, pc), dtype=np.float32)
    out[:rows, :cols] = w
    return out, PaddingRecord(rows, cols, pr, pc)


def unpad(w: np.ndarray, record: PaddingRecord) -> np.ndarray:
    return np.ascontiguousarray(w[: record.original_rows, : record.original_cols])


def _top_k_desc(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, smallest index first on ties."""
    return np.argsort(-values, axis=-1, kind="stable")[..., :k]


def retained_columns(blocks: np.ndarray) -> np.ndarray:
    """Ascending indices of the 4 columns each ``(..., v, m)`` block keeps.

    Column norms are summed in float64 so the choice does not depend on
    float32 accumulation order.
    """
    col_l1 = np.abs(np.asarray(blocks, dtype=np.float64)).sum(axis=-2)  # (..., m)
    return np.sort(_top_k_desc(col_l1, GROUP), axis=-1)


def block_keep(blocks: np.ndarray) -> np.ndarray:
    """Prune a stack of blocks shaped ``(..., v, m)``; returns the keep-mask."""
    blocks = np.asarray(blocks)
    *lead, v, m = blocks.shape
    cols = retained_columns(blocks)  # (..., 4)
    idx = np.broadcast_to(cols[..., None, :], (*lead, v, GROUP))
    picked = np.take_along_axis(blocks, idx, axis=-1)  # (..., v, 4)
    rank = _top_k_desc(picked.astype(np.float64), N_KEPT)  # (..., v, 2)
    keep_cols = np.take_along_axis(idx, rank, axis=-1)
    keep = np.zeros(blocks.shape, dtype=bool)
    np.put_along_axis(keep, keep_cols, True, axis=-1)
    return keep


def to_blocks(a: np.ndarray, pattern: VnmPattern) -> np.ndarray:
    """View ``(R, C)`` as ``(R/v, C/m, v, m)``."""
    rows, cols = a.shape
    return a.reshape(rows // pattern.v, pattern.v, cols // pattern.m, pattern.m).transpose(0, 2, 1, 3)


def from_blocks(blocks: np.ndarray) -> np.ndarray:
    g, b, v, m = blocks.shape
    return blocks.transpose(0, 2, 1, 3).reshape(g * v, b * m)


def prune_vnm(scores, pattern: VnmPattern) -> SparseMask:
    scores = as_scores(scores)
    pattern.check_divisible(*scores.shape)
    keep = from_blocks(block_keep(to_blocks(scores, pattern)))
    return SparseMask(keep, pattern)


def apply_mask(w, mask: SparseMask) -> np.ndarray:
    w = as_matrix(w, "weights")
    if w.shape != mask.shape:
        raise DimensionError(f"weights {w.shape} and mask {mask.shape} differ")
    return np.where(mask.bits, w, np.float32(0.0)).astype(np.float32)


def retained_score(scores, mask: SparseMask) -> float:
    scores = as_scores(scores)
    if scores.shape != mask.shape:
        raise DimensionError(f"scores {scores.shape} and mask {mask.shape} differ")
    return float(scores.astype(np.float64)[mask.bits].sum())
