"""Weight importance scores: plain magnitude (ABS) and relative importance
with activation scaling (RIA)."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .core import ActivationNorms, DimensionError, VnmError, as_matrix

CRITERIA = ("abs", "ria")


def abs_scores(w) -> np.ndarray:
    return np.abs(as_matrix(w, "weights"))


def ria_scores(w, act: Optional[ActivationNorms] = None) -> np.ndarray:
    """Relative importance of each weight inside its column and its row,
    scaled by the input channel's activation norm raised to ``act.exponent_a``.

    Activation norms attach to input channels (columns of ``w``). A zero row
    or column sum contributes 0 instead of NaN. Missing ``act`` means all-ones.
    """
    a = np.abs(as_matrix(w, "weights")).astype(np.float64)
    rows, cols = a.shape
    if act is None:
        act = ActivationNorms.ones(cols)
    if len(act) != cols:
        raise DimensionError(f"{len(act)} activation norms for {cols} input channels")
    # Summing sorted values makes the sums independent of channel order, so
    # scores of a permuted matrix are exactly the permuted scores.
    col_sum = np.sort(a, axis=0).sum(axis=0, keepdims=True)
    row_sum = np.sort(a, axis=1).sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        by_col = np.where(col_sum > 0, a / np.where(col_sum > 0, col_sum, 1.0), 0.0)
        by_row = np.where(row_sum > 0, a / np.where(row_sum > 0, row_sum, 1.0), 0.0)
    scale = np.power(act.norms, act.exponent_a)
    return ((by_col + by_row) * scale[None, :]).astype(np.float32)


def scores_for(w, criterion: str, act: Optional[ActivationNorms] = None) -> np.ndarray:
    if criterion == "abs":
        return abs_scores(w)
    if criterion == "ria":
        return ria_scores(w, act)
    raise VnmError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
