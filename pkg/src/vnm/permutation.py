"""V:N:M channel permutation.

Both the input (column) and output (row) order of a weight matrix change which
entries survive V:N:M pruning. Starting from identity, the two orders are
improved in turn. One input step runs ``m`` assignment rounds: in round ``s``
the columns sitting at offset ``s`` of every column block are redistributed
over those same offsets, with the cost of sending channel ``j`` to block ``b``
equal to the importance block ``b`` keeps when ``j`` replaces its occupant
(all other columns frozen). Each round is a square linear sum assignment
solved exactly, and it contains the current layout, so the retained importance
cannot drop. Output steps do the same over row offsets inside V-row stripes.
A step's proposal is still only kept when it strictly raises the objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ActivationNorms, DimensionError, PermutationPair, VnmPattern, as_matrix
from .hungarian import hungarian
from .importance import scores_for
from .pruner import block_keep, prune_vnm, to_blocks


def apply_permutation_pair(w, p: PermutationPair) -> np.ndarray:
    """Permuted weight ``P_o W P_i`` as index gathers: ``w[output_perm][:, input_perm]``."""
    w = as_matrix(w, "weights")
    if w.shape != (p.output_perm.size, p.input_perm.size):
        raise DimensionError(f"permutation sizes do not match weights {w.shape}")
    return np.ascontiguousarray(w[p.output_perm][:, p.input_perm])


def invert_on_product(p: PermutationPair, x) -> np.ndarray:
    """Reorder the rows of the right operand ``x`` (in_features, batch) to match
    the permuted columns of the weight."""
    x = np.asarray(x)
    if x.shape[0] != p.input_perm.size:
        raise DimensionError(f"operand has {x.shape[0]} rows, permutation expects {p.input_perm.size}")
    return np.ascontiguousarray(x[p.input_perm])


def restore_output(p: PermutationPair, y) -> np.ndarray:
    """Undo the output permutation on a product computed in permuted order."""
    y = np.asarray(y)
    if y.shape[0] != p.output_perm.size:
        raise DimensionError(f"output has {y.shape[0]} rows, permutation expects {p.output_perm.size}")
    out = np.empty_like(y)
    out[p.output_perm] = y
    return out


def _objective_from_scores(scores: np.ndarray, pattern: VnmPattern) -> float:
    mask = prune_vnm(scores, pattern)
    # fsum is order independent, so equal kept sets give bit-equal objectives.
    return math.fsum(scores[mask.bits].astype(np.float64))


def cp_objective(
    w,
    p: PermutationPair,
    pattern: VnmPattern,
    act: Optional[ActivationNorms] = None,
    criterion: str = "ria",
) -> float:
    """Importance retained after pruning the permuted weight (scores recomputed on it)."""
    wp = apply_permutation_pair(w, p)
    pattern.check_divisible(*wp.shape)
    act_p = None if act is None else act.permuted(p.input_perm)
    return _objective_from_scores(scores_for(wp, criterion, act_p), pattern)


def _kept_total(blocks: np.ndarray) -> np.ndarray:
    """Importance kept by pruning each ``(v, m)`` block; sums the last two axes."""
    return (blocks * block_keep(blocks)).sum(axis=(-2, -1))


def input_round_gains(scores: np.ndarray, pattern: VnmPattern, offset: int) -> np.ndarray:
    """``gain[i, b]``: importance kept over all stripes of column block ``b`` when
    the column at ``offset`` of block ``i`` replaces the one at ``offset`` of ``b``."""
    s = np.asarray(scores, dtype=np.float64)
    rows, cols = s.shape
    v, m = pattern.v, pattern.m
    g, nb = rows // v, cols // m
    blocks = to_blocks(s, pattern)  # (G, B, v, m)
    movers = s[:, offset::m].T.reshape(nb, g, v)
    gains = np.empty((nb, nb))
    for b in range(nb):
        hyp = np.broadcast_to(blocks[:, b], (nb, g, v, m)).copy()
        hyp[..., offset] = movers
        gains[:, b] = _kept_total(hyp).sum(axis=-1)
    return gains


def output_round_gains(scores: np.ndarray, pattern: VnmPattern, offset: int) -> np.ndarray:
    """``gain[i, g]``: importance kept over all column blocks of stripe ``g`` when
    row ``offset`` of stripe ``i`` replaces row ``offset`` of stripe ``g``."""
    s = np.asarray(scores, dtype=np.float64)
    rows, cols = s.shape
    v, m = pattern.v, pattern.m
    ng, nb = rows // v, cols // m
    blocks = to_blocks(s, pattern)  # (G, B, v, m)
    movers = s[offset::v].reshape(ng, nb, m)
    gains = np.empty((ng, ng))
    for g in range(ng):
        hyp = np.broadcast_to(blocks[g], (ng, nb, v, m)).copy()
        hyp[:, :, offset, :] = movers
        gains[:, g] = _kept_total(hyp).sum(axis=-1)
    return gains


def _reassign(order: np.ndarray, offset: int, stride: int, assign: np.ndarray) -> np.ndarray:
    """Move the channel at ``offset`` of group ``i`` to ``offset`` of group ``assign[i]``."""
    occupied = np.arange(assign.size) * stride + offset
    new = order.copy()
    new[occupied[assign]] = order[occupied]
    return new


def solve_input_perm(
    w,
    p: PermutationPair,
    pattern: VnmPattern,
    act: Optional[ActivationNorms] = None,
    criterion: str = "ria",
) -> PermutationPair:
    """One input-permutation step with the output permutation held fixed."""
    base = cp_objective(w, p, pattern, act, criterion)
    wp = apply_permutation_pair(w, p)
    act_p = None if act is None else act.permuted(p.input_perm)
    scores = scores_for(wp, criterion, act_p)
    order = np.arange(wp.shape[1])
    for offset in range(pattern.m):
        gains = input_round_gains(scores[:, order], pattern, offset)
        order = _reassign(order, offset, pattern.m, hungarian(gains, maximize=True))
    cand = PermutationPair(p.input_perm[order], p.output_perm)
    return cand if cp_objective(w, cand, pattern, act, criterion) > base else p


def solve_output_perm(
    w,
    p: PermutationPair,
    pattern: VnmPattern,
    act: Optional[ActivationNorms] = None,
    criterion: str = "ria",
) -> PermutationPair:
    """One output-permutation step with the input permutation held fixed."""
    if pattern.v == 1:
        # single-row stripes: row order cannot change any block's content
        return p
    base = cp_objective(w, p, pattern, act, criterion)
    wp = apply_permutation_pair(w, p)
    act_p = None if act is None else act.permuted(p.input_perm)
    scores = scores_for(wp, criterion, act_p)
    order = np.arange(wp.shape[0])
    for offset in range(pattern.v):
        gains = output_round_gains(scores[order], pattern, offset)
        order = _reassign(order, offset, pattern.v, hungarian(gains, maximize=True))
    cand = PermutationPair(p.input_perm, p.output_perm[order])
    return cand if cp_objective(w, cand, pattern, act, criterion) > base else p


@dataclass
class CpResult:
    perm: PermutationPair
    trace: list = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.trace[0]

    @property
    def objective(self) -> float:
        return self.trace[-1]


def alternate_cp(
    w,
    pattern: VnmPattern,
    act: Optional[ActivationNorms] = None,
    iterations: int = 2,
    criterion: str = "ria",
) -> CpResult:
    """Alternate input/output permutation steps from identity.

    The trace holds the objective at start and after every half-step, so it has
    ``1 + 2 * iterations`` entries and never decreases.
    """
    w = as_matrix(w, "weights")
    pattern.check_divisible(*w.shape)
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    p = PermutationPair.identity(*w.shape)
    trace = [cp_objective(w, p, pattern, act, criterion)]
    for _ in range(iterations):
        p = solve_input_perm(w, p, pattern, act, criterion)
        trace.append(cp_objective(w, p, pattern, act, criterion))
        p = solve_output_perm(w, p, pattern, act, criterion)
        trace.append(cp_objective(w, p, pattern, act, criterion))
    return CpResult(p, trace)
