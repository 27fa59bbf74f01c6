"""(V, M) selection on the accuracy/speedup front.

Mask diversity of a V:N:M layer of shape (rows, cols) is
``[C(M,4) * C(4,2)**V] ** (rows*cols / (V*M))``; everything here works with the
per-element log base ``ln K(V, M)`` so nothing overflows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .core import GROUP, N_KEPT, VALID_V, SpeedupTable, VnmError

LN_C42 = math.log(math.comb(GROUP, N_KEPT))


def log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def ln_k(v: Optional[int], m: int) -> float:
    """``ln K(v, m) = (ln C(m,4) + v ln C(4,2)) / (v m)``.

    ``v=None`` is accepted for the 2:4 baseline, where the value does not
    depend on ``v``.
    """
    if m < GROUP:
        raise VnmError(f"ln K undefined for M={m} < 4")
    if v is None:
        if m != GROUP:
            raise VnmError("V may only be omitted for the 2:4 baseline")
        return LN_C42 / GROUP
    if v < 1:
        raise VnmError(f"V must be >= 1, got {v}")
    return (log_comb(m, GROUP) + v * LN_C42) / (v * m)


def md_order(combos: Sequence[tuple]) -> list[tuple]:
    """Sort ``(v, m)`` pairs by descending mask diversity; stable on ties."""
    if not combos:
        raise VnmError("md_order needs at least one combination")
    return sorted(combos, key=lambda c: -ln_k(*c))


def network_log_md(v: int, m: int, layer_shapes: Iterable[tuple[int, int]]) -> float:
    """Log mask diversity of a whole network: sum over layers of rows*cols*ln K."""
    return sum(r * c for r, c in layer_shapes) * ln_k(v, m)


def sparsity_of(m: int) -> float:
    if m < GROUP:
        raise VnmError(f"M must be >= 4, got {m}")
    return 1.0 - N_KEPT / m


@dataclass(frozen=True)
class SelectionQuery:
    threshold_s: float
    table: SpeedupTable
    candidate_v: tuple = VALID_V
    m_range: tuple = (GROUP, 16)

    def __post_init__(self):
        if not self.threshold_s >= 0 or math.isinf(self.threshold_s):
            raise VnmError(f"threshold must be a finite nonnegative number, got {self.threshold_s}")
        if not self.candidate_v:
            raise VnmError("candidate V set is empty")
        lo, hi = self.m_range
        if lo > hi or hi < GROUP:
            raise VnmError(f"bad M range {self.m_range}")
        object.__setattr__(self, "candidate_v", tuple(sorted(set(int(v) for v in self.candidate_v))))


@dataclass
class SiftResult:
    v: Optional[int]
    m: int
    speedup: float
    ln_k: float
    phase1: list = field(default_factory=list)
    phase2: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "v": self.v,
            "m": self.m,
            "pattern": f"{'*' if self.v is None else self.v}:2:{self.m}",
            "speedup": self.speedup,
            "ln_k": self.ln_k,
            "phase1": self.phase1,
            "phase2": self.phase2,
        }


class NoFeasibleCombination(VnmError):
    pass


def sift(query: SelectionQuery) -> SiftResult:
    """Two-phase sifting under the speedup threshold.

    Phase 1 keeps, per V, the smallest feasible M (the 2:4 baseline row is its
    own group). Phase 2 picks the survivor with the largest ln K; ties go to
    the smaller V, then the smaller M. Table entries outside the candidate grid
    and missing grid entries are ignored.
    """
    lo, hi = query.m_range
    table = query.table
    groups: list[tuple[Optional[int], list[int]]] = []
    if lo <= GROUP <= hi:
        groups.append((None, [GROUP]))
    m_grid = [m for m in range(max(lo, GROUP + 1), hi + 1)]
    groups.extend((v, m_grid) for v in query.candidate_v)

    phase1 = []
    for v, ms in groups:
        for m in ms:
            s = table.get(v, m)
            if s is not None and s >= query.threshold_s:
                phase1.append({"v": v, "m": m, "speedup": s, "ln_k": ln_k(v, m)})
                break
    if not phase1:
        raise NoFeasibleCombination(
            f"no feasible combination: nothing reaches speedup {query.threshold_s}"
        )
    phase2 = sorted(phase1, key=lambda c: (-c["ln_k"], -1 if c["v"] is None else c["v"], c["m"]))
    best = phase2[0]
    return SiftResult(best["v"], best["m"], best["speedup"], best["ln_k"], phase1, phase2)
