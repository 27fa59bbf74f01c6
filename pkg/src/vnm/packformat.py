"""Compressed V:N:M storage, a reference sparse matmul, and the SpMM benchmark."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    GROUP,
    N_KEPT,
    DimensionError,
    PackedVnm,
    SparseMask,
    SpeedupTable,
    VnmError,
    VnmPattern,
    as_matrix,
    validate_mask,
)
from .pruner import apply_mask, pad_weights, prune_vnm, to_blocks


def pack(w_masked, mask: SparseMask) -> PackedVnm:
    w = as_matrix(w_masked, "weights")
    if w.shape != mask.shape:
        raise DimensionError(f"weights {w.shape} and mask {mask.shape} differ")
    report = validate_mask(mask)
    if not report.ok:
        raise VnmError(f"mask invalid for {mask.pattern}: {report.describe()}")
    if np.any(w[~mask.bits] != 0):
        raise VnmError("weights have nonzero entries outside the mask")
    p = mask.pattern
    rows, cols = w.shape
    nb = cols // p.m
    blocks = to_blocks(mask.bits, p)  # (G, B, v, m)
    live = blocks.any(axis=2)  # (G, B, m)
    # Blocks with fewer than 4 live columns take the lowest unused columns
    # as retained so that every block still lists 4 indices.
    short = 4 - live.sum(axis=-1)
    if short.any():
        live = live.copy()
        spare_rank = np.cumsum(~live, axis=-1)
        live |= (~live) & (spare_rank <= short[..., None])
    a_i1 = np.nonzero(live)[-1].reshape(rows // p.v, nb, GROUP)
    # slot of each in-block column among the block's 4 live columns
    slot = np.cumsum(live, axis=-1) - 1  # (G, B, m)
    row_slot = np.repeat(slot, p.v, axis=0)  # (R, B, m)
    bits = mask.bits.reshape(rows, nb, p.m)
    k = N_KEPT * nb
    # nonzero() walks row-major, so kept entries come out left to right per row
    r_idx, b_idx, c_idx = np.nonzero(bits)
    a_n = w.reshape(rows, nb, p.m)[r_idx, b_idx, c_idx].reshape(rows, k)
    a_i2 = row_slot[r_idx, b_idx, c_idx].reshape(rows, k)
    return PackedVnm(p, rows, cols, a_n, a_i1, a_i2)


def _gather_columns(p: PackedVnm) -> np.ndarray:
    """Absolute column index of every stored value, shape (rows, 2*cols/m)."""
    pat = p.pattern
    nb = p.cols // pat.m
    i1 = np.repeat(p.a_i1.astype(np.int64), pat.v, axis=0)  # (R, B, 4)
    i2 = p.a_i2.astype(np.int64).reshape(p.rows, nb, N_KEPT)
    local = np.take_along_axis(i1, i2, axis=-1)  # (R, B, 2)
    return (local + (np.arange(nb) * pat.m)[None, :, None]).reshape(p.rows, -1)


def unpack(p: PackedVnm) -> np.ndarray:
    out = np.zeros((p.rows, p.cols), dtype=np.float32)
    if p.rows == 0 or p.cols == 0:
        return out
    cols = _gather_columns(p)
    np.put_along_axis(out, cols, p.a_n, axis=1)
    return out


@dataclass
class MultCounter:
    """Tallies scalar multiplications performed by :func:`spmm`."""

    mults: int = 0
    calls: int = 0


def spmm(p: PackedVnm, x, counter: Optional[MultCounter] = None, stripe_rows: int = 0) -> np.ndarray:
    """``unpack(p) @ x`` computed from the packed arrays.

    For each group of rows the kernel gathers the rows of ``x`` addressed by
    a_i1/a_i2 and multiplies them by the stored values, so exactly
    ``rows * 2*cols/m * x.cols`` products are formed and the dense weight is
    never rebuilt. ``stripe_rows`` bounds the gather buffer (default 16 rows).
    """
    x = as_matrix(x, "x")
    if x.shape[0] != p.cols:
        raise DimensionError(f"x has {x.shape[0]} rows, packed matrix has {p.cols} columns")
    n = x.shape[1]
    out = np.zeros((p.rows, n), dtype=np.float32)
    if p.rows and p.cols:
        cols = _gather_columns(p)
        step = stripe_rows or 16
        for r0 in range(0, p.rows, step):
            sl = slice(r0, min(r0 + step, p.rows))
            tile = x[cols[sl]]  # (rows_in_step, K, n)
            out[sl] = np.einsum("rk,rkn->rn", p.a_n[sl], tile, optimize=False)
    if counter is not None:
        counter.mults += count_mults(p, x.shape[1])
        counter.calls += 1
    return out


def count_mults(p: PackedVnm, x_cols: int) -> int:
    return p.rows * (N_KEPT * p.cols // p.pattern.m) * x_cols


def flop_ratio(pattern: VnmPattern) -> float:
    """Multiplications of a V:N:M matmul relative to the dense one."""
    return N_KEPT / pattern.m


# --------------------------------------------------------------------------
# benchmark

WARMUP = 3
REPEATS = 9


def _time_median(fn: Callable[[], object], warmup: int, repeats: int) -> tuple[float, list[float]]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), samples


@dataclass
class BenchRow:
    pattern: str
    rows: int
    cols: int
    x_cols: int
    dense_s: float
    sparse_s: float
    speedup: float
    dense_spread: float
    sparse_spread: float


@dataclass
class BenchResult:
    table: SpeedupTable
    rows: list = field(default_factory=list)
    warmup: int = WARMUP
    repeats: int = REPEATS


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - declared dependency
        import contextlib

        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def bench(
    sizes: Sequence[tuple[int, int, int]],
    patterns: Sequence[VnmPattern],
    seed: int = 0,
    warmup: int = WARMUP,
    repeats: int = REPEATS,
    include_dense: bool = False,
) -> BenchResult:
    """Median-of-``repeats`` wall time of :func:`spmm` against a dense matmul.

    Padding, pruning and packing happen outside the timed region; the sparse
    side runs on the zero-padded shape, so padding overhead is included in its
    time. Per pattern the speedup is total dense time over total sparse time
    across ``sizes``. ``include_dense`` adds dense-vs-dense control rows
    (pattern ``"dense"``) to :attr:`BenchResult.rows` only.
    """
    if not sizes or any(min(s) <= 0 for s in sizes):
        raise VnmError("benchmark sizes must be positive")
    rng = np.random.default_rng(seed)
    rows_out: list[BenchRow] = []
    entries = {}
    with _single_thread():
        operands = []
        for r, c, n in sizes:
            w = rng.standard_normal((r, c), dtype=np.float32)
            x = rng.standard_normal((c, n), dtype=np.float32)
            operands.append((w, x))
        if include_dense:
            for (w, x), (r, c, n) in zip(operands, sizes):
                d1, s1 = _time_median(lambda: w @ x, warmup, repeats)
                d2, s2 = _time_median(lambda: w @ x, warmup, repeats)
                rows_out.append(BenchRow("dense", r, c, n, d1, d2, d1 / d2, _spread(s1), _spread(s2)))
        for pat in patterns:
            dense_total = sparse_total = 0.0
            for (w, x), (r, c, n) in zip(operands, sizes):
                wp, rec = pad_weights(w, pat)
                xp = np.zeros((rec.padded_cols, n), dtype=np.float32)
                xp[:c] = x
                mask = prune_vnm(np.abs(wp), pat)
                packed = pack(apply_mask(wp, mask), mask)
                d, ds = _time_median(lambda: w @ x, warmup, repeats)
                s, ss = _time_median(lambda: spmm(packed, xp), warmup, repeats)
                dense_total += d
                sparse_total += s
                rows_out.append(BenchRow(str(pat), r, c, n, d, s, d / s, _spread(ds), _spread(ss)))
            key = (None if pat.is_baseline else pat.v, pat.m)
            entries[key] = dense_total / sparse_total
    return BenchResult(SpeedupTable(entries, batch_size=sizes[0][2]), rows_out, warmup, repeats)


def _spread(samples: list[float]) -> float:
    """Interquartile range relative to the median."""
    q = statistics.quantiles(samples, n=4) if len(samples) > 1 else [samples[0]] * 3
    med = statistics.median(samples)
    return (q[2] - q[0]) / med if med > 0 else 0.0
