"""Shared data model for V:N:M sparsity.

Dense matrices and importance scores are plain 2-D ``numpy.float32`` arrays;
the helpers here coerce and check them. Everything with extra structure
(patterns, masks, permutations, packed storage, speedup tables) is a frozen
dataclass whose arrays are made read-only on construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional

import numpy as np

N_KEPT = 2
GROUP = 4
VALID_V = (16, 32, 64, 128)


class VnmError(ValueError):
    """Base class for every validation failure raised by the toolkit."""


class DimensionError(VnmError):
    pass


class FormatError(VnmError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Return ``values`` as a finite, C-contiguous 2-D float32 array."""
    a = np.ascontiguousarray(values, dtype=np.float32)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise VnmError(f"{name} contains NaN or Inf")
    return a


def as_scores(values, name: str = "scores") -> np.ndarray:
    a = as_matrix(values, name)
    if (a < 0).any():
        raise VnmError(f"{name} must be nonnegative")
    return a


@dataclass(frozen=True)
class VnmPattern:
    """A (V, N, M) triple. ``m == 4`` is the plain 2:4 baseline."""

    v: int
    m: int
    n: int = N_KEPT

    def __post_init__(self):
        if self.n != N_KEPT:
            raise VnmError(f"only N=2 is supported, got N={self.n}")
        if int(self.v) != self.v or self.v < 1:
            raise VnmError(f"V must be a positive integer, got {self.v}")
        if int(self.m) != self.m or self.m < GROUP:
            raise VnmError(f"M must be an integer >= 4, got {self.m}")
        if self.m > 255:
            raise VnmError("M > 255 cannot be indexed with 8-bit column offsets")

    @classmethod
    def parse(cls, text: str) -> "VnmPattern":
        """Parse ``"64:2:5"`` (or ``"64:5"``)."""
        parts = [p.strip() for p in text.split(":")]
        try:
            if len(parts) == 3:
                return cls(v=int(parts[0]), n=int(parts[1]), m=int(parts[2]))
            if len(parts) == 2:
                return cls(v=int(parts[0]), m=int(parts[1]))
        except ValueError as exc:
            raise VnmError(f"bad pattern {text!r}") from exc
        raise VnmError(f"bad pattern {text!r}; expected V:N:M")

    @property
    def is_baseline(self) -> bool:
        return self.m == GROUP

    @property
    def density(self) -> float:
        return N_KEPT / self.m

    def check_divisible(self, rows: int, cols: int) -> None:
        if rows % self.v or cols % self.m:
            raise DimensionError(
                f"shape {rows}x{cols} is not divisible by V={self.v}, M={self.m}; pad first"
            )

    def __str__(self) -> str:
        return f"{self.v}:{self.n}:{self.m}"


@dataclass(frozen=True)
class SparseMask:
    """Boolean keep-mask tied to a pattern.

    Construction only checks shape divisibility so that deliberately broken
    masks can be built and fed to :func:`validate_mask`. Use
    :meth:`checked` when the caller needs a certified mask.
    """

    bits: np.ndarray
    pattern: VnmPattern

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {bits.shape}")
        self.pattern.check_divisible(*bits.shape)
        object.__setattr__(self, "bits", _frozen(bits.astype(bool, copy=False)))

    @classmethod
    def checked(cls, bits, pattern: VnmPattern) -> "SparseMask":
        mask = cls(bits, pattern)
        report = validate_mask(mask)
        if not report.ok:
            raise VnmError(f"invalid {pattern} mask: {report.describe()}")
        return mask

    @classmethod
    def dense(cls, shape: tuple[int, int], pattern: VnmPattern) -> "SparseMask":
        """All-true mask (not a valid V:N:M mask; used for dense LoRA stages)."""
        return cls(np.ones(shape, dtype=bool), pattern)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    def density(self) -> float:
        return float(self.bits.sum()) / self.bits.size

    def hamming(self, other: "SparseMask") -> int:
        if other.shape != self.shape:
            raise DimensionError(f"mask shapes differ: {self.shape} vs {other.shape}")
        return int(np.count_nonzero(self.bits != other.bits))


class Violation(NamedTuple):
    block_row: int
    block_col: int
    reason: str


@dataclass(frozen=True)
class MaskReport:
    ok: bool
    violations: list[Violation] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(f"block ({v.block_row},{v.block_col}): {v.reason}" for v in self.violations)


MAX_REPORTED = 10


def validate_mask(mask: SparseMask) -> MaskReport:
    """Check every V x M block: each row keeps exactly 2 entries, and all kept
    entries of the block fit inside 4 columns.

    Fewer than 4 live columns is legal: with small V the rows of a block can
    pick their 2 entries from only 2 or 3 of the 4 retained columns.
    """
    p = mask.pattern
    rows, cols = mask.shape
    p.check_divisible(rows, cols)
    blocks = mask.bits.reshape(rows // p.v, p.v, cols // p.m, p.m).transpose(0, 2, 1, 3)
    live = blocks.any(axis=2)  # (G, B, m)
    n_live = live.sum(axis=-1)
    per_row = blocks.sum(axis=-1)  # (G, B, v)
    bad_cols = n_live > GROUP
    bad_rows = (per_row != N_KEPT).any(axis=-1)
    violations: list[Violation] = []
    for g, b in zip(*np.nonzero(bad_cols | bad_rows)):
        if bad_cols[g, b]:
            reason = f"{int(n_live[g, b])} live columns, at most 4 allowed"
        else:
            counts = per_row[g, b].tolist()
            reason = f"per-row kept counts {counts}, expected 2 each"
        violations.append(Violation(int(g), int(b), reason))
        if len(violations) == MAX_REPORTED:
            break
    return MaskReport(ok=not violations, violations=violations)


@dataclass(frozen=True)
class ActivationNorms:
    """Per-input-channel activation L2 norms and the RIA exponent."""

    norms: np.ndarray
    exponent_a: float = 0.5

    def __post_init__(self):
        norms = np.asarray(self.norms, dtype=np.float64).reshape(-1)
        if not np.isfinite(norms).all() or (norms < 0).any():
            raise VnmError("activation norms must be finite and nonnegative")
        if not 0.0 <= self.exponent_a <= 1.0:
            raise VnmError(f"exponent a must lie in [0, 1], got {self.exponent_a}")
        object.__setattr__(self, "norms", _frozen(norms))

    @classmethod
    def ones(cls, n: int, exponent_a: float = 0.5) -> "ActivationNorms":
        return cls(np.ones(n), exponent_a)

    @classmethod
    def from_inputs(cls, x: np.ndarray, exponent_a: float = 0.5) -> "ActivationNorms":
        """Column L2 norms of a (samples, in_features) activation batch."""
        return cls(np.linalg.norm(np.asarray(x, dtype=np.float64), axis=0), exponent_a)

    def __len__(self) -> int:
        return self.norms.shape[0]

    def permuted(self, perm: np.ndarray) -> "ActivationNorms":
        return ActivationNorms(self.norms[perm], self.exponent_a)

    def padded(self, n: int) -> "ActivationNorms":
        if n < len(self):
            raise DimensionError("cannot pad activation norms to a shorter length")
        return ActivationNorms(np.concatenate([self.norms, np.zeros(n - len(self))]), self.exponent_a)


def _check_perm(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64).reshape(-1)
    if not np.array_equal(np.sort(p), np.arange(p.size)):
        raise VnmError(f"{name} is not a permutation of 0..{p.size - 1}")
    return _frozen(p)


@dataclass(frozen=True)
class PermutationPair:
    """Index-array form of the channel permutations.

    The permuted weight is ``w[output_perm][:, input_perm]``, i.e. row ``r``
    of the permuted matrix is original row ``output_perm[r]``.
    """

    input_perm: np.ndarray
    output_perm: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "input_perm", _check_perm(self.input_perm, "input_perm"))
        object.__setattr__(self, "output_perm", _check_perm(self.output_perm, "output_perm"))

    @classmethod
    def identity(cls, rows: int, cols: int) -> "PermutationPair":
        return cls(np.arange(cols), np.arange(rows))

    def inverse(self) -> "PermutationPair":
        return PermutationPair(np.argsort(self.input_perm), np.argsort(self.output_perm))

    def is_identity(self) -> bool:
        return bool(
            np.array_equal(self.input_perm, np.arange(self.input_perm.size))
            and np.array_equal(self.output_perm, np.arange(self.output_perm.size))
        )

    def to_json(self) -> dict:
        return {"input_perm": self.input_perm.tolist(), "output_perm": self.output_perm.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "PermutationPair":
        return cls(np.asarray(data["input_perm"]), np.asarray(data["output_perm"]))


@dataclass(frozen=True)
class PaddingRecord:
    original_rows: int
    original_cols: int
    padded_rows: int
    padded_cols: int

    @property
    def changed(self) -> bool:
        return (self.original_rows, self.original_cols) != (self.padded_rows, self.padded_cols)


@dataclass(frozen=True)
class PackedVnm:
    """Compressed V:N:M storage.

    ``a_n``  (rows, 2*cols/m)     kept values, left-to-right per row
    ``a_i1`` (rows/v, cols/m, 4)  retained column offsets inside each block
    ``a_i2`` (rows, 2*cols/m)     position of each kept value among its block's 4 columns
    """

    pattern: VnmPattern
    rows: int
    cols: int
    a_n: np.ndarray
    a_i1: np.ndarray
    a_i2: np.ndarray

    def __post_init__(self):
        p = self.pattern
        if self.rows < 0 or self.cols < 0:
            raise DimensionError("negative packed dimensions")
        p.check_divisible(self.rows, self.cols)
        k = N_KEPT * self.cols // p.m
        a_n = np.asarray(self.a_n, dtype=np.float32).reshape(self.rows, k)
        a_i1 = np.asarray(self.a_i1).reshape(self.rows // p.v, self.cols // p.m, GROUP)
        a_i2 = np.asarray(self.a_i2).reshape(self.rows, k)
        if a_i1.size and (a_i1.min() < 0 or a_i1.max() >= p.m):
            raise FormatError(f"a_i1 entries must lie in [0, {p.m})")
        if a_i2.size and (a_i2.min() < 0 or a_i2.max() >= GROUP):
            raise FormatError("a_i2 entries must lie in [0, 4)")
        if a_i1.size and not (np.diff(a_i1.astype(np.int64), axis=-1) > 0).all():
            raise FormatError("a_i1 block indices must be strictly increasing")
        if a_i2.size:
            pairs = a_i2.reshape(self.rows, -1, N_KEPT).astype(np.int64)
            if not (pairs[..., 1] > pairs[..., 0]).all():
                raise FormatError("a_i2 pairs must be strictly increasing within each group")
        object.__setattr__(self, "a_n", _frozen(a_n))
        object.__setattr__(self, "a_i1", _frozen(a_i1.astype(np.uint8)))
        object.__setattr__(self, "a_i2", _frozen(a_i2.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols


BASELINE_V: Optional[int] = None


@dataclass(frozen=True)
class SpeedupTable:
    """Measured speedups keyed by ``(v, m)``; ``(None, 4)`` is the 2:4 baseline."""

    entries: dict
    batch_size: int = 1

    def __post_init__(self):
        clean = {}
        for (v, m), s in self.entries.items():
            if m == GROUP:
                v = BASELINE_V
            key = (None if v is None else int(v), int(m))
            if key in clean:
                raise VnmError(f"duplicate speedup entry for {key}")
            s = float(s)
            if not np.isfinite(s) or s <= 0:
                raise VnmError(f"speedup for {key} must be positive, got {s}")
            clean[key] = s
        if self.batch_size < 1:
            raise VnmError("batch_size must be positive")
        object.__setattr__(self, "entries", clean)

    def get(self, v: Optional[int], m: int) -> Optional[float]:
        if m == GROUP:
            v = BASELINE_V
        return self.entries.get((v, m))

    def __iter__(self) -> Iterator[tuple[tuple[Optional[int], int], float]]:
        return iter(sorted(self.entries.items(), key=lambda kv: (kv[0][0] or 0, kv[0][1])))

    def __len__(self) -> int:
        return len(self.entries)
