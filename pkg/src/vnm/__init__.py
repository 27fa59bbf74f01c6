"""V:N:M sparsity: pattern selection, pruning, channel permutation, packed
storage and a toy training sandbox."""

from .core import (
    ActivationNorms,
    DimensionError,
    FormatError,
    MaskReport,
    PackedVnm,
    PermutationPair,
    SparseMask,
    SpeedupTable,
    VnmError,
    VnmPattern,
    validate_mask,
)
from .importance import abs_scores, ria_scores, scores_for
from .packformat import bench, pack, spmm, unpack
from .permutation import alternate_cp, apply_permutation_pair, cp_objective
from .pruner import apply_mask, pad_weights, prune_vnm, unpad
from .selection import SelectionQuery, ln_k, sift

__version__ = "0.1.0"

__all__ = [
    "ActivationNorms", "DimensionError", "FormatError", "MaskReport", "PackedVnm",
    "PermutationPair", "SparseMask", "SpeedupTable", "VnmError", "VnmPattern",
    "abs_scores", "alternate_cp", "apply_mask", "apply_permutation_pair", "bench",
    "cp_objective", "ln_k", "pack", "pad_weights", "prune_vnm", "ria_scores",
    "scores_for", "SelectionQuery", "sift", "spmm", "unpack", "unpad", "validate_mask",
]
