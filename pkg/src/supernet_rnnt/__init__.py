"""Dual-mode RNN-T supernet: one weight store serving a block-pruned
streaming model and a dense full-context model."""

from .errors import SupernetError
from .sparsity import BlockMask, PruneSchedule, sparsity_after

__all__ = ["BlockMask", "PruneSchedule", "SupernetError", "sparsity_after"]
__version__ = "0.1.0"
