"""Label entropy and split information gain, in bits."""

from __future__ import annotations

import numpy as np


def entropy_bits(class_counts) -> float:
    """Shannon entropy ``-sum p log2 p`` of a class-count vector."""
    c = np.asarray(class_counts, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("class counts must be non-negative")
    total = c.sum()
    if total <= 0:
        raise ValueError("class counts are all zero")
    p = c[c > 0] / total
    return float(-np.sum(p * np.log2(p)))


def split_leakage(parent_counts, left_counts, right_counts) -> float:
    """Information gain of splitting ``parent`` into ``left`` and ``right``.

    When the split is on a soft concept below a hard-concept path, this gain is
    the leakage that concept contributes to the leaf.
    """
    parent = np.asarray(parent_counts, dtype=np.int64)
    left = np.asarray(left_counts, dtype=np.int64)
    right = np.asarray(right_counts, dtype=np.int64)
    if not (parent.shape == left.shape == right.shape) or np.any(left + right != parent):
        raise ValueError("left + right counts must equal the parent counts")
    n, n1, n2 = parent.sum(), left.sum(), right.sum()
    if n1 == 0 or n2 == 0:
        return 0.0
    ig = entropy_bits(parent) - (n1 / n * entropy_bits(left) + n2 / n * entropy_bits(right))
    # concavity makes the exact value >= 0; only rounding can push it below
    return max(ig, 0.0)
