# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Dyadic partition of the covariate cube [0, 1]^d.

Bins at level `l` are boxes of side 2^-l with 1-based integer coordinates.
A point on a shared face belongs to the bin whose centre is closest to the
origin, which amounts to half-open boxes (lo, hi] with the lower face of the
cube closed.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from utils.errors import DomainError

_logger = logging.getLogger(__name__)

# Bin indices must fit a 64-bit Morton code.
MAX_INDEX_BITS = 63


@dataclass(frozen=True)
class BinId:
    """Node of the dyadic partition tree.

    Attributes:
        level: Depth of the node. The side length is 2^-level.
        index: 1-based integer coordinates, each in [1, 2^level].
    """

    level: int
    index: Tuple[int, ...]

    @property
    def dim(self) -> int:
        """Dimension of the cube the bin lives in."""
        return len(self.index)

    @property
    def side(self) -> float:
        """Side length |B| of the bin."""
        return math.ldexp(1.0, -self.level)


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box."""

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def contains(self, x: Sequence[float]) -> bool:
        """Check if the closed box contains point `x`."""
        return all(lo <= xi <= hi for lo, xi, hi in zip(self.lower, x, self.upper))


def check_level(level: int, dim: int) -> None:
    """Check that bins at `level` in dimension `dim` have a 64-bit index.

    Raises:
        DomainError: Raised if the level is negative or overflows the index space.
    """
    if dim < 1:
        raise DomainError(f"Dimension must be positive, not {dim}")
    if level < 0:
        raise DomainError(f"Level must be non-negative, not {level}")
    if level * dim > MAX_INDEX_BITS:
        raise DomainError(
            f"Level {level} in dimension {dim} overflows a {MAX_INDEX_BITS}-bit bin index"
        )


def root(dim: int) -> BinId:
    """Get the level-0 bin covering the whole cube."""
    check_level(0, dim)
    return BinId(0, (1,) * dim)


def bin_of(level: int, x: Sequence[float]) -> BinId:
    """Locate the bin at `level` that owns point `x`.

    Args:
        level: Depth of the partition to search.
        x: Point in [0, 1]^d.

    Returns:
        BinId: The closed bin containing `x` whose centre is closest to the origin.

    Raises:
        DomainError: Raised if a coordinate lies outside [0, 1].
    """
    check_level(level, len(x))
    index = []
    for xi in x:
        if not 0.0 <= xi <= 1.0:
            raise DomainError(f"Coordinate {xi} lies outside [0, 1]")
        index.append(max(math.ceil(math.ldexp(xi, level)), 1))

    return BinId(level, tuple(index))


def children(b: BinId) -> List[BinId]:
    """Get the 2^d children of bin `b` in lexicographic index order."""
    check_level(b.level + 1, b.dim)
    base = [2 * k - 1 for k in b.index]
    return [
        BinId(b.level + 1, tuple(k + o for k, o in zip(base, offset)))
        for offset in itertools.product((0, 1), repeat=b.dim)
    ]


def parent(b: BinId) -> BinId:
    """Get the bin one level above `b`.

    Raises:
        DomainError: Raised if `b` is the root.
    """
    if b.level == 0:
        raise DomainError("The root bin has no parent")
    return BinId(b.level - 1, tuple((k + 1) // 2 for k in b.index))


def is_ancestor(a: BinId, b: BinId) -> bool:
    """Check if `a` is `b` or one of its ancestors."""
    if a.dim != b.dim or a.level > b.level:
        return False
    shift = b.level - a.level
    return all(((kb - 1) >> shift) + 1 == ka for ka, kb in zip(a.index, b.index))


def bin_box(b: BinId) -> Box:
    """Get the closed box spanned by bin `b`."""
    return Box(
        lower=tuple(math.ldexp(k - 1, -b.level) for k in b.index),
        upper=tuple(math.ldexp(k, -b.level) for k in b.index),
    )


def bin_indices(level: int, points: np.ndarray) -> np.ndarray:
    """Vectorized `bin_of` returning 0-based indices.

    Args:
        level: Depth of the partition.
        points: Array of shape (n, d) with coordinates in [0, 1].

    Returns:
        np.ndarray: Integer array of shape (n, d).
    """
    points = np.asarray(points, dtype=float)
    check_level(level, points.shape[1])
    if points.size and (np.any(points < 0.0) or np.any(points > 1.0) or np.isnan(points).any()):
        raise DomainError("Points must lie inside [0, 1]^d")
    scaled = np.ceil(np.ldexp(points, level)).astype(np.int64) - 1
    return np.maximum(scaled, 0)


def morton_codes(level: int, points: np.ndarray) -> np.ndarray:
    """Interleave the bin indices of `points` at `level` into Morton codes.

    Points sharing a bin at any coarser level share a contiguous code range,
    see `morton_range`.
    """
    idx = bin_indices(level, points).astype(np.uint64)
    n, dim = idx.shape
    codes = np.zeros(n, dtype=np.uint64)
    for bit in range(level):
        for axis in range(dim):
            shift = np.uint64(bit * dim + (dim - 1 - axis))
            codes |= ((idx[:, axis] >> np.uint64(bit)) & np.uint64(1)) << shift
    return codes


def morton_prefix(b: BinId) -> int:
    """Get the Morton code of bin `b` at its own level."""
    code = 0
    for bit in range(b.level):
        for axis, k in enumerate(b.index):
            code |= (((k - 1) >> bit) & 1) << (bit * b.dim + (b.dim - 1 - axis))
    return code


def morton_range(b: BinId, level: int) -> Tuple[int, int]:
    """Get the half-open range of level-`level` Morton codes inside bin `b`.

    Raises:
        DomainError: Raised if `level` is coarser than the bin.
    """
    if level < b.level:
        raise DomainError(f"Cannot index level-{b.level} bin with level-{level} codes")
    shift = b.dim * (level - b.level)
    prefix = morton_prefix(b)
    return prefix << shift, (prefix + 1) << shift
