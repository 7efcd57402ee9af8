"""
Grid geometry: nested level hierarchy, node sets and the coarse-first layout.

Level ``L`` is the input grid and level ``0`` the coarsest one. Along every
dimension a coarser level keeps the even positions of the finer level plus
its last node, so both endpoints survive at every level.
"""

import logging
from enum import Enum
from functools import lru_cache

import numpy as np

from mgrefactor.models.tensorgrid import InvalidGrid, MIN_NODES, TensorGrid, min_nodes

logger = logging.getLogger(__name__)


class InvalidLevel(Exception):
    def __init__(self, level, levels):
        self.message = f"Level {level} is out of range (hierarchy has levels 0..{levels})"
        super(InvalidLevel, self).__init__(self.message)


class ShapeError(Exception):
    def __init__(self, message):
        self.message = message
        super(ShapeError, self).__init__(message)


class Layout(str, Enum):
    HIERARCHICAL = "to_hierarchical"
    NATURAL = "to_natural"


def default_levels(shape):
    """Full-depth level count: floor(log2(min(shape) - 1)).

    Two-node dimensions (a two-snapshot time axis) are never refined and do
    not limit the depth.
    """
    refined = [n for n in shape if n >= MIN_NODES]
    if not refined:
        return 0
    return int(np.floor(np.log2(min(refined) - 1)))


def coarsen_positions(count):
    """Positions kept by the next coarser level out of ``count`` nodes."""
    kept = list(range(0, count, 2))
    if kept[-1] != count - 1:
        kept.append(count - 1)
    return np.asarray(kept, dtype=np.intp)


def mass_diagonals(h):
    """Diagonals of the 1-D mass matrix for interval lengths ``h``.

    The diagonal is 2(h_{i-1} + h_i) with the missing interval at either end
    taken as zero; the off-diagonal entry between nodes i and i+1 is h_i.
    """
    h = np.asarray(h, dtype=np.float64)
    diag = np.zeros(len(h) + 1)
    diag[:-1] += 2.0 * h
    diag[1:] += 2.0 * h
    return diag, h.copy()


class AxisLevel:
    """One dimension of one level: positions, spacings and coarse/fine split."""

    def __init__(self, nodes, coords, coarse_nodes=None):
        self.nodes = np.asarray(nodes, dtype=np.intp)
        self.coords = np.asarray(coords, dtype=np.float64)
        self.size = len(self.nodes)
        self.h = np.diff(self.coords)

        self.coarse_mask = np.zeros(self.size, dtype=bool)
        if coarse_nodes is None:
            self.coarse_mask[:] = True
        else:
            self.coarse_mask[np.searchsorted(self.nodes, coarse_nodes)] = True
        self.coarse_positions = np.flatnonzero(self.coarse_mask)
        self.fine_positions = np.flatnonzero(~self.coarse_mask)

        # Every fine node sits between two coarse neighbours at p-1 and p+1.
        self.ratio = np.zeros(self.size)
        p = self.fine_positions
        if len(p):
            self.ratio[p] = self.h[p - 1] / (self.h[p - 1] + self.h[p])

        # Transfer weights: coarse node q collects rho_{q-1} * y_{q-1} from its
        # left fine neighbour and (1 - rho_{q+1}) * y_{q+1} from its right one.
        q = self.coarse_positions
        self.left_fine = np.clip(q - 1, 0, self.size - 1)
        self.right_fine = np.clip(q + 1, 0, self.size - 1)
        has_left = (q > 0) & ~self.coarse_mask[self.left_fine]
        has_right = (q < self.size - 1) & ~self.coarse_mask[self.right_fine]
        self.left_weight = np.where(has_left, self.ratio[self.left_fine], 0.0)
        self.right_weight = np.where(has_right, 1.0 - self.ratio[self.right_fine], 0.0)

    @property
    def coarse_size(self):
        return len(self.coarse_positions)


class GridHierarchy:
    def __init__(self, shape, coords, levels):
        self.shape = tuple(int(n) for n in shape)
        self.coords = [np.asarray(c, dtype=np.float64) for c in coords]
        self.levels = int(levels)
        self.ndims = len(self.shape)

        # idx[d][l]: indices into the full grid of the nodes at level l
        self.idx = []
        for n in self.shape:
            per_level = [np.arange(n, dtype=np.intp)]
            for _ in range(self.levels):
                finer = per_level[0]
                per_level.insert(0, finer[coarsen_positions(len(finer))])
            self.idx.append(per_level)

        self.h = [
            [np.diff(self.coords[d][self.idx[d][l]]) for l in range(self.levels + 1)]
            for d in range(self.ndims)
        ]
        # r[d][l][i] = h_i / (h_i + h_{i+1})
        self.r = [[_pair_ratios(h) for h in per_dim] for per_dim in self.h]
        self._axes = {}

    def _check_level(self, level):
        if not 0 <= level <= self.levels:
            raise InvalidLevel(level, self.levels)

    def axis(self, dim, level):
        """AxisLevel for ``dim`` at ``level`` (cached)."""
        self._check_level(level)
        key = (dim, level)
        if key not in self._axes:
            nodes = self.idx[dim][level]
            coarse = self.idx[dim][level - 1] if level > 0 else None
            self._axes[key] = AxisLevel(nodes, self.coords[dim][nodes], coarse)
        return self._axes[key]

    def level_shape(self, level):
        self._check_level(level)
        return tuple(len(self.idx[d][level]) for d in range(self.ndims))

    def level_size(self, level):
        return int(np.prod(self.level_shape(level)))

    def class_size(self, level):
        """Number of values stored in class ``level``."""
        if level == 0:
            return self.level_size(0)
        return self.level_size(level) - self.level_size(level - 1)

    def coarse_index(self, level):
        """Index tuple selecting N_{l-1} out of a level-``level`` array."""
        self._check_level(level)
        if level == 0:
            raise InvalidLevel(level, self.levels)
        return np.ix_(*[self.axis(d, level).coarse_positions for d in range(self.ndims)])

    def coarse_mask(self, level):
        """Boolean level-shaped array, True on nodes of N_{l-1}."""
        masks = [self.axis(d, level).coarse_mask for d in range(self.ndims)]
        mask = masks[0]
        for m in masks[1:]:
            mask = np.logical_and.outer(mask, m)
        return mask.reshape(self.level_shape(level))

    def to_dict(self):
        return {
            "shape": list(self.shape),
            "levels": self.levels,
            "level_shapes": [list(self.level_shape(l)) for l in range(self.levels + 1)],
        }


def _pair_ratios(h):
    return h[:-1] / (h[:-1] + h[1:])


def build_hierarchy(grid: TensorGrid, max_levels=None):
    """Construct the nested level hierarchy of ``grid``.

    Args:
        grid: The input grid
        max_levels: Optional cap on the number of levels

    Returns:
        GridHierarchy with L = min(max_levels, floor(log2(min(shape) - 1)))
    """
    time_axis = grid.time_axis
    for d, n in enumerate(grid.shape):
        minimum = min_nodes(d, grid.ndims, time_axis)
        if n < minimum:
            raise InvalidGrid(f"dimension {d} has {n} nodes (minimum {minimum})")

    levels = default_levels(grid.shape)
    if max_levels is not None:
        if max_levels < 1:
            raise InvalidLevel(max_levels, levels)
        levels = min(int(max_levels), levels)

    logger.debug(f"Hierarchy for shape {grid.shape}: {levels} levels")
    return GridHierarchy(grid.shape, grid.coords, levels)


def node_partition(hierarchy: GridHierarchy, level):
    """Split N_l into (N_{l-1}, N_l \\ N_{l-1}).

    Returns:
        Tuple of sorted arrays of linear indices into the full grid
        (dimension 0 fastest).
    """
    if not 1 <= level <= hierarchy.levels:
        raise InvalidLevel(level, hierarchy.levels)

    grids = np.meshgrid(*[hierarchy.idx[d][level] for d in range(hierarchy.ndims)], indexing="ij")
    linear = np.ravel_multi_index(tuple(grids), hierarchy.shape, order="F")
    mask = hierarchy.coarse_mask(level)
    return np.sort(linear[mask]), np.sort(linear[~mask])


class LayoutMap:
    """Bijection between natural and coarse-first linear order of a level.

    ``perm`` gathers: ``hierarchical = natural[perm]``; ``inverse`` undoes it.
    Natural order is Fortran order of the level array. Coarse-first order puts
    the coarsest block first, followed by the coefficient nodes of each finer
    level, each block in natural order.
    """

    def __init__(self, hierarchy: GridHierarchy, level, depth=None):
        hierarchy._check_level(level)
        if depth is None:
            depth = level
        if not 0 <= depth <= level:
            raise InvalidLevel(level - depth, hierarchy.levels)

        positions = np.arange(hierarchy.level_size(level)).reshape(
            hierarchy.level_shape(level), order="F"
        )
        blocks = []
        for l in range(level, level - depth, -1):
            mask = hierarchy.coarse_mask(l)
            blocks.append(positions.ravel(order="F")[~mask.ravel(order="F")])
            positions = positions[hierarchy.coarse_index(l)]
        blocks.append(positions.ravel(order="F"))

        self.level = level
        self.depth = depth
        self.perm = np.concatenate(blocks[::-1])
        self.inverse = np.empty_like(self.perm)
        self.inverse[self.perm] = np.arange(len(self.perm))

    def __len__(self):
        return len(self.perm)


@lru_cache(maxsize=128)
def _layout(hierarchy, level, depth):
    return LayoutMap(hierarchy, level, depth)


def reorder(values, hierarchy: GridHierarchy, level, direction, depth=None):
    """Move level values between natural and coarse-first layouts.

    Args:
        values: Level-``level`` values, flat or shaped (flattened in Fortran order)
        hierarchy: The grid hierarchy
        level: Level the values live on
        direction: Layout.HIERARCHICAL or Layout.NATURAL
        depth: Number of levels to split (default: all the way to level 0)

    Returns:
        Flat array in the requested layout
    """
    direction = Layout(direction)
    flat = np.asarray(values).ravel(order="F")
    layout = _layout(hierarchy, level, level if depth is None else depth)
    if flat.size != len(layout):
        raise ShapeError(
            f"Level {level} holds {len(layout)} values, got {flat.size}"
        )
    if direction is Layout.HIERARCHICAL:
        return flat[layout.perm]
    return flat[layout.inverse]


def apply_mass(values, spacings):
    """Apply the tensor-product mass matrix, one dimension after the other."""
    out = np.asarray(values, dtype=np.float64)
    for d, h in enumerate(spacings):
        diag, off = mass_diagonals(h)
        x = np.moveaxis(out, d, 0)
        y = diag.reshape((-1,) + (1,) * (x.ndim - 1)) * x
        w = off.reshape((-1,) + (1,) * (x.ndim - 1))
        y[1:] += w * x[:-1]
        y[:-1] += w * x[1:]
        out = np.moveaxis(y, 0, d)
    return out


def weighted_l2_norm(grid: TensorGrid):
    """sqrt(u^T M u) with M the tensor product of the finest-level mass matrices."""
    u = np.asarray(grid.values, dtype=np.float64)
    spacings = [np.diff(c) for c in grid.coords]
    quadratic = float(np.sum(u * apply_mass(u, spacings)))
    return float(np.sqrt(max(quadratic, 0.0)))
