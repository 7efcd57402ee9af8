"""
The three processing kernels of one refactoring level.

* grid processing: coefficient computation and restoration by multilinear
  interpolation of the coarse nodes, tile by tile
* linear processing: the mass matrix followed by the transfer to the coarse
  lattice along one dimension, out of place
* iterative processing: batched Thomas solves of the coarse mass matrix

Every node is produced by the same sequence of floating-point operations
whichever tile, fiber batch or worker computes it, so results never depend on
the tiling.
"""

import logging
from functools import lru_cache
from itertools import product

import numpy as np

from mgrefactor.models.tiling import TileConfig, TilePlan
from mgrefactor.multigrid.hierarchy import (
    GridHierarchy,
    InvalidLevel,
    ShapeError,
    mass_diagonals,
)

logger = logging.getLogger(__name__)

DEFAULT_PLAN = TilePlan(TileConfig(32, 8, 8), (0, 1, 2))


class InvalidFusion(Exception):
    def __init__(self, dim):
        self.message = f"The coefficient copy can only be fused with dimension 0, not {dim}"
        super(InvalidFusion, self).__init__(self.message)


class SingularSystem(Exception):
    def __init__(self, index, pivot):
        self.message = f"Non-positive pivot {pivot!r} at row {index} of the mass matrix"
        super(SingularSystem, self).__init__(self.message)


def _check_level(hierarchy, level):
    if not 1 <= level <= hierarchy.levels:
        raise InvalidLevel(level, hierarchy.levels)


def _plan_extents(plan, ndims):
    if plan is None:
        plan = DEFAULT_PLAN
    return plan.extents(ndims)


def _tile_ranges(size, extent):
    return [(s, min(s + extent, size)) for s in range(0, size, extent)]


def _owned_range(mask, start, end):
    """Positions owned by the tile [start, end) along one axis.

    A coarse node belongs to the tile containing it, a fine node to the tile
    containing its left coarse neighbour.
    """
    size = len(mask)
    a = start + 1 if not mask[start] else start
    b = end + 1 if end < size and not mask[end] else end
    return a, b


def _stencil_region(mask, a, b):
    """Smallest range around [a, b) that starts and ends on coarse nodes."""
    lo = a - 1 if not mask[a] else a
    hi = b if not mask[b - 1] else b - 1
    return lo, hi + 1


class TridiagonalOperator:
    """Mass, transfer and coarse Thomas factors of one dimension of one level.

    ``diag``/``off`` are the level-l mass matrix, ``coarse_diag``/``coarse_off``
    the level-(l-1) one. The transfer weights map a level-l vector onto the
    coarse lattice: ``f_q = y_q + left_weight_q * y_{q-1} + right_weight_q * y_{q+1}``.
    """

    def __init__(self, hierarchy: GridHierarchy, level, dim):
        _check_level(hierarchy, level)
        axis = hierarchy.axis(dim, level)
        self.level = level
        self.dim = dim
        self.axis = axis
        self.diag, self.off = mass_diagonals(axis.h)
        self.coarse_diag, self.coarse_off = mass_diagonals(hierarchy.h[dim][level - 1])

        n = len(self.coarse_diag)
        pivots = np.empty(n)
        self.forward = np.zeros(n)
        pivots[0] = self.coarse_diag[0]
        for i in range(1, n):
            w = self.coarse_off[i - 1] / pivots[i - 1]
            self.forward[i] = -w
            pivots[i] = self.coarse_diag[i] - w * self.coarse_off[i - 1]
        for i, pivot in enumerate(pivots):
            if not pivot > 0.0:
                raise SingularSystem(i, float(pivot))
        self.pivots = pivots
        self.backward = 1.0 / pivots

    @property
    def fine_size(self):
        return len(self.diag)

    @property
    def coarse_size(self):
        return len(self.coarse_diag)

    def dense_mass(self, coarse=False):
        diag, off = (self.coarse_diag, self.coarse_off) if coarse else (self.diag, self.off)
        return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)

    def dense_transfer(self):
        """R as a (coarse x fine) matrix."""
        r = np.zeros((self.coarse_size, self.fine_size))
        for row, q in enumerate(self.axis.coarse_positions):
            r[row, q] = 1.0
            if self.axis.left_weight[row]:
                r[row, q - 1] = self.axis.left_weight[row]
            if self.axis.right_weight[row]:
                r[row, q + 1] = self.axis.right_weight[row]
        return r

    def dense_prolongation(self):
        """Linear interpolation from the coarse lattice, (fine x coarse)."""
        p = np.zeros((self.fine_size, self.coarse_size))
        coarse_row = np.cumsum(self.axis.coarse_mask) - 1
        for pos in range(self.fine_size):
            if self.axis.coarse_mask[pos]:
                p[pos, coarse_row[pos]] = 1.0
            else:
                rho = self.axis.ratio[pos]
                p[pos, coarse_row[pos - 1]] = 1.0 - rho
                p[pos, coarse_row[pos + 1]] = rho
        return p

    def dense_masstrans(self):
        return self.dense_transfer() @ self.dense_mass()

    def dense_factors(self):
        """Unit lower and upper bidiagonal factors of the coarse mass matrix."""
        lower = np.eye(self.coarse_size) + np.diag(-self.forward[1:], -1)
        upper = np.diag(self.pivots) + np.diag(self.coarse_off, 1)
        return lower, upper


@lru_cache(maxsize=256)
def tridiagonal_operator(hierarchy, level, dim):
    return TridiagonalOperator(hierarchy, level, dim)


def _expand_axis(values, axis, mask, ratio):
    """Interpolate along ``axis`` from the coarse entries onto every position of ``mask``."""
    x = np.moveaxis(values, axis, 0)
    full = np.empty((len(mask),) + x.shape[1:], dtype=np.float64)
    full[mask] = x
    fine = np.flatnonzero(~mask)
    if len(fine):
        left = full[fine - 1]
        right = full[fine + 1]
        r = ratio[fine].reshape((-1,) + (1,) * (x.ndim - 1))
        full[fine] = left + r * (right - left)
    return np.moveaxis(full, 0, axis)


def interpolate_block(values, masks, ratios):
    """Multilinear interpolant of the coarse nodes of ``values`` on every node.

    Each mask must start and end on a coarse node. Dimensions are expanded in
    ascending order.
    """
    coarse = values[np.ix_(*[np.flatnonzero(m) for m in masks])]
    out = np.asarray(coarse, dtype=np.float64)
    for d, (mask, ratio) in enumerate(zip(masks, ratios)):
        out = _expand_axis(out, d, mask, ratio)
    return out


def _fine_mask(masks):
    coarse = masks[0]
    for m in masks[1:]:
        coarse = np.logical_and.outer(coarse, m)
    return ~np.asarray(coarse).reshape(tuple(len(m) for m in masks))


def grid_process_block(values, out, axes, owned, offsets, restore=False):
    """Coefficients (or restored values) of the ``owned`` box of a level array.

    Args:
        values: Local block of the level array; its first element sits at global
            level position ``offsets``
        out: Array the owned box is written to (same indexing as ``values``)
        axes: AxisLevel per dimension
        owned: Per-dimension global (a, b) ranges to produce
        offsets: Global position of values[0, 0, ...]
        restore: False computes value - interpolant, True interpolant + coefficient
    """
    region = []
    for axis, (a, b) in zip(axes, owned):
        region.append(_stencil_region(axis.coarse_mask, a, b))

    local = tuple(slice(lo - o, hi - o) for (lo, hi), o in zip(region, offsets))
    masks = [axis.coarse_mask[lo:hi] for axis, (lo, hi) in zip(axes, region)]
    ratios = [axis.ratio[lo:hi] for axis, (lo, hi) in zip(axes, region)]

    block = values[local]
    interp = interpolate_block(block, masks, ratios)

    inner = tuple(slice(a - lo, b - lo) for (a, b), (lo, _) in zip(owned, region))
    target = tuple(slice(a - o, b - o) for (a, b), o in zip(owned, offsets))
    source = block[inner]
    fine = _fine_mask([m[s] for m, s in zip(masks, inner)])
    if restore:
        produced = interp[inner] + source
    else:
        produced = source - interp[inner]
    out[target] = np.where(fine, produced, source)


def _check_level_shape(values, hierarchy, level):
    values = np.asarray(values)
    expected = hierarchy.level_shape(level)
    if values.shape != expected:
        raise ShapeError(f"Level {level} values must have shape {expected}, got {values.shape}")
    return values


def _grid_process(values, hierarchy, level, plan, restore):
    axes = [hierarchy.axis(d, level) for d in range(hierarchy.ndims)]
    out = np.empty(values.shape, dtype=np.float64)
    tiles = [_tile_ranges(len(axis.coarse_mask), e) for axis, e in zip(axes, _plan_extents(plan, hierarchy.ndims))]
    offsets = (0,) * hierarchy.ndims
    for tile in product(*tiles):
        owned = [_owned_range(axis.coarse_mask, s, e) for axis, (s, e) in zip(axes, tile)]
        if any(a >= b for a, b in owned):
            continue
        grid_process_block(values, out, axes, owned, offsets, restore=restore)
    return out


def compute_coefficients(values, hierarchy: GridHierarchy, level, plan=None):
    """Replace the values of N_l \\ N_{l-1} by their interpolation residual.

    Args:
        values: Level-``level`` array
        hierarchy: The grid hierarchy
        level: Level l >= 1
        plan: Optional TilePlan (tiling never changes the result)

    Returns:
        Level-shaped float64 array: coefficients on N_l \\ N_{l-1}, the input
        values untouched on N_{l-1}
    """
    _check_level(hierarchy, level)
    values = _check_level_shape(values, hierarchy, level)
    return _grid_process(np.asarray(values, dtype=np.float64), hierarchy, level, plan, False)


def restore_coefficients(coarse, coefficients, hierarchy: GridHierarchy, level, plan=None):
    """Inverse of compute_coefficients.

    ``coarse`` holds the level-(l-1) values, ``coefficients`` a level-l array
    whose entries on N_l \\ N_{l-1} are the coefficients (others are ignored).
    """
    _check_level(hierarchy, level)
    coefficients = _check_level_shape(coefficients, hierarchy, level)
    coarse = _check_level_shape(coarse, hierarchy, level - 1)
    combined = np.array(coefficients, dtype=np.float64)
    combined[hierarchy.coarse_index(level)] = coarse
    return _grid_process(combined, hierarchy, level, plan, True)


def gather_class(values, hierarchy: GridHierarchy, level):
    """Values on N_l \\ N_{l-1} of a level array, dimension 0 fastest."""
    mask = hierarchy.coarse_mask(level)
    return np.asarray(values).ravel(order="F")[~mask.ravel(order="F")]


def scatter_class(class_values, hierarchy: GridHierarchy, level):
    """Level array holding ``class_values`` on N_l \\ N_{l-1} and zeros on N_{l-1}."""
    shape = hierarchy.level_shape(level)
    mask = hierarchy.coarse_mask(level).ravel(order="F")
    class_values = np.asarray(class_values, dtype=np.float64).ravel()
    if class_values.size != int((~mask).sum()):
        raise ShapeError(
            f"Class {level} holds {int((~mask).sum())} values, got {class_values.size}"
        )
    flat = np.zeros(mask.size)
    flat[~mask] = class_values
    return flat.reshape(shape, order="F")


def masstrans_block(x, axis_index, operator, lo, coarse_range):
    """Mass then transfer along ``axis_index`` for the coarse nodes in ``coarse_range``.

    ``x`` covers level positions [lo, lo + x.shape[axis_index]) along the
    axis. Returns the values of the coarse nodes whose level positions fall in
    ``coarse_range`` (a, b), stacked along the axis.
    """
    a, b = coarse_range
    axis = operator.axis
    xs = np.moveaxis(np.asarray(x, dtype=np.float64), axis_index, 0)
    hi = lo + xs.shape[0]
    tail = (1,) * (xs.ndim - 1)

    diag = operator.diag[lo:hi].reshape((-1,) + tail)
    off = operator.off[lo:hi - 1].reshape((-1,) + tail)
    y = diag * xs
    y[1:] += off * xs[:-1]
    y[:-1] += off * xs[1:]

    first, last = np.searchsorted(axis.coarse_positions, [a, b])
    q = axis.coarse_positions[first:last]
    left = np.clip(axis.left_fine[first:last] - lo, 0, hi - lo - 1)
    right = np.clip(axis.right_fine[first:last] - lo, 0, hi - lo - 1)
    lw = axis.left_weight[first:last].reshape((-1,) + tail)
    rw = axis.right_weight[first:last].reshape((-1,) + tail)

    f = y[q - lo]
    f = f + lw * y[left]
    f = f + rw * y[right]
    return np.moveaxis(f, 0, axis_index)


def masstrans_apply(values, hierarchy: GridHierarchy, level, dim, fused_copy=False, workspace=None, plan=None):
    """Apply R_l M_l along ``dim``, out of place.

    Args:
        values: Array whose axis ``dim`` has the level-l node count. Without
            ``fused_copy`` it must already be vec(C): coefficients on
            N_l \\ N_{l-1} and zeros on N_{l-1}
        hierarchy: The grid hierarchy
        level: Level l >= 1
        dim: Dimension to apply along
        fused_copy: Input is the compute_coefficients output; zero the coarse
            nodes and copy vec(C) into ``workspace`` in the same sweep
        workspace: Optional level-shaped output for the fused copy
        plan: Optional TilePlan

    Returns:
        Array whose axis ``dim`` has the level-(l-1) node count
    """
    _check_level(hierarchy, level)
    if fused_copy and dim != 0:
        raise InvalidFusion(dim)
    values = np.asarray(values, dtype=np.float64)
    operator = tridiagonal_operator(hierarchy, level, dim)
    if values.ndim != hierarchy.ndims or values.shape[dim] != operator.fine_size:
        raise ShapeError(
            f"Axis {dim} must hold {operator.fine_size} level-{level} nodes, got shape {values.shape}"
        )

    if fused_copy:
        _check_level_shape(values, hierarchy, level)
        values = np.where(hierarchy.coarse_mask(level), 0.0, values)
        if workspace is not None:
            workspace[...] = values

    extents = _plan_extents(plan, values.ndim)
    out_shape = list(values.shape)
    out_shape[dim] = operator.coarse_size
    out = np.empty(out_shape)

    mask = operator.axis.coarse_mask
    along = _tile_ranges(len(mask), extents[dim])
    across = [
        _tile_ranges(n, e) if d != dim else [None]
        for d, (n, e) in enumerate(zip(values.shape, extents))
    ]
    for s, e in along:
        if not mask[s:e].any():
            continue
        lo, hi = max(s - 2, 0), min(e + 2, len(mask))
        first, last = np.searchsorted(operator.axis.coarse_positions, [s, e])
        for cross in product(*across):
            src = tuple(slice(lo, hi) if d == dim else slice(*cross[d]) for d in range(values.ndim))
            dst = tuple(slice(first, last) if d == dim else slice(*cross[d]) for d in range(values.ndim))
            out[dst] = masstrans_block(values[src], dim, operator, lo, (s, e))
    return out


def thomas_forward(v, operator, start, stop, previous=None):
    """Forward elimination of rows [start, stop) of fibers stacked on axis 0."""
    fwd = operator.forward
    for i in range(start, stop):
        if i == 0:
            continue
        prev = v[i - 1 - start] if i > start else previous
        v[i - start] = v[i - start] + fwd[i] * prev


def thomas_backward(v, operator, start, stop, following=None):
    """Backward substitution of rows [start, stop), last row first."""
    bwd = operator.backward
    off = operator.coarse_off
    n = operator.coarse_size
    for i in range(stop - 1, start - 1, -1):
        if i == n - 1:
            v[i - start] = v[i - start] * bwd[i]
            continue
        nxt = v[i + 1 - start] if i + 1 < stop else following
        v[i - start] = (v[i - start] - off[i] * nxt) * bwd[i]


def solve_correction(load, hierarchy: GridHierarchy, level, dim, plan=None):
    """Solve M_{l-1} z = f along every fiber of ``dim``.

    Args:
        load: Array whose axis ``dim`` has the level-(l-1) node count
        hierarchy: The grid hierarchy
        level: Level l >= 1 (the system is the level-(l-1) mass matrix)
        dim: Dimension of the fibers
        plan: Optional TilePlan; fibers are solved in batches of one tile

    Returns:
        The corrections, same shape as ``load``
    """
    _check_level(hierarchy, level)
    load = np.asarray(load, dtype=np.float64)
    operator = tridiagonal_operator(hierarchy, level, dim)
    n = operator.coarse_size
    if load.ndim != hierarchy.ndims or load.shape[dim] != n:
        raise ShapeError(
            f"Axis {dim} must hold {n} level-{level - 1} nodes, got shape {load.shape}"
        )

    z = np.moveaxis(np.array(load), dim, 0)
    extents = _plan_extents(plan, load.ndim)
    cross_extents = [e for d, e in enumerate(extents) if d != dim]
    batches = [_tile_ranges(size, e) for size, e in zip(z.shape[1:], cross_extents)]
    for batch in product(*batches):
        index = (slice(None),) + tuple(slice(*r) for r in batch)
        fibers = z[index]
        thomas_forward(fibers, operator, 0, n)
        thomas_backward(fibers, operator, 0, n)
        z[index] = fibers
    return np.moveaxis(z, 0, dim)


def apply_correction(coarse, z, sign=1):
    """coarse + sign * z on N_{l-1}."""
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign!r}")
    coarse = np.asarray(coarse, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if coarse.shape != z.shape:
        raise ShapeError(f"Correction shape {z.shape} does not match coarse shape {coarse.shape}")
    return coarse + float(sign) * z
