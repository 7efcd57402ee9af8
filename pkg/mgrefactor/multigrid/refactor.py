"""
Level-by-level decomposition and recomposition.

Decomposition walks from the input level L down to level 1. Per level it
computes the coefficients, applies the mass-trans operator along every
dimension in ascending order (the first one fused with the coefficient
copy), solves for the correction along every dimension in the same order and
adds the correction to the coarse nodes. Recomposition runs the same steps in
reverse, recomputing each correction from the stored coefficients.
"""

import logging
import time
from collections import defaultdict
from enum import Enum

import numpy as np

from mgrefactor.models.refactored import RefactoredData, ReconstructionReport
from mgrefactor.models.tensorgrid import MAX_DIMS, MIN_TIME_STEPS, InvalidGrid, TensorGrid, uniform_coords
from mgrefactor.models.tiling import InvalidTileConfig, TileConfig, TilePlan
from mgrefactor.multigrid.hierarchy import (
    GridHierarchy,
    InvalidLevel,
    ShapeError,
    build_hierarchy,
    weighted_l2_norm,
)
from mgrefactor.multigrid.kernels import (
    apply_correction,
    compute_coefficients,
    gather_class,
    masstrans_apply,
    restore_coefficients,
    scatter_class,
    solve_correction,
)

logger = logging.getLogger(__name__)

DEFAULT_TILE = (32, 8, 8)
DEFAULT_BUDGET = 4096

COEFFICIENT = "coefficient"
COPY = "copy"
APPLY = "apply"


def masstrans_phase(dim):
    return f"masstrans[{dim}]"


def solve_phase(dim):
    return f"solve[{dim}]"


class TilingPhase(str, Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


def select_tiling(ndims, shape, budget=DEFAULT_BUDGET, phase=TilingPhase.SPATIAL, extents=None):
    """Choose the tiled and outer-looped dimensions of a kernel sweep.

    Up to three dimensions are tiled and dimension 0 is always one of them.
    On 4-D (3-D space plus time) data the spatial phase tiles the three
    spatial dimensions and loops over time; the temporal phase tiles
    dimensions 0, 1 and time and loops over dimension 2.

    Args:
        ndims: Number of grid dimensions (1..4)
        shape: Grid shape
        budget: Maximum tile volume in elements
        phase: TilingPhase.SPATIAL or TilingPhase.TEMPORAL
        extents: Requested (B_x, B_y, B_z), clipped to the shape and halved
            (largest first) until the volume fits the budget

    Returns:
        TilePlan
    """
    if not 1 <= ndims <= MAX_DIMS:
        raise InvalidGrid(f"{ndims} dimensions (supported: 1..{MAX_DIMS})")
    if budget < 1:
        raise InvalidTileConfig(f"workspace budget {budget} must be positive")
    phase = TilingPhase(phase)

    if ndims <= 3:
        tiled, outer = tuple(range(ndims)), ()
    elif phase is TilingPhase.SPATIAL:
        tiled, outer = (0, 1, 2), (3,)
    else:
        tiled, outer = (0, 1, 3), (2,)

    requested = list(extents or DEFAULT_TILE)
    sizes = [min(int(e), int(shape[d])) for e, d in zip(requested, tiled)]
    while int(np.prod(sizes)) > budget:
        largest = int(np.argmax(sizes))
        sizes[largest] = max(sizes[largest] // 2, 1)
    sizes += [1] * (3 - len(sizes))

    return TilePlan(TileConfig(*sizes), tiled, outer)


class PassCounter:
    """Full-array passes per level, recorded from the array sizes each kernel touches.

    A pass over level l touches |N_l| elements; a phase touching fewer counts
    the corresponding fraction.
    """

    def __init__(self, hierarchy: GridHierarchy):
        self.hierarchy = hierarchy
        self.elements = defaultdict(dict)

    def record(self, level, phase, elements):
        self.elements[level][phase] = self.elements[level].get(phase, 0) + int(elements)

    def per_level(self):
        return {
            level: {
                phase: count / self.hierarchy.level_size(level)
                for phase, count in phases.items()
            }
            for level, phases in sorted(self.elements.items())
        }

    def to_dict(self):
        per_level = self.per_level()
        return {
            "per_level": {str(l): phases for l, phases in per_level.items()},
            "level_totals": {str(l): sum(p.values()) for l, p in per_level.items()},
            "accumulated": accumulated_passes(per_level, self.hierarchy),
        }


def pass_accounting(hierarchy: GridHierarchy):
    """Expected per-level pass counts of one decomposition.

    One coefficient pass and one fused copy pass per level; the mass-trans
    sweep along d reads an array already reduced along the dimensions before
    d; each solve and the correction apply touch N_{l-1} only.
    """
    accounting = {}
    for level in range(1, hierarchy.levels + 1):
        fine = hierarchy.level_shape(level)
        coarse = hierarchy.level_shape(level - 1)
        size = hierarchy.level_size(level)
        coarse_size = hierarchy.level_size(level - 1)

        phases = {COEFFICIENT: size / size, COPY: size / size}
        for d in range(hierarchy.ndims):
            touched = int(np.prod(coarse[:d], dtype=np.int64) * np.prod(fine[d:], dtype=np.int64))
            phases[masstrans_phase(d)] = touched / size
        for d in range(hierarchy.ndims):
            phases[solve_phase(d)] = coarse_size / size
        phases[APPLY] = coarse_size / size
        accounting[level] = phases
    return accounting


def accumulated_passes(per_level, hierarchy: GridHierarchy):
    """Total passes of a decomposition relative to one pass over the input."""
    finest = hierarchy.level_size(hierarchy.levels)
    return float(
        sum(
            sum(phases.values()) * hierarchy.level_size(level) / finest
            for level, phases in per_level.items()
        )
    )


class _Plans:
    def __init__(self, shape, tile, budget, temporal):
        extents = (tile or TileConfig(*DEFAULT_TILE)).as_tuple()
        self.spatial = select_tiling(len(shape), shape, budget, TilingPhase.SPATIAL, extents)
        self.temporal = select_tiling(len(shape), shape, budget, TilingPhase.TEMPORAL, extents)
        self.time_dim = len(shape) - 1 if temporal else None

    def along(self, dim):
        return self.temporal if dim == self.time_dim else self.spatial


def _decompose(grid, levels, tile, budget, counter, temporal):
    hierarchy = build_hierarchy(grid, levels)
    if counter is None:
        counter = PassCounter(hierarchy)
    plans = _Plans(grid.shape, tile, budget, temporal)

    current = np.asarray(grid.values, dtype=np.float64)
    classes = [None] * (hierarchy.levels + 1)
    for level in range(hierarchy.levels, 0, -1):
        coefficients = compute_coefficients(current, hierarchy, level, plan=plans.spatial)
        counter.record(level, COEFFICIENT, coefficients.size)

        workspace = np.empty(coefficients.shape)
        load = coefficients
        for d in range(hierarchy.ndims):
            counter.record(level, masstrans_phase(d), load.size)
            load = masstrans_apply(
                load,
                hierarchy,
                level,
                d,
                fused_copy=(d == 0),
                workspace=workspace if d == 0 else None,
                plan=plans.along(d),
            )
            if d == 0:
                counter.record(level, COPY, workspace.size)
        classes[level] = gather_class(workspace, hierarchy, level)

        z = load
        for d in range(hierarchy.ndims):
            z = solve_correction(z, hierarchy, level, d, plan=plans.along(d))
            counter.record(level, solve_phase(d), z.size)

        current = apply_correction(coefficients[hierarchy.coarse_index(level)], z, +1)
        counter.record(level, APPLY, z.size)
        logger.debug(f"Level {level}: {classes[level].size} coefficients")

    classes[0] = current.ravel(order="F")
    return RefactoredData(
        grid.shape,
        grid.coords,
        hierarchy.levels,
        grid.precision,
        classes,
        passes=counter.to_dict(),
    )


def decompose(grid: TensorGrid, levels=None, tile=None, budget=DEFAULT_BUDGET, counter=None):
    """Refactor ``grid`` into L + 1 coefficient classes.

    Args:
        grid: Input grid (not modified)
        levels: Optional cap on the number of levels
        tile: Optional TileConfig for the kernel sweeps
        budget: Tile volume budget in elements
        counter: Optional PassCounter to record into

    Returns:
        RefactoredData with classes 0..L
    """
    start = time.perf_counter()
    refactored = _decompose(grid, levels, tile, budget, counter, temporal=False)
    logger.info(
        f"Decomposed {grid.shape} into {refactored.levels + 1} classes "
        f"in {time.perf_counter() - start:.3f}s"
    )
    return refactored


def decompose_spatiotemporal(snapshots, time_coords=None, levels=None, tile=None, budget=DEFAULT_BUDGET, counter=None):
    """Refactor a sequence of snapshots as one grid with time as its last dimension.

    Per level the spatial dimensions are processed before the temporal one.
    Two snapshots give a time axis that stays unrefined at every level, so
    the level count comes from the spatial dimensions alone.
    """
    snapshots = list(snapshots)
    if len(snapshots) < MIN_TIME_STEPS:
        raise ShapeError(
            f"Spatiotemporal refactoring needs at least {MIN_TIME_STEPS} snapshots, got {len(snapshots)}"
        )
    first = snapshots[0]
    for i, snapshot in enumerate(snapshots[1:], start=1):
        if snapshot.shape != first.shape:
            raise ShapeError(f"Snapshot {i} has shape {snapshot.shape}, expected {first.shape}")
        if any(not np.array_equal(a, b) for a, b in zip(snapshot.coords, first.coords)):
            raise ShapeError(f"Snapshot {i} does not share the coordinates of snapshot 0")
    if first.ndims + 1 > MAX_DIMS:
        raise ShapeError(f"{first.ndims}-D snapshots plus time exceed {MAX_DIMS} dimensions")

    if time_coords is None:
        time_coords = uniform_coords(len(snapshots))
    values = np.stack([s.values for s in snapshots], axis=-1)
    grid = TensorGrid(
        values, coords=list(first.coords) + [time_coords], precision=first.precision, time_axis=True
    )
    return _decompose(grid, levels, tile, budget, counter, temporal=True)


def _measure(approx, reference, coords, classes_used, reference_name, elapsed, time_axis=False):
    diff = np.asarray(approx, dtype=np.float64) - np.asarray(reference, dtype=np.float64)
    max_abs = float(np.max(np.abs(diff)))
    data_range = float(np.max(reference)) - float(np.min(reference))
    rel_linf = max_abs / data_range if data_range > 0 else max_abs
    weighted = weighted_l2_norm(TensorGrid(diff, coords=coords, precision="f64", time_axis=time_axis))
    return ReconstructionReport(
        classes_used=classes_used,
        max_abs=max_abs,
        rel_linf=rel_linf,
        weighted_l2=weighted,
        elapsed=elapsed,
        reference=reference_name,
    )


def _recompose_values(refactored, classes_used, plan):
    hierarchy = refactored.hierarchy
    current = np.asarray(refactored.classes[0], dtype=np.float64).reshape(
        hierarchy.level_shape(0), order="F"
    )
    for level in range(1, hierarchy.levels + 1):
        if level <= classes_used:
            vec = scatter_class(refactored.classes[level], hierarchy, level)
            load = vec
            for d in range(hierarchy.ndims):
                load = masstrans_apply(load, hierarchy, level, d, plan=plan)
            z = load
            for d in range(hierarchy.ndims):
                z = solve_correction(z, hierarchy, level, d, plan=plan)
            coarse = apply_correction(current, z, -1)
        else:
            vec = np.zeros(hierarchy.level_shape(level))
            coarse = current
        current = restore_coefficients(coarse, vec, hierarchy, level, plan=plan)
    return current


def recompose(refactored: RefactoredData, classes_used=None, reference=None, tile=None, budget=DEFAULT_BUDGET):
    """Reconstruct a grid from the first ``classes_used`` coefficient classes.

    Classes above ``classes_used`` are treated as zero, so the result is the
    level-``classes_used`` projection prolonged to the input grid.

    Args:
        refactored: Refactored data (possibly a class prefix)
        classes_used: k in 0..L (default: every available class)
        reference: Optional TensorGrid or array to measure the error against.
            Without it a truncated reconstruction is measured against the
            full reconstruction when every class is available.
        tile: Optional TileConfig
        budget: Tile volume budget in elements

    Returns:
        Tuple of (TensorGrid, ReconstructionReport)
    """
    available = refactored.available_classes - 1
    if classes_used is None:
        classes_used = available
    if not 0 <= classes_used <= refactored.levels:
        raise InvalidLevel(classes_used, refactored.levels)
    if classes_used > available:
        raise InvalidLevel(classes_used, available)

    plan = _Plans(refactored.shape, tile, budget, temporal=False).spatial
    start = time.perf_counter()
    values = _recompose_values(refactored, classes_used, plan)
    elapsed = time.perf_counter() - start

    time_axis = refactored.time_axis
    grid = TensorGrid(values, coords=refactored.coords, precision=refactored.precision, time_axis=time_axis)
    if reference is not None:
        reference_values = reference.values if isinstance(reference, TensorGrid) else reference
        report = _measure(
            grid.values, reference_values, refactored.coords, classes_used, "reference", elapsed, time_axis
        )
    elif classes_used < refactored.levels and refactored.is_complete:
        full = _recompose_values(refactored, refactored.levels, plan)
        report = _measure(grid.values, full, refactored.coords, classes_used, "full", elapsed, time_axis)
    else:
        report = ReconstructionReport(classes_used=classes_used, elapsed=elapsed)
    logger.info(
        f"Recomposed {refactored.shape} from {classes_used + 1} classes in {elapsed:.3f}s"
    )
    return grid, report
