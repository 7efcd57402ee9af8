#!/usr/bin/env python3
"""Unit tests for decomposition, recomposition, tiling and pass accounting"""

import unittest

import numpy as np

from mgrefactor.models.refactored import RefactoredData
from mgrefactor.models.tensorgrid import InvalidGrid, TensorGrid
from mgrefactor.models.tiling import InvalidTileConfig, TileConfig
from mgrefactor.multigrid.hierarchy import InvalidLevel, Layout, ShapeError, mass_diagonals, reorder
from mgrefactor.multigrid.kernels import gather_class, scatter_class
from mgrefactor.multigrid.refactor import (
    PassCounter,
    TilingPhase,
    decompose,
    decompose_spatiotemporal,
    pass_accounting,
    recompose,
    select_tiling,
)
from mgrefactor.utils.synthetic import sine_product


def random_grid(shape, seed=0, precision="f64"):
    rng = np.random.default_rng(seed)
    coords = [np.cumsum(rng.uniform(0.5, 1.5, n)) for n in shape]
    return TensorGrid(rng.standard_normal(shape), coords=coords, precision=precision)


def prolongation(coords):
    n = len(coords)
    kept = list(range(0, n, 2))
    if kept[-1] != n - 1:
        kept.append(n - 1)
    p = np.zeros((n, len(kept)))
    for j, pos in enumerate(kept):
        p[pos, j] = 1.0
    for pos in range(1, n, 2):
        if pos in kept:
            continue
        xl, x, xr = coords[pos - 1], coords[pos], coords[pos + 1]
        j = kept.index(pos - 1)
        p[pos, j] = (xr - x) / (xr - xl)
        p[pos, j + 1] = (x - xl) / (xr - xl)
    return p


class TestSelectTiling(unittest.TestCase):
    """Test tile plan selection"""

    def test_low_dimensions(self):
        """Test 1-3 D grids tile every dimension"""
        plan = select_tiling(2, (65, 65))
        self.assertEqual(plan.tiled_dims, (0, 1))
        self.assertEqual(plan.outer_dims, ())
        self.assertEqual(plan.tile, TileConfig(32, 8, 1))

    def test_four_dimensions(self):
        """Test space plus time switches the outer dimension per phase"""
        spatial = select_tiling(4, (33, 33, 33, 9), phase=TilingPhase.SPATIAL)
        temporal = select_tiling(4, (33, 33, 33, 9), phase=TilingPhase.TEMPORAL)
        self.assertEqual((spatial.tiled_dims, spatial.outer_dims), ((0, 1, 2), (3,)))
        self.assertEqual((temporal.tiled_dims, temporal.outer_dims), ((0, 1, 3), (2,)))
        self.assertEqual(temporal.tile, TileConfig(32, 8, 8))

    def test_clipped_to_shape(self):
        """Test extents never exceed the grid"""
        plan = select_tiling(3, (5, 3, 65), extents=(128, 2, 2))
        self.assertEqual(plan.tile, TileConfig(5, 2, 2))

    def test_budget_halves_largest(self):
        """Test the largest extent is halved until the budget fits"""
        plan = select_tiling(3, (65, 65, 65), budget=64)
        self.assertEqual(plan.tile, TileConfig(4, 4, 4))

    def test_invalid(self):
        """Test invalid budgets and dimension counts"""
        with self.assertRaises(InvalidTileConfig):
            select_tiling(3, (9, 9, 9), budget=0)
        with self.assertRaises(InvalidGrid):
            select_tiling(5, (3, 3, 3, 3, 3))


class TestDecompose(unittest.TestCase):
    """Test decomposition properties"""

    def test_class_layout(self):
        """Test class count and sizes"""
        grid = random_grid((17, 9))
        refactored = decompose(grid)
        self.assertEqual(refactored.levels, 3)
        self.assertTrue(refactored.is_complete)
        self.assertEqual(refactored.total_size, grid.size)
        self.assertEqual(refactored.classes[0].size, 3 * 2)

    def test_classes_follow_coarse_first_layout(self):
        """Test the classes, concatenated in order, follow the coarse-first layout"""
        grid = random_grid((17, 9, 6), seed=6)
        refactored = decompose(grid)
        hierarchy = refactored.hierarchy
        level = refactored.levels
        positions = np.arange(grid.size).reshape(grid.shape, order="F")
        blocks = []
        for l in range(level, 0, -1):
            blocks.append(gather_class(positions, hierarchy, l))
            positions = positions[hierarchy.coarse_index(l)]
        blocks.append(positions.ravel(order="F"))
        blocks = blocks[::-1]
        self.assertEqual([len(b) for b in blocks], [values.size for values in refactored.classes])
        natural = np.arange(grid.size).reshape(grid.shape, order="F")
        np.testing.assert_array_equal(
            np.concatenate(blocks), reorder(natural, hierarchy, level, Layout.HIERARCHICAL)
        )

        flat = np.empty(grid.size)
        flat[np.concatenate(blocks)] = np.concatenate(refactored.classes)
        hierarchical = reorder(flat, hierarchy, level, Layout.HIERARCHICAL)
        np.testing.assert_array_equal(hierarchical, np.concatenate(refactored.classes))

    def test_input_unchanged(self):
        """Test the input grid is not modified"""
        grid = random_grid((9, 9))
        before = grid.values.copy()
        decompose(grid)
        np.testing.assert_array_equal(grid.values, before)

    def test_deterministic(self):
        """Test repeated runs are bit-identical"""
        grid = random_grid((17, 9, 5), seed=1)
        self.assertEqual(decompose(grid), decompose(grid))

    def test_constant_field(self):
        """Test a constant field has zero coefficients"""
        grid = TensorGrid(np.full((9, 9, 9), 3.5))
        refactored = decompose(grid)
        np.testing.assert_array_equal(refactored.classes[0], 3.5)
        for values in refactored.classes[1:]:
            np.testing.assert_array_equal(values, 0.0)

    def test_level_cap(self):
        """Test capping the number of levels"""
        refactored = decompose(random_grid((33,)), levels=2)
        self.assertEqual(refactored.levels, 2)
        self.assertEqual(refactored.classes[0].size, 9)

    def test_tiling_invariance(self):
        """Test the tile shape never changes a single bit"""
        grid = random_grid((33, 33, 33), seed=2)
        baseline = decompose(grid)
        for tile in (TileConfig(2, 2, 2), TileConfig(4, 4, 16), TileConfig(2, 2, 128)):
            self.assertEqual(decompose(grid, tile=tile), baseline)

    def test_pass_accounting(self):
        """Test recorded passes match the analytic accounting"""
        grid = random_grid((17, 9, 9), seed=3)
        refactored = decompose(grid)
        counter = PassCounter(refactored.hierarchy)
        decompose(grid, counter=counter)
        self.assertEqual(counter.per_level(), pass_accounting(refactored.hierarchy))
        passes = refactored.passes
        self.assertEqual(set(passes["per_level"]), {"1", "2", "3"})
        self.assertGreater(passes["accumulated"], 1.0)

    def test_pass_accounting_phases(self):
        """Test the reduced mass-trans sweeps of one level"""
        refactored = decompose(random_grid((5, 5)))
        level = pass_accounting(refactored.hierarchy)[2]
        self.assertEqual(level["coefficient"], 1.0)
        self.assertEqual(level["copy"], 1.0)
        self.assertEqual(level["masstrans[0]"], 1.0)
        self.assertEqual(level["masstrans[1]"], 15 / 25)
        self.assertEqual(level["solve[0]"], 9 / 25)
        self.assertEqual(level["apply"], 9 / 25)


class TestRecompose(unittest.TestCase):
    """Test recomposition and progressive reconstruction"""

    def test_round_trip_all_shapes(self):
        """Test full recomposition recovers every shape, dimension, spacing and precision"""
        for n in (5, 9, 17, 33, 65):
            for ndims in (1, 2, 3):
                for uniform in (True, False):
                    for precision, tolerance in (("f64", 1e-12), ("f32", 1e-5)):
                        with self.subTest(n=n, ndims=ndims, uniform=uniform, precision=precision):
                            grid = random_grid((n,) * ndims, seed=n + ndims, precision=precision)
                            if uniform:
                                grid = TensorGrid(grid.values, precision=precision)
                            refactored = decompose(grid)
                            result, report = recompose(refactored)
                            self.assertEqual(result.precision.value, precision)
                            self.assertEqual(report.classes_used, refactored.levels)
                            np.testing.assert_allclose(
                                result.values, grid.values, rtol=0, atol=tolerance * grid.data_range
                            )

    def test_round_trip_f32(self):
        """Test full recomposition of single precision data"""
        grid = sine_product((17, 17, 17), precision="f32")
        result, _ = recompose(decompose(grid))
        self.assertEqual(result.precision.value, "f32")
        np.testing.assert_allclose(result.values, grid.values, rtol=0, atol=1e-5 * grid.data_range)

    def test_round_trip_four_dimensions(self):
        """Test a 4-D grid"""
        grid = random_grid((9, 5, 5, 5), seed=4)
        result, _ = recompose(decompose(grid))
        np.testing.assert_allclose(result.values, grid.values, rtol=0, atol=1e-12 * grid.data_range)

    def test_truncation_uses_prefix_only(self):
        """Test a class prefix gives the same result as truncating the full set"""
        grid = random_grid((17, 17), seed=5)
        refactored = decompose(grid)
        for k in range(refactored.levels + 1):
            prefix = RefactoredData(
                refactored.shape, refactored.coords, refactored.levels,
                refactored.precision, refactored.classes[:k + 1],
            )
            full, _ = recompose(refactored, k)
            partial, _ = recompose(prefix, k)
            np.testing.assert_array_equal(partial.values, full.values)

    def test_projection_orthogonality(self):
        """Test the truncated error is mass-orthogonal to the coarse space"""
        grid = random_grid((17,), seed=6)
        refactored = decompose(grid)
        hierarchy = refactored.hierarchy
        coords = grid.coords[0]
        for k in range(hierarchy.levels):
            approx, _ = recompose(refactored, k)
            basis = np.eye(hierarchy.level_size(k))
            for level in range(k + 1, hierarchy.levels + 1):
                basis = prolongation(coords[hierarchy.idx[0][level]]) @ basis
            diag, off = mass_diagonals(np.diff(coords))
            m = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
            residual = basis.T @ m @ (grid.values - approx.values)
            np.testing.assert_allclose(residual, 0.0, atol=1e-10 * np.abs(grid.values).max())

    def test_error_decreases(self):
        """Test the weighted error never grows with more classes"""
        grid = sine_product((33, 33))
        refactored = decompose(grid)
        errors = [recompose(refactored, k, reference=grid)[1].weighted_l2 for k in range(refactored.levels + 1)]
        for coarse, fine in zip(errors, errors[1:]):
            self.assertLessEqual(fine, coarse * (1 + 1e-12) + 1e-13)
        self.assertLess(errors[-1], 1e-10)
        self.assertGreater(errors[0], errors[-1])

    def test_report_against_full(self):
        """Test a truncated report is measured against the full reconstruction"""
        refactored = decompose(sine_product((17, 17)))
        _, report = recompose(refactored, 1)
        self.assertEqual(report.reference, "full")
        self.assertGreater(report.max_abs, 0.0)
        self.assertGreater(report.weighted_l2, 0.0)

    def test_too_many_classes(self):
        """Test asking for more classes than available"""
        refactored = decompose(random_grid((9,)))
        with self.assertRaises(InvalidLevel):
            recompose(refactored, refactored.levels + 1)
        prefix = RefactoredData((9,), refactored.coords, refactored.levels, "f64", refactored.classes[:2])
        with self.assertRaises(InvalidLevel):
            recompose(prefix, 2)


class TestSpatiotemporal(unittest.TestCase):
    """Test refactoring of snapshot sequences"""

    def test_matches_stacked_grid(self):
        """Test snapshots refactor like one grid with time last"""
        snapshots = [random_grid((9, 9), seed=7) for _ in range(4)]
        for i, snapshot in enumerate(snapshots):
            snapshot.values *= 1.0 + i
        refactored = decompose_spatiotemporal(snapshots)
        stacked = TensorGrid(
            np.stack([s.values for s in snapshots], axis=-1),
            coords=list(snapshots[0].coords) + [np.linspace(0.0, 1.0, 4)],
        )
        self.assertEqual(refactored.shape, (9, 9, 4))
        self.assertEqual(refactored, decompose(stacked))

    def test_identical_snapshots(self):
        """Test identical snapshots leave no temporal coefficients"""
        snapshot = random_grid((9, 9), seed=8)
        refactored = decompose_spatiotemporal([snapshot] * 3)
        fine = scatter_class(refactored.classes[1], refactored.hierarchy, 1)
        np.testing.assert_array_equal(fine[::2, ::2, 1], 0.0)

    def test_two_snapshots(self):
        """Test two identical snapshots refactor like the single snapshot"""
        snapshot = random_grid((9, 9), seed=8)
        refactored = decompose_spatiotemporal([snapshot, snapshot])
        single = decompose(snapshot)
        self.assertEqual(refactored.shape, (9, 9, 2))
        self.assertTrue(refactored.time_axis)
        self.assertEqual(refactored.levels, single.levels)
        scale = snapshot.data_range
        for level in range(1, refactored.levels + 1):
            self.assertEqual(len(refactored.hierarchy.axis(2, level).fine_positions), 0)
        for level, values in enumerate(refactored.classes):
            first, second = np.split(values, 2)
            np.testing.assert_allclose(first, single.classes[level], rtol=0, atol=1e-12 * scale)
            np.testing.assert_allclose(second, single.classes[level], rtol=0, atol=1e-12 * scale)
        result, _ = recompose(refactored)
        self.assertTrue(result.time_axis)
        np.testing.assert_allclose(result.values[..., 0], snapshot.values, rtol=0, atol=1e-12 * scale)
        np.testing.assert_allclose(result.values[..., 1], snapshot.values, rtol=0, atol=1e-12 * scale)

    def test_linear_in_time(self):
        """Test a field linear in time has no temporal coefficients at any level"""
        rng = np.random.default_rng(9)
        a, b = rng.standard_normal((2, 9, 9))
        times = np.linspace(0.0, 1.0, 5)
        snapshots = [TensorGrid(a + t * b) for t in times]
        refactored = decompose_spatiotemporal(snapshots, time_coords=times)
        hierarchy = refactored.hierarchy
        self.assertEqual(refactored.levels, 2)
        scale = float(np.max(np.abs(a) + np.abs(b)))
        for level in range(1, refactored.levels + 1):
            values = scatter_class(refactored.classes[level], hierarchy, level)
            temporal = np.ix_(
                hierarchy.axis(0, level).coarse_positions,
                hierarchy.axis(1, level).coarse_positions,
                hierarchy.axis(2, level).fine_positions,
            )
            self.assertGreater(values[temporal].size, 0)
            np.testing.assert_allclose(values[temporal], 0.0, atol=1e-12 * scale)

    def test_one_snapshot(self):
        """Test a single snapshot has no time axis to refactor"""
        with self.assertRaises(ShapeError):
            decompose_spatiotemporal([random_grid((9, 9))])

    def test_shape_mismatch(self):
        """Test snapshots of different shapes"""
        with self.assertRaises(ShapeError):
            decompose_spatiotemporal([random_grid((9, 9)), random_grid((9, 9)), random_grid((9, 5))])

    def test_round_trip(self):
        """Test recomposing a spatiotemporal refactoring"""
        snapshots = [sine_product((9, 9, 9), frequency=1.0 + 0.1 * t) for t in range(5)]
        refactored = decompose_spatiotemporal(snapshots)
        result, _ = recompose(refactored)
        np.testing.assert_allclose(result.values[..., 2], snapshots[2].values, rtol=0, atol=1e-12)


if __name__ == "__main__":
    unittest.main()
