#!/usr/bin/env python3
"""Unit tests for raw grid files and synthetic fields"""

import os
import tempfile
import unittest

import numpy as np

from mgrefactor.models.tensorgrid import TensorGrid
from mgrefactor.utils.rawio import (
    RawInputError,
    parse_shape,
    read_coords,
    read_raw,
    read_snapshots,
    write_coords,
    write_raw,
)
from mgrefactor.utils.synthetic import reaction_diffusion, sine_product


class TestParseShape(unittest.TestCase):
    """Test shape strings"""

    def test_valid(self):
        """Test x and comma separators"""
        self.assertEqual(parse_shape("65x65x65"), (65, 65, 65))
        self.assertEqual(parse_shape("17,9"), (17, 9))
        self.assertEqual(parse_shape("33X5"), (33, 5))

    def test_invalid(self):
        """Test strings that are not shapes"""
        for text in ("", "big", "3xa"):
            with self.assertRaises(ValueError):
                parse_shape(text)


class TestRawFiles(unittest.TestCase):
    """Test reading and writing raw grids"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, "field.raw")
        self.coords_path = os.path.join(self.tmp.name, "field.coords")

    def test_round_trip(self):
        """Test a grid survives write and read"""
        grid = TensorGrid(np.random.default_rng(0).standard_normal((5, 4, 3)).astype(np.float32))
        self.assertEqual(write_raw(grid, self.path), 5 * 4 * 3 * 4)
        result = read_raw(self.path, (5, 4, 3), "f32")
        np.testing.assert_array_equal(result.values, grid.values)

    def test_dimension_zero_fastest(self):
        """Test the first values in the file run along dimension 0"""
        np.arange(15, dtype="<f8").tofile(self.path)
        grid = read_raw(self.path, (5, 3), "f64")
        np.testing.assert_array_equal(grid.values[:, 0], [0, 1, 2, 3, 4])
        np.testing.assert_array_equal(grid.values[0, :], [0, 5, 10])

    def test_size_mismatch(self):
        """Test a file that does not match the shape"""
        np.zeros(10, dtype="<f8").tofile(self.path)
        with self.assertRaises(RawInputError):
            read_raw(self.path, (5, 3), "f64")

    def test_missing_file(self):
        """Test a path that does not exist"""
        with self.assertRaises(RawInputError):
            read_raw(os.path.join(self.tmp.name, "nope.raw"), (5, 3), "f64")

    def test_coords_sidecar(self):
        """Test nonuniform coordinates from a sidecar"""
        coords = [np.array([0.0, 0.1, 0.5, 2.0, 3.0]), np.array([1.0, 2.0, 4.0])]
        write_coords(coords, self.coords_path)
        np.zeros(15, dtype="<f8").tofile(self.path)
        grid = read_raw(self.path, (5, 3), "f64", coords_path=self.coords_path)
        np.testing.assert_array_equal(grid.coords[0], coords[0])
        np.testing.assert_array_equal(grid.coords[1], coords[1])

    def test_coords_wrong_count(self):
        """Test a sidecar with the wrong number of coordinates"""
        write_coords([np.arange(4.0)], self.coords_path)
        with self.assertRaises(RawInputError):
            read_coords(self.coords_path, (5, 3))

    def test_coords_not_increasing(self):
        """Test a sidecar whose coordinates do not increase"""
        write_coords([np.array([0.0, 2.0, 1.0]), np.arange(3.0)], self.coords_path)
        np.zeros(9, dtype="<f8").tofile(self.path)
        with self.assertRaises(RawInputError):
            read_raw(self.path, (3, 3), "f64", coords_path=self.coords_path)

    def test_snapshots(self):
        """Test a file of consecutive snapshots"""
        series = np.arange(5 * 3 * 4, dtype="<f8")
        series.tofile(self.path)
        snapshots = read_snapshots(self.path, (5, 3), "f64", 4)
        self.assertEqual(len(snapshots), 4)
        self.assertEqual(snapshots[1].shape, (5, 3))
        self.assertEqual(snapshots[1].values[0, 0], 15.0)

    def test_two_snapshots(self):
        """Test a file holding two snapshots"""
        np.arange(5 * 3 * 2, dtype="<f8").tofile(self.path)
        snapshots = read_snapshots(self.path, (5, 3), "f64", 2)
        self.assertEqual(len(snapshots), 2)
        self.assertEqual(snapshots[1].shape, (5, 3))
        self.assertEqual(snapshots[1].values[0, 0], 15.0)

    def test_snapshot_count(self):
        """Test a non-positive snapshot count"""
        with self.assertRaises(RawInputError):
            read_snapshots(self.path, (5, 3), "f64", 0)


class TestSynthetic(unittest.TestCase):
    """Test synthetic fields"""

    def test_sine_product(self):
        """Test the peak sits at the center and the boundary is zero"""
        grid = sine_product((9, 9))
        self.assertAlmostEqual(grid.values[4, 4], 1.0)
        self.assertAlmostEqual(float(np.abs(grid.values[0, :]).max()), 0.0)

    def test_reaction_diffusion(self):
        """Test the pattern is reproducible and bounded"""
        a = reaction_diffusion((17, 17), seed=3)
        b = reaction_diffusion((17, 17), seed=3)
        np.testing.assert_array_equal(a.values, b.values)
        self.assertGreaterEqual(a.values.min(), 0.0)
        self.assertLess(a.values.max(), 1.0)


if __name__ == "__main__":
    unittest.main()
