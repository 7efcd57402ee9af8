#!/usr/bin/env python3
"""Unit tests for the kernel performance models and tile tuning"""

import os
import tempfile
import unittest
from unittest.mock import MagicMock

from mgrefactor.models.tensorgrid import Precision
from mgrefactor.models.tiling import DEFAULT_CANDIDATES, TileConfig
from mgrefactor.tuning.autotune import (
    EXPECTED_RANKS,
    DeviceModel,
    Kernel,
    TuningCache,
    autotune,
    matching_pairings,
    measure_median,
    model_time,
    rank_configs,
    ranks_in_order,
    timed,
)


class TestDeviceModel(unittest.TestCase):
    """Test device parameters"""

    def test_for_precision(self):
        """Test element size follows the precision"""
        self.assertEqual(DeviceModel.for_precision("f32").element_bytes, 4)
        self.assertEqual(DeviceModel.for_precision(Precision.F64).per_transaction, 4.0)

    def test_ghost_defaults_to_transaction(self):
        """Test the ghost extent defaults to one transaction"""
        self.assertEqual(DeviceModel().ghost_extent, 4.0)
        self.assertEqual(DeviceModel(ghost=2).ghost_extent, 2)

    def test_invalid(self):
        """Test invalid device parameters"""
        with self.assertRaises(ValueError):
            DeviceModel(element_bytes=2)
        with self.assertRaises(ValueError):
            DeviceModel(transaction_bytes=4, element_bytes=8)
        with self.assertRaises(ValueError):
            DeviceModel(peak_bandwidth=0)


class TestModel(unittest.TestCase):
    """Test the traffic models and rankings"""

    def setUp(self):
        self.dev = DeviceModel.for_precision("f64", transaction_bytes=32)

    def test_reference_ranks(self):
        """Test the ranks of the default candidates on 257^3 doubles"""
        for kernel in Kernel:
            ranking = rank_configs(kernel, DEFAULT_CANDIDATES, 257, self.dev)
            self.assertEqual(ranks_in_order(ranking, DEFAULT_CANDIDATES), EXPECTED_RANKS[kernel.value])

    def test_best_choices(self):
        """Test each kernel's first choice"""
        self.assertEqual(rank_configs("gpk", DEFAULT_CANDIDATES, 257, self.dev).best, TileConfig(32, 4, 4))
        self.assertEqual(rank_configs("lpk", DEFAULT_CANDIDATES, 257, self.dev).best, TileConfig(128, 2, 2))
        self.assertEqual(rank_configs("ipk", DEFAULT_CANDIDATES, 257, self.dev).best, TileConfig(4, 4, 4))

    def test_matching_pairings(self):
        """Test the reference pairing reproduces every kernel's ranks"""
        pairings = matching_pairings()
        for precision, n in pairings:
            print(f"Matched pairing: {precision.value} on {n}^3")
        self.assertIn((Precision.F64, 257), pairings)

    def test_bandwidth_scaling(self):
        """Test doubling the bandwidth halves every prediction"""
        fast = DeviceModel.for_precision("f64", peak_bandwidth=2 * self.dev.peak_bandwidth)
        for kernel in Kernel:
            for cfg in DEFAULT_CANDIDATES:
                self.assertAlmostEqual(
                    model_time(kernel, cfg, 257, fast), model_time(kernel, cfg, 257, self.dev) / 2
                )

    def test_tile_larger_than_grid(self):
        """Test an oversized tile still costs one tile"""
        self.assertGreater(model_time("gpk", TileConfig(128, 2, 2), 9, self.dev), 0.0)

    def test_single_candidate(self):
        """Test a single candidate ranks first"""
        ranking = rank_configs("lpk", [TileConfig(8, 4, 4)], 257, self.dev)
        self.assertEqual(ranking.rank_of(TileConfig(8, 4, 4)), 1)
        with self.assertRaises(KeyError):
            ranking.rank_of(TileConfig(2, 2, 2))

    def test_no_candidates(self):
        """Test an empty candidate list"""
        with self.assertRaises(ValueError):
            rank_configs("gpk", [], 257, self.dev)

    def test_ranking_to_dict(self):
        """Test JSON form of a ranking"""
        result = rank_configs("ipk", DEFAULT_CANDIDATES, 257, self.dev).to_dict()
        self.assertEqual(result["kernel"], "ipk")
        self.assertEqual(result["ranking"][0]["rank"], 1)
        self.assertEqual(result["ranking"][0]["tile"], [4, 4, 4])


class TestMeasure(unittest.TestCase):
    """Test measurement helpers"""

    def test_median_after_warmup(self):
        """Test the warmup run is discarded"""
        measure = MagicMock(side_effect=[5.0, 1.0, 3.0, 2.0])
        self.assertEqual(measure_median(measure, TileConfig(2, 2, 2)), 2.0)
        self.assertEqual(measure.call_count, 4)

    def test_timed(self):
        """Test the timed wrapper runs the callback"""
        run = MagicMock()
        elapsed = timed(run)(TileConfig(4, 4, 4))
        run.assert_called_once_with(TileConfig(4, 4, 4))
        self.assertGreaterEqual(elapsed, 0.0)


class TestAutotune(unittest.TestCase):
    """Test model-guided tuning and the cache"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.cache = TuningCache(self.tmp.name)
        self.dev = DeviceModel.for_precision("f64")

    def test_model_only(self):
        """Test without a measure callback the model decides"""
        result = autotune("ipk", DEFAULT_CANDIDATES, 257, self.dev)
        self.assertEqual(result.status, "model")
        self.assertEqual(result.config, TileConfig(4, 4, 4))

    def test_top_one_skips_measurement(self):
        """Test a shortlist of one is never measured"""
        measure = MagicMock(return_value=1.0)
        result = autotune("lpk", DEFAULT_CANDIDATES, 257, self.dev, top_k=1, measure=measure)
        self.assertEqual(result.status, "model")
        measure.assert_not_called()

    def test_measured(self):
        """Test the fastest measured configuration wins"""
        result = autotune("lpk", DEFAULT_CANDIDATES, 257, self.dev, measure=lambda cfg: float(cfg.bx))
        self.assertEqual(result.status, "measured")
        self.assertEqual(result.config, TileConfig(32, 4, 4))
        self.assertEqual(len(result.timings), 3)
        self.assertTrue(result.ok)

    def test_fallback(self):
        """Test a failing measurement falls back to the model"""
        measure = MagicMock(side_effect=RuntimeError("device lost"))
        with self.assertLogs("mgrefactor.tuning.autotune", level="WARNING"):
            result = autotune("gpk", DEFAULT_CANDIDATES, 257, self.dev, measure=measure)
        self.assertEqual(result.status, "fallback")
        self.assertEqual(result.config, TileConfig(32, 4, 4))
        self.assertFalse(result.ok)

    def test_cache_round_trip(self):
        """Test a tuned configuration is served from the cache"""
        first = autotune("gpk", DEFAULT_CANDIDATES, 257, self.dev, cache=self.cache)
        second = autotune("gpk", DEFAULT_CANDIDATES, 257, self.dev, cache=self.cache)
        self.assertEqual(second.status, "cached")
        self.assertEqual(second.config, first.config)
        self.assertEqual(self.cache.entries(), {"gpk:257x257x257:f64": [32, 4, 4]})

    def test_cache_key(self):
        """Test the cache key format"""
        self.assertEqual(TuningCache.key("lpk", (65, 65), "f32"), "lpk:65x65:f32")

    def test_malformed_cache(self):
        """Test an unreadable cache file is ignored"""
        with open(os.path.join(self.tmp.name, "autotune.yml"), "w") as f:
            f.write("gpk: [unclosed\n")
        with self.assertLogs("mgrefactor.tuning.autotune", level="WARNING"):
            self.assertIsNone(self.cache.get("gpk", (257, 257, 257), "f64"))

    def test_malformed_entry(self):
        """Test a cache entry that is not a tile is ignored"""
        with open(os.path.join(self.tmp.name, "autotune.yml"), "w") as f:
            f.write("gpk:257x257x257:f64: [a, b, c]\n")
        with self.assertLogs("mgrefactor.tuning.autotune", level="WARNING"):
            self.assertIsNone(self.cache.get("gpk", (257, 257, 257), "f64"))

    def test_missing_directory_created(self):
        """Test put creates the cache directory"""
        cache = TuningCache(os.path.join(self.tmp.name, "nested"))
        cache.put("ipk", (9, 9, 9), "f32", TileConfig(4, 4, 4))
        self.assertEqual(cache.get("ipk", (9, 9, 9), "f32"), TileConfig(4, 4, 4))


if __name__ == "__main__":
    unittest.main()
