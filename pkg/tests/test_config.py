#!/usr/bin/env python3
"""Unit tests for configuration loading"""

import os
import tempfile
import unittest
from unittest.mock import patch

from mgrefactor.models.tiling import DEFAULT_CANDIDATES, TileConfig
from mgrefactor.utils.config import (
    CACHE_DIR_ENV,
    CONFIG_DIR_ENV,
    Config,
    InvalidConfig,
    cache_dir,
    config_dir,
    load_config,
    parse_config,
)


class TestParseConfig(unittest.TestCase):
    """Test building a Config from parsed YAML"""

    def test_defaults(self):
        """Test empty input keeps every default"""
        config = parse_config(None)
        self.assertEqual(config.tile, TileConfig(32, 8, 8))
        self.assertEqual(config.tile_budget, 4096)
        self.assertEqual(config.candidates, list(DEFAULT_CANDIDATES))
        self.assertEqual(config.codec, "zlib")
        self.assertIsNone(config.levels)

    def test_all_keys(self):
        """Test every supported key"""
        config = parse_config({
            "tile": [16, 4, 4],
            "tile_budget": 1024,
            "candidates": [[2, 2, 2], "8x4x4"],
            "device": {"transaction_bytes": 64, "peak_bandwidth": 1.5e12, "ghost": 2},
            "codec": "null",
            "levels": 3,
        })
        self.assertEqual(config.tile, TileConfig(16, 4, 4))
        self.assertEqual(config.tile_budget, 1024)
        self.assertEqual(config.candidates, [TileConfig(2, 2, 2), TileConfig(8, 4, 4)])
        self.assertEqual(config.device.transaction_bytes, 64)
        self.assertEqual(config.device.peak_bandwidth, 1.5e12)
        self.assertEqual(config.device.ghost, 2)
        self.assertEqual(config.codec, "null")
        self.assertEqual(config.levels, 3)

    def test_tile_string(self):
        """Test tiles written as strings"""
        self.assertEqual(parse_config({"tile": "64x2x2"}).tile, TileConfig(64, 2, 2))

    def test_invalid_values(self):
        """Test values that parse but make no sense"""
        for data in (
            {"tile": [0, 4, 4]},
            {"tile": "wide"},
            {"tile_budget": -1},
            {"tile_budget": "many"},
            {"candidates": []},
            {"device": {"peak_bandwidth": 0}},
            {"codec": "lz4"},
            {"levels": 0},
            ["not", "a", "mapping"],
        ):
            with self.subTest(data=data):
                with self.assertRaises(InvalidConfig):
                    parse_config(data)

    def test_to_dict(self):
        """Test JSON form of the configuration"""
        result = Config().to_dict()
        self.assertEqual(result["tile"], [32, 8, 8])
        self.assertEqual(len(result["candidates"]), 7)
        self.assertEqual(result["device"]["transaction_bytes"], 32)


class TestLoadConfig(unittest.TestCase):
    """Test reading the configuration file"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, "config.yml")

    def write(self, text):
        with open(self.path, "w") as f:
            f.write(text)

    def test_missing_file(self):
        """Test a missing file yields the defaults"""
        self.assertEqual(load_config(self.path), Config())

    def test_load(self):
        """Test values are read from YAML"""
        self.write("tile: [8, 4, 4]\ncodec: 'null'\nlevels: ~\n")
        config = load_config(self.path)
        self.assertEqual(config.tile, TileConfig(8, 4, 4))
        self.assertEqual(config.codec, "null")
        self.assertIsNone(config.levels)

    def test_unquoted_null_codec(self):
        """Test an unquoted null is YAML's None, not a codec name"""
        self.write("codec: null\n")
        with self.assertRaises(InvalidConfig):
            load_config(self.path)

    def test_unreadable_file(self):
        """Test broken YAML is logged and ignored"""
        self.write("tile: [8, 4\n")
        with self.assertLogs("mgrefactor.utils.config", level="WARNING"):
            self.assertEqual(load_config(self.path), Config())

    def test_default_location(self):
        """Test the config directory override"""
        self.write("tile_budget: 512\n")
        with patch.dict(os.environ, {CONFIG_DIR_ENV: self.tmp.name}):
            self.assertEqual(config_dir(), self.tmp.name)
            self.assertEqual(load_config().tile_budget, 512)

    def test_cache_dir(self):
        """Test the cache directory override and creation"""
        target = os.path.join(self.tmp.name, "cache")
        with patch.dict(os.environ, {CACHE_DIR_ENV: target}):
            self.assertEqual(cache_dir(), target)
            self.assertFalse(os.path.isdir(target))
            cache_dir(create=True)
            self.assertTrue(os.path.isdir(target))


if __name__ == "__main__":
    unittest.main()
