import logging
import os
from dataclasses import dataclass, field

import yaml

from mgrefactor.models.tiling import DEFAULT_CANDIDATES, InvalidTileConfig, TileConfig

logger = logging.getLogger(__name__)

APP_NAME = "mgrefactor"
CONFIG_FILE = "config.yml"
CONFIG_DIR_ENV = "MGREFACTOR_CONFIG_DIR"
CACHE_DIR_ENV = "MGREFACTOR_CACHE_DIR"

CODEC_NAMES = ("zlib", "null")


class InvalidConfig(Exception):
    def __init__(self, key, reason):
        self.message = f"Invalid configuration value for '{key}': {reason}"
        super(InvalidConfig, self).__init__(self.message)


def config_dir():
    """User settings location, ``~/.config/mgrefactor`` unless overridden."""
    return os.environ.get(CONFIG_DIR_ENV) or os.path.join(
        os.path.expanduser("~"), ".config", APP_NAME
    )


def cache_dir(create=False):
    """Autotune cache location, ``~/.cache/mgrefactor`` unless overridden."""
    path = os.environ.get(CACHE_DIR_ENV) or os.path.join(
        os.path.expanduser("~"), ".cache", APP_NAME
    )
    if create and not os.path.isdir(path):
        os.makedirs(path)
    return path


@dataclass
class DeviceSettings:
    transaction_bytes: int = 32
    peak_bandwidth: float = 900e9
    ghost: int = None


@dataclass
class Config:
    tile: TileConfig = field(default_factory=lambda: TileConfig(32, 8, 8))
    tile_budget: int = 4096
    candidates: list = field(default_factory=lambda: list(DEFAULT_CANDIDATES))
    device: DeviceSettings = field(default_factory=DeviceSettings)
    codec: str = "zlib"
    levels: int = None

    def to_dict(self):
        return {
            "tile": list(self.tile.as_tuple()),
            "tile_budget": self.tile_budget,
            "candidates": [list(c.as_tuple()) for c in self.candidates],
            "device": {
                "transaction_bytes": self.device.transaction_bytes,
                "peak_bandwidth": self.device.peak_bandwidth,
                "ghost": self.device.ghost,
            },
            "codec": self.codec,
            "levels": self.levels,
        }


def _tile(key, value):
    try:
        if isinstance(value, str):
            return TileConfig.parse(value)
        return TileConfig(*[int(v) for v in value])
    except (TypeError, ValueError, InvalidTileConfig) as e:
        raise InvalidConfig(key, str(e))


def _positive(key, value, kind=int):
    try:
        value = kind(value)
    except (TypeError, ValueError):
        raise InvalidConfig(key, f"{value!r} is not a number")
    if value <= 0:
        raise InvalidConfig(key, f"{value!r} must be positive")
    return value


def parse_config(data):
    """Build a Config from a parsed YAML mapping; missing keys keep their defaults."""
    config = Config()
    if not data:
        return config
    if not isinstance(data, dict):
        raise InvalidConfig("<root>", "expected a mapping")

    if "tile" in data:
        config.tile = _tile("tile", data["tile"])
    if "tile_budget" in data:
        config.tile_budget = _positive("tile_budget", data["tile_budget"])
    if "candidates" in data:
        candidates = data["candidates"] or []
        if not candidates:
            raise InvalidConfig("candidates", "at least one tile configuration is required")
        config.candidates = [_tile("candidates", c) for c in candidates]
    if "device" in data:
        device = data["device"] or {}
        if "transaction_bytes" in device:
            config.device.transaction_bytes = _positive(
                "device.transaction_bytes", device["transaction_bytes"]
            )
        if "peak_bandwidth" in device:
            config.device.peak_bandwidth = _positive(
                "device.peak_bandwidth", device["peak_bandwidth"], float
            )
        if device.get("ghost") is not None:
            config.device.ghost = _positive("device.ghost", device["ghost"])
    if "codec" in data:
        if data["codec"] not in CODEC_NAMES:
            raise InvalidConfig("codec", f"unknown codec {data['codec']!r} (known: {', '.join(CODEC_NAMES)})")
        config.codec = data["codec"]
    if data.get("levels") is not None:
        config.levels = _positive("levels", data["levels"])
    return config


def load_config(path=None):
    """Load the user configuration, falling back to defaults.

    A missing or unreadable file yields the defaults (unreadable files are
    logged); values that parse but make no sense raise InvalidConfig.
    """
    if path is None:
        path = os.path.join(config_dir(), CONFIG_FILE)
    if not os.path.isfile(path):
        return Config()

    try:
        with open(path, "r") as f:
            data = yaml.load(f, yaml.SafeLoader)
    except (OSError, yaml.YAMLError) as e:
        logger.warning(f"Ignoring configuration file {path}: {e}")
        return Config()
    return parse_config(data)
