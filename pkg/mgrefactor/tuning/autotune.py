"""
Memory-traffic models of the three kernels and model-guided tile tuning.

Each model counts the bytes a kernel moves for one tile configuration,
rounded up to whole memory transactions, and divides by the peak bandwidth.
Tuning only measures the model's best few configurations.
"""

import logging
import math
import numbers
import os
import statistics
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

import yaml

from mgrefactor.models.tensorgrid import Precision
from mgrefactor.models.tiling import DEFAULT_CANDIDATES, InvalidTileConfig, TileConfig
from mgrefactor.utils.config import cache_dir

logger = logging.getLogger(__name__)

CACHE_FILE = "autotune.yml"

# Ranks of DEFAULT_CANDIDATES (in order) for a 257^3 double-precision grid
# with 32-byte transactions.
EXPECTED_RANKS = {
    "gpk": (7, 6, 4, 2, 1, 5, 3),
    "lpk": (7, 6, 5, 4, 3, 2, 1),
    "ipk": (7, 1, 2, 3, 4, 5, 6),
}


class Kernel(str, Enum):
    GPK = "gpk"
    LPK = "lpk"
    IPK = "ipk"


@dataclass(frozen=True)
class DeviceModel:
    """Memory system parameters: transaction size S, element size L, ghost extent G."""

    transaction_bytes: int = 32
    peak_bandwidth: float = 900e9
    element_bytes: int = 8
    ghost: int = None

    def __post_init__(self):
        if self.element_bytes not in (4, 8):
            raise ValueError(f"element size must be 4 or 8 bytes, got {self.element_bytes}")
        if self.transaction_bytes < self.element_bytes:
            raise ValueError(
                f"transaction size {self.transaction_bytes} is smaller than one element"
            )
        if not self.peak_bandwidth > 0:
            raise ValueError(f"peak bandwidth must be positive, got {self.peak_bandwidth}")

    @property
    def per_transaction(self):
        """S / L: elements per memory transaction."""
        return self.transaction_bytes / self.element_bytes

    @property
    def ghost_extent(self):
        return self.ghost if self.ghost is not None else self.per_transaction

    @classmethod
    def for_precision(cls, precision, **kwargs):
        return cls(element_bytes=Precision(precision).itemsize, **kwargs)


def _sizes(n):
    if isinstance(n, numbers.Integral):
        return int(n), int(n), int(n)
    n = tuple(int(v) for v in n)
    return (n + (n[-1],) * 3)[:3]


def _tiles(n, b):
    # a tile larger than the grid still costs one tile
    return max(n // b, 1)


def model_time(kernel, cfg: TileConfig, n, dev: DeviceModel):
    """Predicted seconds for one sweep of ``kernel`` with tile ``cfg``.

    Args:
        kernel: Kernel.GPK, Kernel.LPK or Kernel.IPK
        cfg: Tile configuration (B_x, B_y, B_z)
        n: Per-dimension size N (or an (N_x, N_y, N_z) tuple)
        dev: Device model
    """
    kernel = Kernel(kernel)
    nx, ny, nz = _sizes(n)
    bx, by, bz = cfg.as_tuple()
    e = dev.per_transaction
    traffic = 2 * dev.element_bytes

    if kernel is Kernel.GPK:
        elements = (
            math.ceil((bx + 1) / e) * e * (by + 1) * (bz + 1)
            * _tiles(nx, bx) * _tiles(ny, by) * _tiles(nz, bz)
        )
    elif kernel is Kernel.LPK:
        elements = (
            (math.ceil(bx / e) * e + 2 * e) * by * bz
            * _tiles(nx, bx) * _tiles(ny, by) * _tiles(nz, bz)
        )
    else:
        row = math.ceil(dev.ghost_extent / e) * e + math.ceil(bx / e) * e * math.ceil(nx / bx)
        elements = row * by * bz * _tiles(ny, by) * _tiles(nz, bz)

    return elements * traffic / dev.peak_bandwidth


@dataclass
class ConfigRanking:
    kernel: Kernel
    entries: list

    @property
    def best(self):
        return self.entries[0][0]

    def top(self, k):
        return [cfg for cfg, _ in self.entries[:k]]

    def rank_of(self, cfg):
        for rank, (candidate, _) in enumerate(self.entries, start=1):
            if candidate == cfg:
                return rank
        raise KeyError(f"{cfg} is not a ranked candidate")

    def to_dict(self):
        return {
            "kernel": self.kernel.value,
            "ranking": [
                {"rank": rank, "tile": list(cfg.as_tuple()), "predicted": seconds}
                for rank, (cfg, seconds) in enumerate(self.entries, start=1)
            ],
        }


def rank_configs(kernel, candidates, n, dev: DeviceModel):
    """Rank candidates by predicted time, ties broken by smaller B_x, B_y, B_z."""
    kernel = Kernel(kernel)
    candidates = list(candidates)
    if not candidates:
        raise ValueError("At least one candidate configuration is required")
    scored = [(cfg, model_time(kernel, cfg, n, dev)) for cfg in candidates]
    scored.sort(key=lambda item: (item[1], item[0].bx, item[0].by, item[0].bz))
    return ConfigRanking(kernel, scored)


def ranks_in_order(ranking: ConfigRanking, candidates):
    return tuple(ranking.rank_of(cfg) for cfg in candidates)


def matching_pairings(candidates=DEFAULT_CANDIDATES, sizes=(257, 513), precisions=(Precision.F32, Precision.F64), transaction_bytes=32):
    """(precision, N) pairs whose model ranks reproduce EXPECTED_RANKS for every kernel."""
    matches = []
    for precision in precisions:
        dev = DeviceModel.for_precision(precision, transaction_bytes=transaction_bytes)
        for n in sizes:
            if all(
                ranks_in_order(rank_configs(kernel, candidates, n, dev), candidates)
                == EXPECTED_RANKS[kernel.value]
                for kernel in Kernel
            ):
                matches.append((Precision(precision), n))
    return matches


class TuningCache:
    """Tuned configurations persisted as ``<cache dir>/autotune.yml``.

    Keys are ``"<kernel>:<n0>x<n1>...:<precision>"``. One writer at a time.
    """

    def __init__(self, directory=None):
        self.directory = directory or cache_dir()
        self.path = os.path.join(self.directory, CACHE_FILE)
        self._lock = threading.Lock()

    @staticmethod
    def key(kernel, shape, precision):
        return f"{Kernel(kernel).value}:{'x'.join(str(n) for n in shape)}:{Precision(precision).value}"

    def load(self):
        if not os.path.isfile(self.path):
            return {}
        try:
            with open(self.path, "r") as f:
                data = yaml.load(f, yaml.SafeLoader)
        except (OSError, yaml.YAMLError) as e:
            logger.warning(f"Ignoring tuning cache {self.path}: {e}")
            return {}
        return data if isinstance(data, dict) else {}

    def get(self, kernel, shape, precision):
        value = self.load().get(self.key(kernel, shape, precision))
        if value is None:
            return None
        try:
            return TileConfig(*[int(v) for v in value])
        except (TypeError, ValueError, InvalidTileConfig) as e:
            logger.warning(f"Ignoring malformed tuning cache entry: {e}")
            return None

    def put(self, kernel, shape, precision, cfg: TileConfig):
        with self._lock:
            data = self.load()
            data[self.key(kernel, shape, precision)] = list(cfg.as_tuple())
            if not os.path.isdir(self.directory):
                os.makedirs(self.directory)
            with open(self.path, "w") as f:
                yaml.dump(data, f)

    def entries(self):
        return {k: list(v) for k, v in sorted(self.load().items())}


@dataclass
class TuningResult:
    kernel: Kernel
    config: TileConfig
    status: str
    timings: dict = field(default_factory=dict)
    ranking: ConfigRanking = None

    @property
    def ok(self):
        return self.status != "fallback"

    def to_dict(self):
        return {
            "kernel": self.kernel.value,
            "tile": list(self.config.as_tuple()),
            "status": self.status,
            "timings": dict(self.timings),
        }


def measure_median(measure, cfg, repeats=3, warmup=1):
    """Median elapsed seconds of ``measure(cfg)`` after ``warmup`` discarded runs."""
    for _ in range(warmup):
        measure(cfg)
    return statistics.median(float(measure(cfg)) for _ in range(repeats))


def timed(run):
    """Wrap ``run(cfg)`` into a measure callback returning elapsed seconds."""

    def measure(cfg):
        start = time.perf_counter()
        run(cfg)
        return time.perf_counter() - start

    return measure


def autotune(kernel, candidates, n, dev: DeviceModel, top_k=3, measure=None, cache: TuningCache = None, shape=None):
    """Pick the empirically fastest of the model's ``top_k`` configurations.

    Args:
        kernel: Kernel to tune
        candidates: Candidate TileConfigs
        n: Per-dimension size used by the model
        dev: Device model
        top_k: How many model-ranked configurations to measure
        measure: Callback ``measure(cfg) -> seconds``; without it the model's
            first choice is returned
        cache: Optional TuningCache to read from and record into
        shape: Cache key shape (defaults to (n, n, n))

    Returns:
        TuningResult; status is "cached", "model", "measured" or "fallback"
    """
    kernel = Kernel(kernel)
    precision = Precision.from_itemsize(dev.element_bytes)
    key_shape = tuple(shape) if shape is not None else _sizes(n)

    if cache is not None:
        cached = cache.get(kernel, key_shape, precision)
        if cached is not None:
            return TuningResult(kernel, cached, "cached")

    ranking = rank_configs(kernel, candidates, n, dev)
    shortlist = ranking.top(max(int(top_k), 1))

    if measure is None or len(shortlist) == 1:
        result = TuningResult(kernel, ranking.best, "model", ranking=ranking)
    else:
        timings = {}
        try:
            for cfg in shortlist:
                timings[str(cfg)] = measure_median(measure, cfg)
        except Exception as e:
            logger.warning(f"Measurement of {kernel.value} failed ({e}); using the model's first choice")
            return TuningResult(kernel, ranking.best, "fallback", timings, ranking)
        best = min(shortlist, key=lambda cfg: timings[str(cfg)])
        result = TuningResult(kernel, best, "measured", timings, ranking)

    logger.info(f"Tuned {kernel.value} for {key_shape}: {result.config} ({result.status})")
    if cache is not None:
        cache.put(kernel, key_shape, precision, result.config)
    return result
