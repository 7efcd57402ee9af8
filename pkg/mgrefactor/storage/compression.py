"""
Error-bounded lossy compression on top of the refactoring.

compress = decompose -> uniform scalar quantization per class -> lossless
codec. Decompression runs the exact same dequantize/recompose path that
compression used to measure its error, so the recorded error is the error
of what decompress returns.

Container layout (little-endian):

    magic "MGRC" | version u8 | codec name length u8 | codec name
    | dtype u8 (4 | 8) | ndims u8 | size u64 per dim | f64 coordinates per dim
    | levels u64 | eb f64 | bin width f64 | achieved error f64 | attempts u8
    | (integer itemsize u8, value count u64, encoded length u64) per class
    | encoded class payloads in order
"""

import logging
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from mgrefactor.models.refactored import RefactoredData
from mgrefactor.models.tensorgrid import TensorGrid, Precision
from mgrefactor.multigrid.refactor import decompose, recompose

logger = logging.getLogger(__name__)

MAGIC = b"MGRC"
VERSION = 1
MAX_ATTEMPTS = 8

_PREAMBLE = struct.Struct("<4sBB")
_SHAPE = struct.Struct("<BB")
_U64 = struct.Struct("<Q")
_BOUNDS = struct.Struct("<dddB")
_CLASS_ENTRY = struct.Struct("<BQQ")

_INT_TYPES = (np.int8, np.int16, np.int32, np.int64)


class InvalidBound(Exception):
    def __init__(self, eb):
        self.eb = eb
        self.message = f"Error bound must be a positive finite number, got {eb!r}"
        super(InvalidBound, self).__init__(self.message)


class BoundNotMet(Exception):
    def __init__(self, eb, achieved, attempts):
        self.eb = eb
        self.achieved = achieved
        self.message = (
            f"Could not reach error bound {eb:g} in {attempts} attempts "
            f"(best achieved {achieved:g})"
        )
        super(BoundNotMet, self).__init__(self.message)


class UnknownCodec(Exception):
    def __init__(self, name):
        self.message = f"Unknown codec '{name}' (known: {', '.join(sorted(CODECS))})"
        super(UnknownCodec, self).__init__(self.message)


class CorruptContainer(Exception):
    def __init__(self, reason):
        self.message = f"Corrupt compressed container: {reason}"
        super(CorruptContainer, self).__init__(self.message)


class NullCodec(object):
    """Stores bytes unchanged."""

    name = "null"

    @staticmethod
    def compress(data):
        return bytes(data)

    @staticmethod
    def decompress(data):
        return bytes(data)


class ZlibCodec(object):
    """DEFLATE via zlib."""

    name = "zlib"

    def __init__(self, level=6):
        self.level = level

    def compress(self, data):
        return zlib.compress(data, self.level)

    @staticmethod
    def decompress(data):
        return zlib.decompress(data)


CODECS = {
    NullCodec.name: NullCodec,
    ZlibCodec.name: ZlibCodec,
}


def get_codec(name):
    try:
        return CODECS[name]()
    except KeyError:
        raise UnknownCodec(name)


def narrowest_int_dtype(values):
    """Smallest signed integer dtype holding every value of ``values``."""
    if values.size == 0:
        return np.dtype(np.int8)
    lo, hi = int(values.min()), int(values.max())
    for kind in _INT_TYPES:
        info = np.iinfo(kind)
        if info.min <= lo and hi <= info.max:
            return np.dtype(kind)
    raise OverflowError(f"Quantized values {lo}..{hi} do not fit in 64 bits")


@dataclass
class QuantizerSpec:
    """Absolute-error uniform quantizer shared by every class."""

    eb: float
    bin_width: float
    classes: int

    def __post_init__(self):
        if not self.bin_width > 0:
            raise InvalidBound(self.bin_width)

    @classmethod
    def for_bound(cls, eb, levels):
        """Equal share of the bound per class: bin width 2 eb / (L + 1)."""
        return cls(eb=eb, bin_width=2.0 * eb / (levels + 1), classes=levels + 1)

    def refined(self):
        return QuantizerSpec(self.eb, self.bin_width / 2.0, self.classes)

    def quantize(self, values):
        q = np.rint(np.asarray(values, dtype=np.float64) / self.bin_width)
        if q.size and np.max(np.abs(q)) >= 2.0**63:
            raise OverflowError("Bin width too small for the class values")
        q = q.astype(np.int64)
        return q.astype(narrowest_int_dtype(q))

    def dequantize(self, q):
        return np.asarray(q, dtype=np.float64) * self.bin_width


@dataclass
class CompressionReport:
    eb: float
    bin_width: float
    attempts: int
    max_abs: float
    codec: str
    original_bytes: int
    compressed_bytes: int
    class_dtypes: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def ratio(self):
        return self.original_bytes / self.compressed_bytes if self.compressed_bytes else 0.0

    def to_dict(self):
        return {
            "eb": self.eb,
            "bin_width": self.bin_width,
            "attempts": self.attempts,
            "max_abs_error": self.max_abs,
            "codec": self.codec,
            "original_bytes": self.original_bytes,
            "compressed_bytes": self.compressed_bytes,
            "ratio": self.ratio,
            "class_dtypes": [str(d) for d in self.class_dtypes],
            "elapsed": self.elapsed,
        }


@dataclass
class CompressedHeader:
    version: int
    codec: str
    precision: Precision
    shape: tuple
    coords: list
    levels: int
    eb: float
    bin_width: float
    achieved: float
    attempts: int
    class_dtypes: list
    class_counts: list
    class_lengths: list

    def to_dict(self):
        return {
            "version": self.version,
            "codec": self.codec,
            "precision": self.precision.value,
            "shape": list(self.shape),
            "levels": self.levels,
            "eb": self.eb,
            "bin_width": self.bin_width,
            "max_abs_error": self.achieved,
            "attempts": self.attempts,
            "classes": [
                {"index": l, "dtype": str(dtype), "count": count, "bytes": length}
                for l, (dtype, count, length) in enumerate(
                    zip(self.class_dtypes, self.class_counts, self.class_lengths)
                )
            ],
        }


def _reconstruct(quantized, spec: QuantizerSpec, shape, coords, levels, precision):
    classes = [spec.dequantize(q) for q in quantized]
    refactored = RefactoredData(shape, coords, levels, precision, classes)
    grid, _ = recompose(refactored)
    return grid


def _max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def _encode(header_fields, quantized, codec):
    codec_name = codec.name.encode("ascii")
    payloads = [codec.compress(np.ascontiguousarray(q).astype(q.dtype.newbyteorder("<")).tobytes()) for q in quantized]
    parts = [
        _PREAMBLE.pack(MAGIC, VERSION, len(codec_name)),
        codec_name,
        _SHAPE.pack(header_fields["precision"].itemsize, len(header_fields["shape"])),
    ]
    parts += [_U64.pack(n) for n in header_fields["shape"]]
    parts += [np.asarray(c, dtype="<f8").tobytes() for c in header_fields["coords"]]
    parts.append(_U64.pack(header_fields["levels"]))
    parts.append(
        _BOUNDS.pack(
            header_fields["eb"],
            header_fields["bin_width"],
            header_fields["achieved"],
            header_fields["attempts"],
        )
    )
    parts += [
        _CLASS_ENTRY.pack(q.dtype.itemsize, q.size, len(p)) for q, p in zip(quantized, payloads)
    ]
    return b"".join(parts + payloads)


def compress_with_report(grid: TensorGrid, eb, codec="zlib", levels=None, max_attempts=MAX_ATTEMPTS):
    """Compress ``grid`` so that the decompressed field is within ``eb`` of it.

    The bin width starts at 2 eb / (L + 1) and is halved until the
    reconstruction error is at most ``eb``.

    Returns:
        Tuple of (container bytes, CompressionReport)
    """
    try:
        eb = float(eb)
    except (TypeError, ValueError):
        raise InvalidBound(eb)
    if not np.isfinite(eb) or eb <= 0:
        raise InvalidBound(eb)
    codec = get_codec(codec) if isinstance(codec, str) else codec

    start = time.perf_counter()
    refactored = decompose(grid, levels=levels)
    spec = QuantizerSpec.for_bound(eb, refactored.levels)

    achieved = float("inf")
    for attempt in range(1, max_attempts + 1):
        try:
            quantized = [spec.quantize(c) for c in refactored.classes]
        except OverflowError:
            raise BoundNotMet(eb, achieved, attempt)
        approx = _reconstruct(
            quantized, spec, refactored.shape, refactored.coords, refactored.levels, refactored.precision
        )
        achieved = _max_abs(approx.values, grid.values)
        logger.debug(
            f"Attempt {attempt}: bin width {spec.bin_width:g} gives error {achieved:g} (bound {eb:g})"
        )
        if achieved <= eb:
            break
        logger.warning(f"Error {achieved:g} exceeds bound {eb:g}; halving the bin width")
        spec = spec.refined()
    else:
        raise BoundNotMet(eb, achieved, max_attempts)

    data = _encode(
        {
            "precision": refactored.precision,
            "shape": refactored.shape,
            "coords": refactored.coords,
            "levels": refactored.levels,
            "eb": eb,
            "bin_width": spec.bin_width,
            "achieved": achieved,
            "attempts": attempt,
        },
        quantized,
        codec,
    )
    report = CompressionReport(
        eb=eb,
        bin_width=spec.bin_width,
        attempts=attempt,
        max_abs=achieved,
        codec=codec.name,
        original_bytes=grid.size * grid.precision.itemsize,
        compressed_bytes=len(data),
        class_dtypes=[q.dtype for q in quantized],
        elapsed=time.perf_counter() - start,
    )
    logger.info(
        f"Compressed {grid.shape} to {len(data)} bytes (ratio {report.ratio:.2f}, "
        f"error {achieved:g} <= {eb:g}, {attempt} attempt(s))"
    )
    return data, report


def compress(grid: TensorGrid, eb, codec="zlib", levels=None):
    return compress_with_report(grid, eb, codec=codec, levels=levels)[0]


class _Cursor:
    def __init__(self, data):
        self.data = memoryview(data)
        self.offset = 0

    def take(self, count, what):
        if self.offset + count > len(self.data):
            raise CorruptContainer(f"truncated while reading {what}")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return bytes(chunk)

    def unpack(self, fmt: struct.Struct, what):
        return fmt.unpack(self.take(fmt.size, what))


def read_container(data):
    """Parse a compressed container.

    Returns:
        Tuple of (CompressedHeader, list of encoded class payloads)
    """
    cursor = _Cursor(data)
    magic, version, name_length = cursor.unpack(_PREAMBLE, "preamble")
    if magic != MAGIC:
        raise CorruptContainer(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptContainer(f"unsupported version {version}")
    codec = cursor.take(name_length, "codec name").decode("ascii", errors="replace")
    itemsize, ndims = cursor.unpack(_SHAPE, "shape preamble")
    try:
        precision = Precision.from_itemsize(itemsize)
    except ValueError as e:
        raise CorruptContainer(str(e))
    shape = tuple(cursor.unpack(_U64, "sizes")[0] for _ in range(ndims))
    coords = [
        np.frombuffer(cursor.take(8 * n, "coordinates"), dtype="<f8").astype(np.float64)
        for n in shape
    ]
    levels = cursor.unpack(_U64, "level count")[0]
    eb, bin_width, achieved, attempts = cursor.unpack(_BOUNDS, "bounds")

    dtypes, counts, lengths = [], [], []
    for _ in range(levels + 1):
        int_size, count, length = cursor.unpack(_CLASS_ENTRY, "class table")
        if int_size not in (1, 2, 4, 8):
            raise CorruptContainer(f"unsupported integer width {int_size}")
        dtypes.append(np.dtype(f"<i{int_size}"))
        counts.append(count)
        lengths.append(length)
    payloads = [cursor.take(length, f"class {l}") for l, length in enumerate(lengths)]

    header = CompressedHeader(
        version=version,
        codec=codec,
        precision=precision,
        shape=shape,
        coords=coords,
        levels=levels,
        eb=eb,
        bin_width=bin_width,
        achieved=achieved,
        attempts=attempts,
        class_dtypes=dtypes,
        class_counts=counts,
        class_lengths=lengths,
    )
    return header, payloads


def decompress_with_header(data):
    """Decompress a container; returns (TensorGrid, CompressedHeader)."""
    header, payloads = read_container(data)
    codec = get_codec(header.codec)
    quantized = []
    for l, (payload, dtype, count) in enumerate(
        zip(payloads, header.class_dtypes, header.class_counts)
    ):
        try:
            raw = codec.decompress(payload)
        except zlib.error as e:
            raise CorruptContainer(f"class {l} does not decode: {e}")
        if len(raw) != count * dtype.itemsize:
            raise CorruptContainer(f"class {l} decodes to {len(raw)} bytes, expected {count * dtype.itemsize}")
        quantized.append(np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("=")))

    spec = QuantizerSpec(header.eb, header.bin_width, header.levels + 1)
    grid = _reconstruct(quantized, spec, header.shape, header.coords, header.levels, header.precision)
    logger.info(f"Decompressed {header.shape} (recorded error {header.achieved:g} <= {header.eb:g})")
    return grid, header


def decompress(data):
    return decompress_with_header(data)[0]
