"""
The MGRF container: a fixed header followed by one payload per class.

    magic "MGRF" | version u8 | endianness u8 (0 = little) | dtype u8 (4 | 8)
    | ndims u8 | size u64 per dim | f64 coordinates per dim | levels u64
    | (byte length u64, CRC32 u32) per class | class payloads in order

All integers and floats are little-endian. Classes are stored coarsest
first, so reading k + 1 classes only touches a prefix of the file.
"""

import logging
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from mgrefactor.models.refactored import RefactoredData
from mgrefactor.models.tensorgrid import MAX_DIMS, MIN_NODES, MIN_TIME_STEPS, Precision
from mgrefactor.multigrid.hierarchy import GridHierarchy, default_levels

logger = logging.getLogger(__name__)

MAGIC = b"MGRF"
VERSION = 1
LITTLE_ENDIAN = 0

_PREAMBLE = struct.Struct("<4sBBBB")
_U64 = struct.Struct("<Q")
_CLASS_ENTRY = struct.Struct("<QI")


class CorruptFile(Exception):
    def __init__(self, reason, class_index=None):
        self.class_index = class_index
        where = f" (class {class_index})" if class_index is not None else ""
        self.message = f"Corrupt refactored file{where}: {reason}"
        super(CorruptFile, self).__init__(self.message)


class MissingClass(Exception):
    def __init__(self, class_index, available):
        self.class_index = class_index
        self.message = (
            f"Class {class_index} is not available (the file provides {available} classes)"
        )
        super(MissingClass, self).__init__(self.message)


@dataclass
class RefactorFileHeader:
    version: int
    precision: Precision
    shape: tuple
    coords: list
    levels: int
    class_lengths: list
    class_crcs: list

    @property
    def size(self):
        """Header length in bytes."""
        ndims = len(self.shape)
        return (
            _PREAMBLE.size
            + ndims * _U64.size
            + sum(self.shape) * 8
            + _U64.size
            + (self.levels + 1) * _CLASS_ENTRY.size
        )

    def payload_offset(self, class_index):
        return self.size + sum(self.class_lengths[:class_index])

    def to_dict(self):
        return {
            "version": self.version,
            "precision": self.precision.value,
            "shape": list(self.shape),
            "levels": self.levels,
            "header_bytes": self.size,
            "classes": [
                {"index": l, "bytes": length, "crc32": f"{crc:08x}"}
                for l, (length, crc) in enumerate(zip(self.class_lengths, self.class_crcs))
            ],
        }


def encode_header(refactored: RefactoredData):
    parts = [
        _PREAMBLE.pack(
            MAGIC, VERSION, LITTLE_ENDIAN, refactored.precision.itemsize, refactored.ndims
        )
    ]
    parts += [_U64.pack(n) for n in refactored.shape]
    parts += [np.asarray(c, dtype="<f8").tobytes() for c in refactored.coords]
    parts.append(_U64.pack(refactored.levels))
    parts += [
        _CLASS_ENTRY.pack(refactored.class_nbytes(l), refactored.class_checksum(l))
        for l in range(refactored.levels + 1)
    ]
    return b"".join(parts)


def encode_refactored(refactored: RefactoredData):
    """Serialize complete refactored data to bytes."""
    if not refactored.is_complete:
        raise MissingClass(refactored.available_classes, refactored.available_classes)
    payloads = [refactored.class_payload(l) for l in range(refactored.levels + 1)]
    return encode_header(refactored) + b"".join(payloads)


def write_refactored(refactored: RefactoredData, path):
    """Write ``refactored`` to ``path``; returns the number of bytes written."""
    data = encode_refactored(refactored)
    with open(path, "wb") as f:
        f.write(data)
    logger.info(f"Wrote {len(data)} bytes ({refactored.levels + 1} classes) to {path}")
    return len(data)


class RefactorFileReader:
    """Sequential reader that consumes only the bytes it needs.

    ``bytes_read`` counts every byte taken from the stream.
    """

    def __init__(self, stream):
        self.stream = stream
        self.bytes_read = 0
        self.header = self._read_header()
        self._next_class = 0

    def _read(self, count, what, class_index=None):
        data = self.stream.read(count)
        self.bytes_read += len(data)
        if len(data) != count:
            if class_index is not None:
                raise MissingClass(class_index, class_index)
            raise CorruptFile(f"truncated while reading {what}")
        return data

    def _read_header(self):
        magic, version, endian, itemsize, ndims = _PREAMBLE.unpack(
            self._read(_PREAMBLE.size, "preamble")
        )
        if magic != MAGIC:
            raise CorruptFile(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptFile(f"unsupported version {version}")
        if endian != LITTLE_ENDIAN:
            raise CorruptFile(f"unsupported endianness flag {endian}")
        if itemsize not in (4, 8):
            raise CorruptFile(f"unsupported element size {itemsize}")
        if not 1 <= ndims <= MAX_DIMS:
            raise CorruptFile(f"unsupported dimension count {ndims}")

        shape = tuple(_U64.unpack(self._read(_U64.size, "sizes"))[0] for _ in range(ndims))
        # only a trailing time axis may hold two nodes
        if any(n < MIN_NODES for n in shape[:-1]) or shape[-1] < (
            MIN_TIME_STEPS if ndims > 1 else MIN_NODES
        ):
            raise CorruptFile(f"grid sizes {shape} below the minimum of {MIN_NODES}")
        coords = [
            np.frombuffer(self._read(8 * n, "coordinates"), dtype="<f8").astype(np.float64)
            for n in shape
        ]
        if any(not np.all(np.diff(c) > 0) for c in coords):
            raise CorruptFile("coordinates are not strictly increasing")

        levels = _U64.unpack(self._read(_U64.size, "level count"))[0]
        if not 1 <= levels <= default_levels(shape):
            raise CorruptFile(f"level count {levels} does not fit shape {shape}")

        lengths, crcs = [], []
        for _ in range(levels + 1):
            length, crc = _CLASS_ENTRY.unpack(self._read(_CLASS_ENTRY.size, "class table"))
            lengths.append(length)
            crcs.append(crc)

        hierarchy = GridHierarchy(shape, coords, levels)
        for l, length in enumerate(lengths):
            if length != hierarchy.class_size(l) * itemsize:
                raise CorruptFile(f"declared length {length} does not match the grid", l)

        return RefactorFileHeader(
            version=version,
            precision=Precision.from_itemsize(itemsize),
            shape=shape,
            coords=coords,
            levels=levels,
            class_lengths=lengths,
            class_crcs=crcs,
        )

    def read_class(self):
        """Read and verify the next class; returns its values."""
        index = self._next_class
        if index > self.header.levels:
            raise MissingClass(index, self.header.levels + 1)
        payload = self._read(self.header.class_lengths[index], "payload", class_index=index)
        if zlib.crc32(payload) & 0xFFFFFFFF != self.header.class_crcs[index]:
            raise CorruptFile("checksum mismatch", index)
        self._next_class += 1
        return np.frombuffer(payload, dtype=self.header.precision.dtype)

    def read(self, classes=None):
        """Read classes 0..``classes`` (default: all) into RefactoredData."""
        header = self.header
        last = header.levels if classes is None else int(classes)
        if last < 0:
            raise MissingClass(last, header.levels + 1)
        if last > header.levels:
            raise MissingClass(last, header.levels + 1)
        values = [self.read_class() for _ in range(self._next_class, last + 1)]
        return RefactoredData(header.shape, header.coords, header.levels, header.precision, values)


def read_header(path):
    with open(path, "rb") as f:
        return RefactorFileReader(f).header


def read_refactored(path, classes=None):
    """Read the header and classes 0..``classes`` of an MGRF file.

    Returns:
        Tuple of (RefactoredData, bytes read)
    """
    with open(path, "rb") as f:
        reader = RefactorFileReader(f)
        refactored = reader.read(classes)
    logger.debug(f"Read {reader.bytes_read} bytes from {path}")
    return refactored, reader.bytes_read
