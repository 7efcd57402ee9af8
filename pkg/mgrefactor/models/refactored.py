import zlib
from dataclasses import dataclass, field

import numpy as np

from mgrefactor.models.tensorgrid import MIN_NODES, Precision
from mgrefactor.multigrid.hierarchy import GridHierarchy, ShapeError


class RefactoredData:
    """Ordered coefficient classes of one refactored grid.

    ``classes[0]`` holds the nodal values of the coarsest level and
    ``classes[l]`` the coefficients on N_l \\ N_{l-1}, each in coarse-first
    layout. A progressive read may carry only a prefix of the classes.
    """

    def __init__(self, shape, coords, levels, precision, classes, passes=None):
        self.shape = tuple(int(n) for n in shape)
        self.coords = [np.asarray(c, dtype=np.float64) for c in coords]
        self.levels = int(levels)
        self.precision = Precision(precision)
        self.hierarchy = GridHierarchy(self.shape, self.coords, self.levels)
        self.passes = passes

        if not 1 <= len(classes) <= self.levels + 1:
            raise ShapeError(
                f"{len(classes)} classes for a hierarchy with {self.levels + 1}"
            )
        self.classes = []
        for l, values in enumerate(classes):
            values = np.ascontiguousarray(values, dtype=self.precision.dtype).ravel()
            expected = self.hierarchy.class_size(l)
            if values.size != expected:
                raise ShapeError(f"Class {l} holds {values.size} values, expected {expected}")
            self.classes.append(values)

    @property
    def ndims(self):
        return len(self.shape)

    @property
    def time_axis(self):
        """True when the last dimension is a two-snapshot time axis."""
        return self.ndims > 1 and self.shape[-1] < MIN_NODES

    @property
    def available_classes(self):
        return len(self.classes)

    @property
    def is_complete(self):
        return len(self.classes) == self.levels + 1

    @property
    def class_sizes(self):
        return [self.hierarchy.class_size(l) for l in range(self.levels + 1)]

    @property
    def total_size(self):
        return int(sum(c.size for c in self.classes))

    def class_payload(self, level):
        """Little-endian bytes of class ``level``."""
        return self.classes[level].tobytes()

    def class_nbytes(self, level):
        return self.classes[level].size * self.precision.itemsize

    def class_checksum(self, level):
        return zlib.crc32(self.class_payload(level)) & 0xFFFFFFFF

    def __eq__(self, other):
        if not isinstance(other, RefactoredData):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.levels == other.levels
            and self.precision == other.precision
            and all(np.array_equal(a, b) for a, b in zip(self.coords, other.coords))
            and len(self.classes) == len(other.classes)
            and all(a.tobytes() == b.tobytes() for a, b in zip(self.classes, other.classes))
        )

    def to_dict(self):
        """Convert header and per-class metadata to dictionary for JSON serialization."""
        result = {
            "shape": list(self.shape),
            "levels": self.levels,
            "precision": self.precision.value,
            "classes": [
                {
                    "index": l,
                    "size": int(self.classes[l].size),
                    "bytes": self.class_nbytes(l),
                    "crc32": f"{self.class_checksum(l):08x}",
                }
                for l in range(len(self.classes))
            ],
        }
        if self.passes is not None:
            result["passes"] = self.passes
        return result


@dataclass
class ReconstructionReport:
    """Measured error of a (possibly truncated) recomposition."""

    classes_used: int
    max_abs: float = 0.0
    rel_linf: float = 0.0
    weighted_l2: float = 0.0
    elapsed: float = 0.0
    reference: str = "none"
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        result = {
            "classes_used": self.classes_used,
            "reference": self.reference,
            "max_abs": self.max_abs,
            "rel_linf": self.rel_linf,
            "weighted_l2": self.weighted_l2,
            "elapsed": self.elapsed,
        }
        result.update(self.extra)
        return result
