from enum import Enum

import numpy as np

MAX_DIMS = 4
MIN_NODES = 3
MIN_TIME_STEPS = 2


class InvalidGrid(Exception):
    def __init__(self, reason):
        self.message = f"Invalid grid: {reason}"
        super(InvalidGrid, self).__init__(self.message)


class Precision(str, Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def itemsize(self):
        return 4 if self is Precision.F32 else 8

    @property
    def dtype(self):
        return np.dtype("<f4") if self is Precision.F32 else np.dtype("<f8")

    @property
    def numpy_type(self):
        return np.float32 if self is Precision.F32 else np.float64

    @classmethod
    def from_dtype(cls, dtype):
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.F32
        return cls.F64

    @classmethod
    def from_itemsize(cls, itemsize):
        if itemsize == 4:
            return cls.F32
        if itemsize == 8:
            return cls.F64
        raise ValueError(f"Unsupported element size: {itemsize}")


def uniform_coords(n):
    """Uniform coordinates on [0, 1] used when raw data comes without coordinates."""
    return np.linspace(0.0, 1.0, n)


def min_nodes(dim, ndims, time_axis=False):
    """Smallest legal node count of ``dim``."""
    if time_axis and dim == ndims - 1:
        return MIN_TIME_STEPS
    return MIN_NODES


class TensorGrid:
    """N-dimensional values on a tensor-product grid.

    ``values`` is an ndarray whose axis ``d`` is grid dimension ``d``. Flat
    (raw) representations put dimension 0 fastest, i.e. Fortran order.

    With ``time_axis`` the last dimension holds snapshots and may have as few
    as two nodes; a two-node axis is never refined.
    """

    def __init__(self, values, coords=None, precision=None, time_axis=False):
        values = np.asarray(values)
        if values.ndim < 1 or values.ndim > MAX_DIMS:
            raise InvalidGrid(f"{values.ndim} dimensions (supported: 1..{MAX_DIMS})")
        if time_axis and values.ndim < 2:
            raise InvalidGrid("a time axis needs at least one spatial dimension")
        self.time_axis = bool(time_axis)
        for d, n in enumerate(values.shape):
            minimum = min_nodes(d, values.ndim, self.time_axis)
            if n < minimum:
                raise InvalidGrid(f"dimension {d} has {n} nodes (minimum {minimum})")

        if precision is None:
            precision = Precision.from_dtype(values.dtype)
        self.precision = Precision(precision)
        self.values = np.ascontiguousarray(values, dtype=self.precision.numpy_type)

        if coords is None:
            coords = [uniform_coords(n) for n in self.values.shape]
        if len(coords) != self.values.ndim:
            raise InvalidGrid(
                f"{len(coords)} coordinate arrays for {self.values.ndim} dimensions"
            )

        self.coords = []
        for d, c in enumerate(coords):
            c = np.asarray(c, dtype=np.float64).ravel()
            if len(c) != self.values.shape[d]:
                raise InvalidGrid(
                    f"dimension {d} has {self.values.shape[d]} nodes but {len(c)} coordinates"
                )
            if len(c) > 1 and not np.all(np.diff(c) > 0):
                raise InvalidGrid(f"coordinates of dimension {d} are not strictly increasing")
            self.coords.append(c)

    @property
    def ndims(self):
        return self.values.ndim

    @property
    def shape(self):
        return tuple(self.values.shape)

    @property
    def size(self):
        return int(self.values.size)

    @property
    def data_range(self):
        if self.values.size == 0:
            return 0.0
        return float(np.max(self.values)) - float(np.min(self.values))

    @classmethod
    def from_raw(cls, buffer, shape, precision, coords=None, time_axis=False):
        """Build a grid from little-endian bytes with dimension 0 fastest."""
        precision = Precision(precision)
        flat = np.frombuffer(buffer, dtype=precision.dtype)
        expected = int(np.prod(shape))
        if flat.size != expected:
            raise InvalidGrid(
                f"raw data holds {flat.size} values but shape {tuple(shape)} needs {expected}"
            )
        values = flat.reshape(tuple(shape), order="F")
        return cls(values, coords=coords, precision=precision, time_axis=time_axis)

    def to_raw(self):
        """Little-endian bytes with dimension 0 fastest."""
        return np.asarray(self.values, dtype=self.precision.dtype).tobytes(order="F")

    def to_dict(self):
        """Convert grid metadata to dictionary for JSON serialization."""
        return {
            "ndims": self.ndims,
            "shape": list(self.shape),
            "precision": self.precision.value,
            "range": self.data_range,
        }
