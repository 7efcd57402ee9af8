"""Raw binary grids: little-endian values with dimension 0 fastest."""

import logging
import os

import numpy as np

from mgrefactor.models.tensorgrid import InvalidGrid, Precision, TensorGrid

logger = logging.getLogger(__name__)


class RawInputError(Exception):
    def __init__(self, path, reason):
        self.path = path
        self.message = f"Cannot read {path}: {reason}"
        super(RawInputError, self).__init__(self.message)


def parse_shape(text):
    """Parse ``"65x65x65"`` (or comma separated) into a tuple of ints."""
    parts = text.replace(",", "x").lower().split("x")
    try:
        shape = tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise ValueError(f"Invalid shape '{text}'. Use e.g. 65x65x65")
    if not shape:
        raise ValueError(f"Invalid shape '{text}'. Use e.g. 65x65x65")
    return shape


def read_coords(path, shape):
    """Read a coordinate sidecar: every dimension's f64 coordinates, concatenated."""
    expected = int(sum(shape))
    try:
        flat = np.fromfile(path, dtype="<f8")
    except OSError as e:
        raise RawInputError(path, e.strerror or str(e))
    if flat.size != expected:
        raise RawInputError(path, f"holds {flat.size} coordinates, shape {shape} needs {expected}")
    return np.split(flat.astype(np.float64), np.cumsum(shape)[:-1])


def write_coords(coords, path):
    np.concatenate([np.asarray(c, dtype="<f8") for c in coords]).tofile(path)


def read_raw(path, shape, precision, coords_path=None, time_axis=False):
    """Load ``path`` as a TensorGrid of ``shape`` (the last dimension is time with ``time_axis``)."""
    precision = Precision(precision)
    expected = int(np.prod(shape)) * precision.itemsize
    try:
        size = os.path.getsize(path)
    except OSError as e:
        raise RawInputError(path, e.strerror or str(e))
    if size != expected:
        raise RawInputError(
            path, f"file has {size} bytes, shape {tuple(shape)} of {precision.value} needs {expected}"
        )

    coords = read_coords(coords_path, shape) if coords_path else None
    with open(path, "rb") as f:
        buffer = f.read()
    try:
        grid = TensorGrid.from_raw(buffer, shape, precision, coords=coords, time_axis=time_axis)
    except InvalidGrid as e:
        raise RawInputError(path, e.message)
    logger.debug(f"Read {size} bytes of {precision.value} {tuple(shape)} from {path}")
    return grid


def read_snapshots(path, shape, precision, steps, coords_path=None):
    """Split a raw file of ``steps`` consecutive snapshots into TensorGrids."""
    if steps < 1:
        raise RawInputError(path, f"time step count must be positive, got {steps}")
    if steps == 1:
        return [read_raw(path, shape, precision, coords_path)]
    series = read_raw(path, tuple(shape) + (steps,), precision, time_axis=True)
    coords = read_coords(coords_path, shape) if coords_path else None
    return [
        TensorGrid(series.values[..., t], coords=coords, precision=series.precision)
        for t in range(steps)
    ]


def write_raw(grid: TensorGrid, path):
    data = grid.to_raw()
    with open(path, "wb") as f:
        f.write(data)
    return len(data)
