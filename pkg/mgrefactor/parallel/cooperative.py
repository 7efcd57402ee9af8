"""
Multi-worker decomposition.

Workers are threads of one process that own disjoint blocks of the grid and
talk only through a Channel. Every phase ends in a barrier. The coefficient
and mass-trans phases exchange halos; the correction solves run as a
pipelined Thomas sweep along chains of blocks, one stage per barrier.

Each node is computed with the same floating-point operations as in the
serial path, so the output equals serial decompose exactly.
"""

import logging
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from mgrefactor.models.refactored import RefactoredData
from mgrefactor.models.tensorgrid import TensorGrid
from mgrefactor.multigrid.hierarchy import build_hierarchy
from mgrefactor.multigrid.kernels import (
    apply_correction,
    gather_class,
    grid_process_block,
    masstrans_block,
    thomas_backward,
    thomas_forward,
    tridiagonal_operator,
)
from mgrefactor.multigrid.refactor import pass_accounting, accumulated_passes
from mgrefactor.parallel.channel import Channel, ExchangeMessage

logger = logging.getLogger(__name__)

COLLECTOR = 0


class PartitionScheme(str, Enum):
    BLOCK = "block"
    SHIFTED_ROUND_ROBIN = "shifted_round_robin"


class TooManyWorkers(Exception):
    def __init__(self, workers, limit, scheme):
        self.message = (
            f"{workers} workers cannot share a grid that the {scheme} scheme splits "
            f"into at most {limit} pieces"
        )
        super(TooManyWorkers, self).__init__(self.message)


class WorkerFailure(Exception):
    def __init__(self, worker, phase, cause):
        self.worker = worker
        self.phase = phase
        self.cause = cause
        self.message = f"Worker {worker} failed in phase '{phase}': {cause!r}"
        super(WorkerFailure, self).__init__(self.message)


@dataclass(frozen=True)
class Partition:
    """One block of the global grid and the worker that owns it.

    ``lo``/``hi`` bound the block in full-grid indices (``hi`` exclusive).
    """

    worker: int
    block: tuple
    lo: tuple
    hi: tuple
    scheme: PartitionScheme
    coefficient_ghost: int = 1
    masstrans_ghost: int = 2

    @property
    def shape(self):
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def size(self):
        return int(np.prod(self.shape))

    def ghost_widths(self, phase, dim=None):
        """Per-dimension ghost widths of ``phase`` ("coefficient" or "masstrans")."""
        if phase == "coefficient":
            return (self.coefficient_ghost,) * len(self.lo)
        if phase == "masstrans":
            return tuple(self.masstrans_ghost if d == dim else 0 for d in range(len(self.lo)))
        return (0,) * len(self.lo)

    def to_dict(self):
        return {
            "worker": self.worker,
            "block": list(self.block),
            "lo": list(self.lo),
            "hi": list(self.hi),
            "scheme": self.scheme.value,
        }


def _split(n, pieces):
    bounds = [0]
    for i in range(pieces):
        bounds.append(bounds[-1] + n // pieces + (1 if i < n % pieces else 0))
    return bounds


def partition(shape, workers, scheme=PartitionScheme.BLOCK):
    """Split ``shape`` into blocks and assign them to ``workers``.

    The block scheme cuts the last (slowest varying) dimension into one slab
    per worker. The shifted round-robin scheme cuts every dimension into
    ``workers`` pieces and gives block (i_0, ..., i_{D-1}) to worker
    (i_0 + ... + i_{D-1}) mod W, so every worker owns one block of each
    row of blocks along any dimension.
    """
    scheme = PartitionScheme(scheme)
    shape = tuple(int(n) for n in shape)
    if workers < 1:
        raise ValueError(f"Need at least one worker, got {workers}")

    if scheme is PartitionScheme.BLOCK:
        if workers > shape[-1]:
            raise TooManyWorkers(workers, shape[-1], scheme.value)
        bounds = _split(shape[-1], workers)
        return [
            Partition(
                worker=i,
                block=(0,) * (len(shape) - 1) + (i,),
                lo=(0,) * (len(shape) - 1) + (bounds[i],),
                hi=shape[:-1] + (bounds[i + 1],),
                scheme=scheme,
            )
            for i in range(workers)
        ]

    if workers > min(shape):
        raise TooManyWorkers(workers, min(shape), scheme.value)
    bounds = [_split(n, workers) for n in shape]
    parts = []
    for block in np.ndindex(*([workers] * len(shape))):
        parts.append(
            Partition(
                worker=int(sum(block)) % workers,
                block=tuple(int(i) for i in block),
                lo=tuple(bounds[d][i] for d, i in enumerate(block)),
                hi=tuple(bounds[d][i + 1] for d, i in enumerate(block)),
                scheme=scheme,
            )
        )
    return parts


@dataclass
class CommunicationStats:
    workers: int
    scheme: str
    elements: dict = field(default_factory=dict)
    messages: dict = field(default_factory=dict)
    timings: dict = field(default_factory=lambda: defaultdict(float))
    idle: dict = field(default_factory=dict)
    total_elements: int = 0

    def surface_ratio(self, phase="coefficient"):
        """Exchanged elements of ``phase`` per grid element."""
        return self.elements.get(phase, 0) / self.total_elements if self.total_elements else 0.0

    def to_dict(self):
        return {
            "workers": self.workers,
            "scheme": self.scheme,
            "elements": dict(self.elements),
            "messages": dict(self.messages),
            "timings": dict(self.timings),
            "idle_workers": {key: list(v) for key, v in self.idle.items()},
        }


def _intersect(a, b):
    box = tuple((max(x0, y0), min(x1, y1)) for (x0, x1), (y0, y1) in zip(a, b))
    return box if all(lo < hi for lo, hi in box) else None


def _empty(box):
    return any(lo >= hi for lo, hi in box)


def _shape(box):
    return tuple(hi - lo for lo, hi in box)


def _relative(inner, outer):
    return tuple(slice(lo - o, hi - o) for (lo, hi), (o, _) in zip(inner, outer))


class _CooperativeRun:
    def __init__(self, grid, hierarchy, parts, executor, channel, stats):
        self.grid = grid
        self.hierarchy = hierarchy
        self.parts = {p.block: p for p in parts}
        self.owner = {p.block: p.worker for p in parts}
        self.workers = max(p.worker for p in parts) + 1
        self.blocks_of = defaultdict(list)
        for p in parts:
            self.blocks_of[p.worker].append(p.block)
        self.executor = executor
        self.channel = channel
        self.stats = stats
        self.ndims = hierarchy.ndims

    def step(self, phase, fn):
        """Run ``fn(worker)`` on every worker and wait for all of them."""
        start = time.perf_counter()
        futures = {w: self.executor.submit(fn, w) for w in range(self.workers)}
        failures = []
        for w, future in futures.items():
            error = future.exception()
            if error is not None:
                failures.append((w, error))
        self.stats.timings[phase.split("/")[0]] += time.perf_counter() - start
        if failures:
            worker, error = failures[0]
            raise WorkerFailure(worker, phase, error)

    def ranges(self, level):
        """Per-block (start, stop) level positions along every dimension."""
        idx = self.hierarchy.idx
        return {
            block: tuple(
                (
                    int(np.searchsorted(idx[d][level], p.lo[d])),
                    int(np.searchsorted(idx[d][level], p.hi[d])),
                )
                for d in range(self.ndims)
            )
            for block, p in self.parts.items()
        }

    def exchange(self, phase, boxes, extended, data):
        """Post the parts of every block that other blocks' extended boxes need."""

        def post(worker):
            for source in self.blocks_of[worker]:
                if _empty(boxes[source]):
                    continue
                for target, ext in extended.items():
                    if target == source or ext is None:
                        continue
                    overlap = _intersect(boxes[source], ext)
                    if overlap is None:
                        continue
                    payload = data[source][_relative(overlap, boxes[source])]
                    self.channel.send(
                        ExchangeMessage(
                            sender=worker,
                            receiver=self.owner[target],
                            phase=phase,
                            descriptor=(target, source),
                            box=overlap,
                            payload=np.array(payload),
                        )
                    )

        self.step(phase, post)

    def assemble(self, block, box, ext, data, messages):
        buffer = np.empty(_shape(ext))
        buffer[_relative(box, ext)] = data[block]
        for message in messages:
            if message.descriptor[0] == block:
                buffer[_relative(message.box, ext)] = message.payload
        return buffer

    def collect(self, phase, boxes, data, shape):
        """Gather every block's array on the collecting worker."""
        gathered = {}

        def send(worker):
            for block in self.blocks_of[worker]:
                if _empty(boxes[block]):
                    continue
                self.channel.send(
                    ExchangeMessage(worker, COLLECTOR, phase, (block,), boxes[block], np.array(data[block]))
                )

        def receive(worker):
            if worker != COLLECTOR:
                return
            full = np.empty(shape)
            for message in self.channel.receive(worker, phase):
                full[tuple(slice(lo, hi) for lo, hi in message.box)] = message.payload
            gathered["values"] = full

        self.step(phase, send)
        self.step(phase, receive)
        return gathered["values"]

    def level(self, level, values):
        hierarchy = self.hierarchy
        ndims = self.ndims
        fine = self.ranges(level)
        coarse = self.ranges(level - 1)
        axes = [hierarchy.axis(d, level) for d in range(ndims)]
        operators = [tridiagonal_operator(hierarchy, level, d) for d in range(ndims)]
        sizes = hierarchy.level_shape(level)

        # coefficients, halo of one node in every dimension
        extended = {}
        for block, box in fine.items():
            widths = self.parts[block].ghost_widths("coefficient")
            extended[block] = None if _empty(box) else tuple(
                (max(a - w, 0), min(b + w, n)) for (a, b), w, n in zip(box, widths, sizes)
            )
        self.exchange("coefficient", fine, extended, values)

        coefficients = {}
        vec = {}

        def compute_coefficients(worker):
            inbox = self.channel.receive(worker, "coefficient")
            for block in self.blocks_of[worker]:
                box = fine[block]
                if _empty(box):
                    coefficients[block] = np.empty(_shape(box))
                    vec[block] = np.empty(_shape(box))
                    continue
                ext = extended[block]
                buffer = self.assemble(block, box, ext, values, inbox)
                out = np.empty(buffer.shape)
                grid_process_block(buffer, out, axes, box, tuple(lo for lo, _ in ext))
                coefficients[block] = out[_relative(box, ext)]

                mask = axes[0].coarse_mask[box[0][0]:box[0][1]]
                for d in range(1, ndims):
                    mask = np.logical_and.outer(mask, axes[d].coarse_mask[box[d][0]:box[d][1]])
                vec[block] = np.where(mask, 0.0, coefficients[block])

        self.step("coefficient", compute_coefficients)
        class_values = gather_class(self.collect("collect", fine, vec, sizes), hierarchy, level)

        # mass-trans, halo of two nodes along the active dimension
        load = vec
        for d in range(ndims):
            phase = f"masstrans[{d}]"
            boxes = {
                block: tuple(coarse[block][e] if e < d else fine[block][e] for e in range(ndims))
                for block in fine
            }
            extended = {}
            for block, box in boxes.items():
                widths = self.parts[block].ghost_widths("masstrans", d)
                if _empty(box) or _empty(coarse[block][d:d + 1]):
                    extended[block] = None
                    continue
                extended[block] = tuple(
                    (max(a - w, 0), min(b + w, sizes[e])) if e == d else (a, b)
                    for e, ((a, b), w) in enumerate(zip(box, widths))
                )
            self.exchange(phase, boxes, extended, load)

            result = {}

            def compute_masstrans(worker, d=d, boxes=boxes, extended=extended, result=result, load=load, phase=phase):
                inbox = self.channel.receive(worker, phase)
                for block in self.blocks_of[worker]:
                    out_box = tuple(coarse[block][e] if e <= d else fine[block][e] for e in range(ndims))
                    if extended[block] is None:
                        result[block] = np.empty(_shape(out_box))
                        continue
                    ext = extended[block]
                    buffer = self.assemble(block, boxes[block], ext, load, inbox)
                    result[block] = masstrans_block(buffer, d, operators[d], ext[d][0], fine[block][d])

            self.step(phase, compute_masstrans)
            load = result

        # corrections, pipelined along chains of blocks
        z = load
        for d in range(ndims):
            z = self.pipelined_solve(level, d, coarse, z, operators[d])

        next_values = {}

        def correct(worker):
            for block in self.blocks_of[worker]:
                box = fine[block]
                picks = [
                    axes[e].coarse_positions[coarse[block][e][0]:coarse[block][e][1]] - box[e][0]
                    for e in range(ndims)
                ]
                next_values[block] = apply_correction(coefficients[block][np.ix_(*picks)], z[block], +1)

        self.step("apply", correct)
        return class_values, next_values

    def pipelined_solve(self, level, d, boxes, load, operator):
        phase = f"solve[{d}]"
        chain_length = max(block[d] for block in self.parts) + 1
        moved = {block: np.moveaxis(np.array(values), d, 0) for block, values in load.items()}

        def cross_box(block):
            return tuple(boxes[block][e] for e in range(self.ndims) if e != d)

        def neighbour(block, offset):
            return block[:d] + (block[d] + offset,) + block[d + 1:]

        idle = []

        def run_stage(stage, direction):
            tag = f"{phase}/{direction}{stage}"
            idle.append(self.workers - len({self.owner[b] for b in self.parts if b[d] == stage}))

            def work(worker):
                inbox = {m.descriptor[0]: m.payload for m in self.channel.receive(worker, tag)}
                for block in self.blocks_of[worker]:
                    if block[d] != stage:
                        continue
                    a, b = boxes[block][d]
                    state = inbox.get(block)
                    v = moved[block]
                    if direction == "fwd":
                        if b > a:
                            thomas_forward(v, operator, a, b, state)
                            state = v[-1]
                        target = stage + 1
                    else:
                        if b > a:
                            thomas_backward(v, operator, a, b, state)
                            state = v[0]
                        target = stage - 1
                    if state is None or not 0 <= target < chain_length:
                        continue
                    receiver = neighbour(block, target - stage)
                    self.channel.send(
                        ExchangeMessage(
                            sender=worker,
                            receiver=self.owner[receiver],
                            phase=f"{phase}/{direction}{target}",
                            descriptor=(receiver,),
                            box=cross_box(block),
                            payload=np.array(state),
                        )
                    )

            self.step(tag, work)

        for stage in range(chain_length):
            run_stage(stage, "fwd")
        for stage in range(chain_length - 1, -1, -1):
            run_stage(stage, "bwd")

        self.stats.idle[f"{level}:{d}"] = idle
        return {block: np.moveaxis(v, 0, d) for block, v in moved.items()}

    def run(self):
        hierarchy = self.hierarchy
        full = self.ranges(hierarchy.levels)
        source = np.asarray(self.grid.values, dtype=np.float64)
        values = {
            block: source[tuple(slice(a, b) for a, b in box)] for block, box in full.items()
        }

        classes = [None] * (hierarchy.levels + 1)
        for level in range(hierarchy.levels, 0, -1):
            classes[level], values = self.level(level, values)
            logger.debug(f"Level {level} done by {self.workers} workers")

        coarsest = self.ranges(0)
        classes[0] = self.collect("collect", coarsest, values, hierarchy.level_shape(0)).ravel(order="F")
        return classes


def cooperative_decompose(grid: TensorGrid, workers, scheme=PartitionScheme.BLOCK, levels=None, stats: CommunicationStats = None):
    """Decompose ``grid`` with ``workers`` cooperating workers.

    Args:
        grid: Input grid
        workers: Number of workers W
        scheme: PartitionScheme.BLOCK or PartitionScheme.SHIFTED_ROUND_ROBIN
        levels: Optional cap on the number of levels
        stats: Optional CommunicationStats filled with exchange counts,
            phase timings and per-stage idle workers

    Returns:
        RefactoredData identical to serial decompose
    """
    scheme = PartitionScheme(scheme)
    parts = partition(grid.shape, workers, scheme)
    hierarchy = build_hierarchy(grid, levels)
    if stats is None:
        stats = CommunicationStats(workers, scheme.value)
    stats.total_elements = grid.size
    channel = Channel(workers)

    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as executor:
        classes = _CooperativeRun(grid, hierarchy, parts, executor, channel, stats).run()
    stats.elements.update(channel.elements)
    stats.messages.update(channel.messages)
    logger.info(
        f"Cooperative decomposition of {grid.shape} with {workers} workers ({scheme.value}) "
        f"in {time.perf_counter() - start:.3f}s"
    )

    accounting = pass_accounting(hierarchy)
    return RefactoredData(
        grid.shape,
        grid.coords,
        hierarchy.levels,
        grid.precision,
        classes,
        passes={"accumulated": accumulated_passes(accounting, hierarchy)},
    )


def embarrassing_decompose(grids, workers, group_size=1, scheme=PartitionScheme.BLOCK, levels=None):
    """Decompose independent grids concurrently.

    The ``workers`` are split into groups of ``group_size``; grid i goes to
    group i mod K (K = workers // group_size) and the workers of a group
    decompose it cooperatively.

    Returns:
        List of RefactoredData in input order
    """
    grids = list(grids)
    if group_size < 1 or workers < 1:
        raise ValueError(f"Need positive workers and group size, got {workers} and {group_size}")
    if group_size > workers:
        raise TooManyWorkers(group_size, workers, "group")
    groups = workers // group_size
    results = [None] * len(grids)

    def run_group(group):
        for i in range(group, len(grids), groups):
            results[i] = cooperative_decompose(grids[i], group_size, scheme, levels)

    with ThreadPoolExecutor(max_workers=groups) as executor:
        futures = [executor.submit(run_group, g) for g in range(min(groups, len(grids)))]
        for g, future in enumerate(futures):
            error = future.exception()
            if error is not None:
                raise error
    return results
