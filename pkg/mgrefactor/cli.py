import argparse
import json
import logging
import sys
import time

import numpy as np

from mgrefactor import __version__
from mgrefactor.models.tensorgrid import InvalidGrid, Precision
from mgrefactor.models.tiling import InvalidTileConfig, TileConfig
from mgrefactor.multigrid.hierarchy import (
    GridHierarchy,
    InvalidLevel,
    ShapeError,
    build_hierarchy,
)
from mgrefactor.multigrid.kernels import (
    InvalidFusion,
    SingularSystem,
    compute_coefficients,
    masstrans_apply,
    solve_correction,
)
from mgrefactor.multigrid.refactor import (
    PassCounter,
    accumulated_passes,
    decompose,
    decompose_spatiotemporal,
    pass_accounting,
    recompose,
    select_tiling,
)
from mgrefactor.parallel.cooperative import (
    CommunicationStats,
    PartitionScheme,
    TooManyWorkers,
    WorkerFailure,
    cooperative_decompose,
    embarrassing_decompose,
)
from mgrefactor.storage.compression import (
    BoundNotMet,
    CorruptContainer,
    InvalidBound,
    UnknownCodec,
    compress_with_report,
    decompress_with_header,
)
from mgrefactor.storage.refactorfile import (
    CorruptFile,
    MissingClass,
    RefactorFileReader,
    read_refactored,
    write_refactored,
)
from mgrefactor.tuning.autotune import (
    DeviceModel,
    Kernel,
    TuningCache,
    autotune,
    rank_configs,
    ranks_in_order,
    timed,
)
from mgrefactor.utils.config import InvalidConfig, load_config
from mgrefactor.utils.rawio import (
    RawInputError,
    parse_shape,
    read_raw,
    read_snapshots,
    write_raw,
)
from mgrefactor.utils.synthetic import reaction_diffusion

logger = logging.getLogger("mgrefactor")

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


class VerificationFailed(Exception):
    def __init__(self, max_abs, tolerance):
        self.message = f"Round-trip error {max_abs:g} exceeds tolerance {tolerance:g}"
        super(VerificationFailed, self).__init__(self.message)


def _output_result(args, result_dict):
    """Output result as JSON or human-readable text."""
    if getattr(args, "json", False):
        print(json.dumps(result_dict, indent=2))
    else:
        print(result_dict.get("message", "Done"))


def _is_json_mode(argv):
    return "--json" in argv or "-j" in argv


def _output_error(error_code: str, message: str, json_mode=False):
    """Write a one-line error to stderr."""
    message = " ".join(str(message).split())
    if json_mode:
        error_dict = {"action": "failed", "error": message, "code": error_code}
        print(json.dumps(error_dict), file=sys.stderr)
    else:
        print(f"error[{error_code}]: {message}", file=sys.stderr)


def _tile_from_args(args, config):
    if getattr(args, "tile", None):
        return TileConfig.parse(args.tile)
    return config.tile


def _levels_from_args(args, config):
    levels = getattr(args, "levels", None)
    return levels if levels is not None else config.levels


def _read_input(args):
    return read_raw(args.input, parse_shape(args.shape), args.dtype, args.coords)


def _stats_message(stats: CommunicationStats):
    lines = [f"Communication ({stats.workers} workers, {stats.scheme}):"]
    for phase in sorted(stats.elements):
        lines.append(
            f"  {phase}: {stats.elements[phase]} elements in {stats.messages.get(phase, 0)} messages"
        )
    idle = [count for stages in stats.idle.values() for count in stages]
    if idle:
        lines.append(f"  idle workers per solve stage: max {max(idle)}, mean {np.mean(idle):.2f}")
    return "\n".join(lines)


def _check_decompose_flags(args):
    if args.time_steps > 1 and not args.independent and args.workers > 1:
        raise ValueError("--workers above 1 with --time-steps needs --independent")
    if args.independent and args.time_steps < 2:
        raise ValueError("--independent needs --time-steps of 2 or more")
    if args.tile and args.workers > 1:
        raise ValueError("--tile only applies to single-worker runs")


def decompose_cmd(args):
    _check_decompose_flags(args)
    config = args.config
    levels = _levels_from_args(args, config)
    tile = _tile_from_args(args, config)
    shape = parse_shape(args.shape)

    if args.time_steps > 1:
        snapshots = read_snapshots(args.input, shape, args.dtype, args.time_steps, args.coords)
        if args.independent:
            results = embarrassing_decompose(
                snapshots, args.workers, args.group_size, args.scheme, levels
            )
            outputs = []
            for t, refactored in enumerate(results):
                path = f"{args.output}.{t}"
                write_refactored(refactored, path)
                outputs.append(path)
            _output_result(
                args,
                {
                    "action": "decomposed",
                    "outputs": outputs,
                    "snapshots": len(results),
                    "message": f"Decomposed {len(results)} snapshots into {', '.join(outputs)}",
                },
            )
            return
        refactored = decompose_spatiotemporal(
            snapshots, levels=levels, tile=tile, budget=config.tile_budget
        )
        stats = None
    else:
        grid = _read_input(args)
        stats = None
        if args.workers > 1:
            stats = CommunicationStats(args.workers, args.scheme)
            refactored = cooperative_decompose(grid, args.workers, args.scheme, levels, stats)
        else:
            refactored = decompose(grid, levels=levels, tile=tile, budget=config.tile_budget)

    written = write_refactored(refactored, args.output)
    result = {
        "action": "decomposed",
        "output": args.output,
        "bytes": written,
        "refactored": refactored.to_dict(),
        "message": (
            f"Decomposed {refactored.shape} into {refactored.levels + 1} classes "
            f"({written} bytes) -> {args.output}"
        ),
    }
    if args.stats and stats is not None:
        result["communication"] = stats.to_dict()
        result["message"] += "\n" + _stats_message(stats)
    _output_result(args, result)


def recompose_cmd(args):
    refactored, bytes_read = read_refactored(args.input, classes=args.classes)
    reference = None
    if args.reference:
        reference = read_raw(
            args.reference, refactored.shape, refactored.precision, time_axis=refactored.time_axis
        )
    grid, report = recompose(refactored, args.classes, reference=reference)
    write_raw(grid, args.output)

    message = (
        f"Recomposed from classes 0..{report.classes_used} ({bytes_read} bytes read) -> {args.output}"
    )
    if report.reference != "none":
        message += f"\n  max abs error {report.max_abs:g} (relative {report.rel_linf:g})"
    _output_result(
        args,
        {
            "action": "recomposed",
            "output": args.output,
            "bytes_read": bytes_read,
            "report": report.to_dict(),
            "message": message,
        },
    )


def info(args):
    with open(args.input, "rb") as f:
        header = RefactorFileReader(f).header
    hierarchy = GridHierarchy(header.shape, header.coords, header.levels)
    accounting = pass_accounting(hierarchy)
    accumulated = accumulated_passes(accounting, hierarchy)

    result = header.to_dict()
    result["action"] = "info"
    result["class_sizes"] = [hierarchy.class_size(l) for l in range(header.levels + 1)]
    result["passes"] = {
        "per_level": {str(l): phases for l, phases in accounting.items()},
        "level_totals": {str(l): sum(p.values()) for l, p in accounting.items()},
        "accumulated": accumulated,
    }

    lines = [
        f"{args.input}: {header.precision.value} {'x'.join(str(n) for n in header.shape)}, "
        f"{header.levels} levels, {header.size} header bytes"
    ]
    for l, size in enumerate(result["class_sizes"]):
        lines.append(f"  class {l}: {size} values, {header.class_lengths[l]} bytes")
    for l, phases in accounting.items():
        lines.append(f"  level {l}: {sum(phases.values()):.3f} passes")
    lines.append(f"  accumulated: {accumulated:.3f} passes over the input")
    result["message"] = "\n".join(lines)
    _output_result(args, result)


# Largest round-trip error, relative to the data range, still counted as lossless.
LOSSLESS_TOLERANCE = {Precision.F64: 1e-12, Precision.F32: 1e-5}


def _tolerance(precision, data_range):
    return LOSSLESS_TOLERANCE[Precision(precision)] * data_range


def verify(args):
    refactored, _ = read_refactored(args.input)
    grid, report = recompose(refactored)
    if args.reference:
        reference = read_raw(
            args.reference, refactored.shape, refactored.precision, time_axis=refactored.time_axis
        )
        diff = np.abs(grid.values.astype(np.float64) - reference.values.astype(np.float64))
        data_range = reference.data_range
        check = "reference"
    else:
        again = decompose(grid, levels=refactored.levels)
        diff = np.concatenate(
            [
                np.abs(a.astype(np.float64) - b.astype(np.float64))
                for a, b in zip(again.classes, refactored.classes)
            ]
        )
        data_range = grid.data_range
        check = "re-decomposition"
    max_abs = float(np.max(diff))
    tolerance = _tolerance(refactored.precision, data_range)
    if max_abs > tolerance:
        raise VerificationFailed(max_abs, tolerance)

    _output_result(
        args,
        {
            "action": "verified",
            "check": check,
            "max_abs": max_abs,
            "tolerance": tolerance,
            "report": report.to_dict(),
            "message": f"OK: max abs {max_abs:g} <= tolerance {tolerance:g} ({check})",
        },
    )


def _kernel_runner(kernel, grid, hierarchy, budget):
    level = hierarchy.levels
    values = np.asarray(grid.values, dtype=np.float64)
    if kernel is Kernel.GPK:
        operand = values
    else:
        operand = compute_coefficients(values, hierarchy, level)
    if kernel is Kernel.IPK:
        operand = masstrans_apply(operand, hierarchy, level, 0)

    def run(cfg: TileConfig):
        plan = select_tiling(grid.ndims, grid.shape, budget, extents=cfg.as_tuple())
        if kernel is Kernel.GPK:
            compute_coefficients(operand, hierarchy, level, plan=plan)
        elif kernel is Kernel.LPK:
            masstrans_apply(operand, hierarchy, level, 0, plan=plan)
        else:
            solve_correction(operand, hierarchy, level, 0, plan=plan)

    return run


def _copy_bandwidth(nbytes=1 << 24):
    src = np.ones(nbytes // 8)
    dst = np.empty_like(src)
    np.copyto(dst, src)
    start = time.perf_counter()
    np.copyto(dst, src)
    elapsed = max(time.perf_counter() - start, 1e-9)
    return 2 * src.nbytes / elapsed


def bench(args):
    config = args.config
    precision = Precision(args.dtype)
    dev = DeviceModel.for_precision(
        precision,
        transaction_bytes=config.device.transaction_bytes,
        peak_bandwidth=config.device.peak_bandwidth,
        ghost=config.device.ghost,
    )
    candidates = config.candidates

    rankings = {}
    lines = [f"Model ranks for N={args.model_size}, {precision.value}, S={dev.transaction_bytes}:"]
    lines.append("  " + " ".join(f"{str(c):>9}" for c in candidates))
    for kernel in Kernel:
        ranking = rank_configs(kernel, candidates, args.model_size, dev)
        ranks = ranks_in_order(ranking, candidates)
        rankings[kernel.value] = {"ranks": list(ranks), "ranking": ranking.to_dict()["ranking"]}
        lines.append(f"{kernel.value:>3} " + " ".join(f"{r:>9}" for r in ranks))

    shape = (args.size,) * 3
    grid = reaction_diffusion(shape, precision=precision)
    counter = PassCounter(build_hierarchy(grid))
    start = time.perf_counter()
    refactored = decompose(grid, tile=config.tile, budget=config.tile_budget, counter=counter)
    decompose_time = time.perf_counter() - start
    start = time.perf_counter()
    recompose(refactored)
    recompose_time = time.perf_counter() - start

    passes = counter.to_dict()
    bandwidth = _copy_bandwidth()
    achievable = bandwidth / passes["accumulated"] / precision.itemsize
    timings = {
        "shape": list(shape),
        "decompose_seconds": decompose_time,
        "recompose_seconds": recompose_time,
        "accumulated_passes": passes["accumulated"],
        "copy_bandwidth": bandwidth,
        "achievable_elements_per_second": achievable,
    }
    lines.append(
        f"Decompose {args.size}^3: {decompose_time:.3f}s, recompose {recompose_time:.3f}s, "
        f"{passes['accumulated']:.2f} accumulated passes, "
        f"achievable {achievable / 1e6:.1f} M elements/s"
    )

    result = {"action": "bench", "model": rankings, "timings": timings}
    if args.autotune:
        cache = TuningCache()
        hierarchy = build_hierarchy(grid)
        tuned = {}
        for kernel in Kernel:
            measure = timed(_kernel_runner(kernel, grid, hierarchy, config.tile_budget))
            outcome = autotune(
                kernel,
                candidates,
                args.model_size,
                dev,
                measure=measure,
                cache=cache,
                shape=(args.model_size,) * 3,
            )
            tuned[kernel.value] = outcome.to_dict()
            lines.append(f"Tuned {kernel.value}: {outcome.config} ({outcome.status})")
        result["autotune"] = tuned
        result["cache"] = {"path": cache.path, "entries": cache.entries()}
        lines.append(f"Tuning cache: {cache.path}")

    result["message"] = "\n".join(lines)
    _output_result(args, result)


def compress_cmd(args):
    config = args.config
    grid = _read_input(args)
    eb = args.eb * grid.data_range if args.relative else args.eb
    codec = args.codec or config.codec
    data, report = compress_with_report(grid, eb, codec=codec, levels=_levels_from_args(args, config))
    with open(args.output, "wb") as f:
        f.write(data)
    _output_result(
        args,
        {
            "action": "compressed",
            "output": args.output,
            "report": report.to_dict(),
            "message": (
                f"Compressed {grid.shape} to {report.compressed_bytes} bytes "
                f"(ratio {report.ratio:.2f}, max abs error {report.max_abs:g} <= {eb:g})"
            ),
        },
    )


def decompress_cmd(args):
    with open(args.input, "rb") as f:
        data = f.read()
    grid, header = decompress_with_header(data)
    write_raw(grid, args.output)
    result = {
        "action": "decompressed",
        "output": args.output,
        "header": header.to_dict(),
        "max_abs_error": header.achieved,
        "message": (
            f"Decompressed {grid.shape} -> {args.output} "
            f"(max abs error {header.achieved:g} <= {header.eb:g})"
        ),
    }
    if args.reference:
        reference = read_raw(args.reference, grid.shape, grid.precision)
        measured = float(
            np.max(np.abs(grid.values.astype(np.float64) - reference.values.astype(np.float64)))
        )
        result["measured_error"] = measured
        result["message"] += f"\n  measured against reference: {measured:g}"
    _output_result(args, result)


def _add_json_flag(subparser):
    subparser.add_argument(
        "-j", "--json", action="store_true", help="Output in JSON format"
    )


def _add_raw_flags(subparser):
    subparser.add_argument("--shape", required=True, help="Grid shape, e.g. 65x65x65")
    subparser.add_argument(
        "--dtype", choices=[p.value for p in Precision], default="f64", help="Element type"
    )
    subparser.add_argument(
        "--coords", help="Coordinate sidecar file (f64 coordinates of every dimension)"
    )


def _add_levels_flag(subparser):
    subparser.add_argument("--levels", type=int, help="Cap on the number of levels")


def setup_parser():
    parser = argparse.ArgumentParser(
        prog="mgrefactor",
        description="Multigrid hierarchical refactoring of structured grid data",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="More logging (-vv for debug)"
    )
    parser.add_argument("--config", dest="config_path", help="Configuration file")
    parser.set_defaults(func=None)
    subparsers = parser.add_subparsers(help="Command to execute")

    subparser = subparsers.add_parser("decompose", help="Refactor a raw grid into classes")
    subparser.add_argument("input", help="Raw input file")
    subparser.add_argument("output", help="Refactored output file")
    _add_raw_flags(subparser)
    _add_levels_flag(subparser)
    subparser.add_argument("--workers", type=int, default=1, help="Cooperating workers")
    subparser.add_argument(
        "--scheme",
        choices=[s.value for s in PartitionScheme],
        default=PartitionScheme.BLOCK.value,
        help="Partition scheme for cooperative runs",
    )
    subparser.add_argument(
        "--group-size", type=int, default=1, help="Workers per group with --independent"
    )
    subparser.add_argument(
        "--time-steps", type=int, default=1, help="Treat the input as T consecutive snapshots"
    )
    subparser.add_argument(
        "--independent",
        action="store_true",
        help="Refactor snapshots separately (writes <output>.<t>)",
    )
    subparser.add_argument("--stats", action="store_true", help="Report communication")
    subparser.add_argument("--tile", help="Tile extents, e.g. 32x8x8")
    _add_json_flag(subparser)
    subparser.set_defaults(func=decompose_cmd)

    subparser = subparsers.add_parser("recompose", help="Reconstruct from a class prefix")
    subparser.add_argument("input", help="Refactored file")
    subparser.add_argument("output", help="Raw output file")
    subparser.add_argument("--classes", type=int, help="Use classes 0..k (default: all)")
    subparser.add_argument("--reference", help="Raw original to measure the error against")
    _add_json_flag(subparser)
    subparser.set_defaults(func=recompose_cmd)

    subparser = subparsers.add_parser("info", help="Show header, class sizes and passes")
    subparser.add_argument("input", help="Refactored file")
    _add_json_flag(subparser)
    subparser.set_defaults(func=info)

    subparser = subparsers.add_parser("verify", help="Check a refactored file round-trips")
    subparser.add_argument("input", help="Refactored file")
    subparser.add_argument("--reference", help="Raw original to compare with")
    _add_json_flag(subparser)
    subparser.set_defaults(func=verify)

    subparser = subparsers.add_parser("bench", help="Kernel timings and model rankings")
    subparser.add_argument("--autotune", action="store_true", help="Tune and cache tiles")
    subparser.add_argument(
        "--model-size", type=int, default=257, help="N used by the performance models"
    )
    subparser.add_argument("--size", type=int, default=33, help="N of the timed grid")
    subparser.add_argument(
        "--dtype", choices=[p.value for p in Precision], default="f64", help="Element type"
    )
    _add_json_flag(subparser)
    subparser.set_defaults(func=bench)

    subparser = subparsers.add_parser("compress", help="Error-bounded lossy compression")
    subparser.add_argument("input", help="Raw input file")
    subparser.add_argument("output", help="Compressed output file")
    _add_raw_flags(subparser)
    _add_levels_flag(subparser)
    subparser.add_argument("--eb", type=float, required=True, help="Absolute error bound")
    subparser.add_argument(
        "--relative", action="store_true", help="Scale --eb by the data range"
    )
    subparser.add_argument("--codec", help="Lossless codec (zlib, null)")
    _add_json_flag(subparser)
    subparser.set_defaults(func=compress_cmd)

    subparser = subparsers.add_parser("decompress", help="Decompress to a raw file")
    subparser.add_argument("input", help="Compressed file")
    subparser.add_argument("output", help="Raw output file")
    subparser.add_argument("--reference", help="Raw original to measure the error against")
    _add_json_flag(subparser)
    subparser.set_defaults(func=decompress_cmd)

    return parser


def _configure_logging(verbose):
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose > 1:
        level = logging.DEBUG
    logging.basicConfig(stream=sys.stderr, level=level, format=LOG_FORMAT)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    json_mode = _is_json_mode(argv)
    parser = setup_parser()
    namespace = parser.parse_args(argv)
    _configure_logging(namespace.verbose)

    try:
        namespace.config = load_config(namespace.config_path)
        if namespace.func is None:
            parser.print_usage()
            return 0
        logger.debug(f"Running {namespace.func.__name__} with {argv}")
        namespace.func(namespace)
        return 0
    except InvalidGrid as e:
        _output_error("invalid_grid", e.message, json_mode)
    except InvalidLevel as e:
        _output_error("invalid_level", e.message, json_mode)
    except ShapeError as e:
        _output_error("shape_error", e.message, json_mode)
    except InvalidTileConfig as e:
        _output_error("invalid_tile", e.message, json_mode)
    except InvalidFusion as e:
        _output_error("invalid_fusion", e.message, json_mode)
    except SingularSystem as e:
        _output_error("singular_system", e.message, json_mode)
    except CorruptFile as e:
        _output_error("corrupt_file", e.message, json_mode)
    except CorruptContainer as e:
        _output_error("corrupt_file", e.message, json_mode)
    except MissingClass as e:
        _output_error("missing_class", e.message, json_mode)
    except InvalidBound as e:
        _output_error("invalid_bound", e.message, json_mode)
    except BoundNotMet as e:
        _output_error("bound_not_met", e.message, json_mode)
    except UnknownCodec as e:
        _output_error("unknown_codec", e.message, json_mode)
    except TooManyWorkers as e:
        _output_error("too_many_workers", e.message, json_mode)
    except WorkerFailure as e:
        _output_error("worker_failure", e.message, json_mode)
    except InvalidConfig as e:
        _output_error("invalid_config", e.message, json_mode)
    except RawInputError as e:
        _output_error("raw_input", e.message, json_mode)
    except VerificationFailed as e:
        _output_error("verify_failed", e.message, json_mode)
    except FileNotFoundError as e:
        _output_error("file_not_found", str(e), json_mode)
    except OSError as e:
        _output_error("io_error", str(e), json_mode)
    except ValueError as e:
        _output_error("value_error", f"Error: {e}", json_mode)
    finally:
        sys.stdout.flush()
        sys.stderr.flush()
    return 1


if __name__ == "__main__":
    sys.exit(main())
