"""Command-line entry point: ``tilestream run | bench | gen-weights``.

Exit codes: 0 success, 1 usage, 2 configuration or I/O, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_weights, parse_hw_config, parse_network_cfg, random_weights, save_weights
from .errors import ConfigError, TilestreamError
from .pipeline import Frame, build_pipeline, synthetic_frames
from .report import (
    bench_report,
    metrics_row,
    render_bench_figures,
    render_run_figures,
    run_report,
    write_report,
)
from .scheduler import MappingMode

log = logging.getLogger("tilestream")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


CONFIG_DIR = Path(__file__).with_name("configs")


def resolve(path_or_name, suffix):
    """A filesystem path, or the name of a config shipped with the package."""
    p = Path(path_or_name)
    if p.exists():
        return p
    builtin = CONFIG_DIR / f"{path_or_name}{suffix}"
    if builtin.is_file():
        return builtin
    return p


def load_frames(source, net, count, seed):
    if source == "synthetic":
        return list(synthetic_frames(net, count, seed))
    root = Path(source)
    if not root.is_dir():
        raise ConfigError(f"{root}: input must be 'synthetic' or a directory of .npy frames")
    files = sorted(root.glob("*.npy"))[:count]
    if not files:
        raise ConfigError(f"{root}: no .npy frames found")
    frames = []
    for i, f in enumerate(files):
        arr = np.load(f)
        if arr.ndim == 2:
            arr = arr[None]
        if tuple(arr.shape) != net.input_shape:
            raise ConfigError(f"{f}: frame shape {arr.shape} does not match input {net.input_shape}")
        if not net.normalize:
            arr = arr.astype(np.float32)
        frames.append(Frame(i, arr))
    return frames


def _load(args):
    net_path = resolve(args.net, ".cfg")
    hw_path = resolve(args.hw, ".hw_config")
    net = parse_network_cfg(net_path)
    hw = parse_hw_config(hw_path)
    weights = load_weights(args.weights, net) if args.weights else random_weights(net, args.seed)
    return net_path, hw_path, net, hw, weights


def _emit(report, args, figures):
    text = write_report(report, args.report, args.out)
    if args.out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    if not args.no_figures:
        for path in figures(report, args.out):
            log.info("wrote %s", path)
    log.info("wrote %s", args.out)


def cmd_run(args):
    net_path, hw_path, net, hw, weights = _load(args)
    mode = MappingMode.parse(args.mode) if args.mode else hw.mode
    frames = load_frames(args.input, net, args.frames, args.seed)
    with build_pipeline(net, hw, mode, weights, accelerated=not args.cpu_only) as pipe:
        if args.sequential or args.cpu_only:
            outputs, metrics = pipe.run_sequential(frames)
        else:
            outputs, metrics = pipe.run_stream(frames)
    report = run_report(metrics, args.seed, [f.output for f in outputs], net_path, hw_path)
    names = [f"{i}:{layer.kind}" for i, layer in enumerate(net.layers)]
    _emit(report, args, lambda r, out: render_run_figures(r, out, names))
    return EXIT_OK


def cmd_bench(args):
    net_path, hw_path, net, hw, weights = _load(args)
    frames = load_frames(args.input, net, args.frames, args.seed)
    rows = []
    with build_pipeline(net, hw, MappingMode.SF, weights) as pipe:
        outputs, metrics = pipe.run_sequential(frames)
    rows.append(metrics_row(metrics, args.seed, [f.output for f in outputs], mode="seq"))
    for mode in MappingMode:
        with build_pipeline(net, hw, mode, weights) as pipe:
            outputs, metrics = pipe.run_stream(frames)
        rows.append(metrics_row(metrics, args.seed, [f.output for f in outputs]))
    report = bench_report(rows, args.seed, len(frames), net_path, hw_path)
    _emit(report, args, render_bench_figures)
    return EXIT_OK


def cmd_gen_weights(args):
    net = parse_network_cfg(resolve(args.net, ".cfg"))
    save_weights(args.out, net, random_weights(net, args.seed))
    log.info("wrote %d parameters to %s", net.param_count(), args.out)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="tilestream", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, frames_default):
        p.add_argument("--net", required=True, help="network config path or shipped name (mnist, ...)")
        p.add_argument("--hw", default="default", help="hardware config path or shipped name")
        p.add_argument("--weights", help="weights file; random weights from --seed when omitted")
        p.add_argument("--frames", type=int, default=frames_default, help="number of frames")
        p.add_argument("--input", default="synthetic", help="'synthetic' or a directory of .npy frames")
        p.add_argument("--seed", type=int, default=0, help="seed for synthetic frames and weights")
        p.add_argument("--report", choices=("json", "csv"), default="json")
        p.add_argument("--out", help="report file; figures are written next to it")
        p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")

    run = sub.add_parser("run", help="stream frames through the network")
    common(run, 10)
    run.add_argument("--mode", choices=[m.value for m in MappingMode], help="default: the hw config's mode")
    order = run.add_mutually_exclusive_group()
    order.add_argument("--pipeline", action="store_true", help="layer-per-thread pipeline (default)")
    order.add_argument("--sequential", action="store_true", help="one frame and one layer at a time")
    run.add_argument("--cpu-only", action="store_true", help="sequential, CONV on the host")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="compare sequential, SF, SC and WS on one model")
    common(bench, 20)
    bench.set_defaults(func=cmd_bench)

    gen = sub.add_parser("gen-weights", help="write seeded random weights for a network")
    gen.add_argument("--net", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_gen_weights)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "frames", 0) < 0:
        parser.error("--frames must be >= 0")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"tilestream: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"tilestream: I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TilestreamError as exc:
        print(f"tilestream: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
