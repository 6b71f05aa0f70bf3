from __future__ import annotations

import argparse
import contextlib
import ctypes
import ctypes.util
import csv
import logging
from pathlib import Path
import sys
from typing import Iterator, Sequence, TextIO

from .errors import ConfigurationError, SsnetError

logger = logging.getLogger(__name__)

PROCESS_NAME = "ssnet"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _set_process_name(name: str) -> None:
    try:
        libc_path = ctypes.util.find_library("c") or "libc.so.6"
        libc = ctypes.CDLL(libc_path)
        pr_set_name = 15
        encoded = name.encode("utf-8")[:15]
        libc.prctl(pr_set_name, ctypes.c_char_p(encoded), 0, 0, 0)
    except Exception:
        pass


def _size(text: str) -> tuple[int, int]:
    height, sep, width = text.lower().partition("x")
    try:
        if not sep:
            raise ValueError
        return int(height), int(width)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


@contextlib.contextmanager
def _output(path: str | None) -> Iterator[TextIO]:
    if path is None:
        yield sys.stdout
        return
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8", newline="") as stream:
        yield stream


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROCESS_NAME, description="Guided-sampling segmentation network toolkit.")
    parser.add_argument("--verbose", action="store_true", help="log debug messages")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--count", type=int, required=True)
    synth.add_argument("--size", type=_size, default=(64, 64), help="HxW")
    synth.add_argument("--max-shapes", type=int, default=3)
    synth.add_argument("--out", required=True)

    train = commands.add_parser("train", help="train a network on a dataset")
    train.add_argument("--config", help="key=value config file")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True, help="checkpoint path")
    train.add_argument("--metrics", help="per-epoch metrics CSV (default stdout)")

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--t", type=_int_list, default=[30], help="diffusion steps, e.g. 3,5,10,30")
    evaluate.add_argument("--fold-bn", action="store_true")
    evaluate.add_argument("--split", choices=["val", "train", "all"], default="val")
    evaluate.add_argument("--out")

    gradcheck = commands.add_parser("gradcheck", help="finite-difference gradient checks")
    gradcheck.add_argument("--op")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--out")

    bench = commands.add_parser("bench", help="time an operator or the whole pipeline")
    bench.add_argument("--scenario", required=True)
    bench.add_argument("--channels", type=_int_list, default=[19])
    bench.add_argument("--size", type=_size, default=(64, 64))
    bench.add_argument("--reps", type=int, default=50)
    bench.add_argument("--out")

    view = commands.add_parser("view", help="browse a dataset and predictions")
    view.add_argument("--data", required=True)
    view.add_argument("--ckpt")
    return parser


def _run_synth(args: argparse.Namespace) -> int:
    from .data import synth_generate, write_dataset

    height, width = args.size
    dataset = synth_generate(args.seed, args.count, height, width, args.max_shapes)
    write_dataset(dataset, args.out)
    return 0


def _run_train(args: argparse.Namespace) -> int:
    from .config import RunConfig, load_config
    from .data import read_dataset
    from .train import train

    config = load_config(args.config) if args.config else RunConfig()
    dataset = read_dataset(args.data)
    encoder_cfg = config.encoder(dataset.num_classes)
    with _output(args.metrics) as stream:
        result = train(config.train, encoder_cfg, dataset, args.out, stream)
    logger.info("best val miou %.4f at epoch %d", result.best_miou, result.best_epoch)
    return 0


def _run_eval(args: argparse.Namespace) -> int:
    from .data import read_dataset
    from .train import evaluate_checkpoint, write_metrics_csv

    if any(t < 0 for t in args.t):
        raise ConfigurationError(f"diffusion steps must be >= 0, got {args.t}")
    dataset = read_dataset(args.data)
    results = evaluate_checkpoint(args.ckpt, dataset, args.t, fold_bn=args.fold_bn, split=args.split)
    with _output(args.out) as stream:
        write_metrics_csv(results, stream, with_t=True)
    return 0


def _run_gradcheck(args: argparse.Namespace) -> int:
    from .gradcheck import CHECK_HEADER, run_gradchecks

    results = run_gradchecks(args.op, args.seed)
    with _output(args.out) as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(CHECK_HEADER)
        for result in results:
            writer.writerow(result.csv_row())
    return 0 if all(result.passed for result in results) else 1


def _run_bench(args: argparse.Namespace) -> int:
    from .bench import BENCH_HEADER, bench

    height, width = args.size
    reports = [bench(args.scenario, (channels, height, width), args.reps) for channels in args.channels]
    with _output(args.out) as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(BENCH_HEADER)
        for report in reports:
            writer.writerow(report.csv_row())
    return 0


def _run_view(args: argparse.Namespace) -> int:
    from .checkpoint import load_checkpoint
    from .config import TrainConfig
    from .data import read_dataset
    from .viewer import run_viewer

    dataset = read_dataset(args.data)
    encoder = None
    area_threshold = TrainConfig().area_threshold
    if args.ckpt:
        checkpoint = load_checkpoint(args.ckpt)
        encoder = checkpoint.build()
        stored = checkpoint.meta.get("train")
        if isinstance(stored, dict):
            area_threshold = TrainConfig.from_json(stored).area_threshold
    return run_viewer(dataset, encoder, area_threshold)


COMMANDS = {
    "synth": _run_synth,
    "train": _run_train,
    "eval": _run_eval,
    "gradcheck": _run_gradcheck,
    "bench": _run_bench,
    "view": _run_view,
}


def main(argv: Sequence[str] | None = None) -> int:
    _set_process_name(PROCESS_NAME)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (SsnetError, OSError) as exc:
        logger.error("%s", exc)
        return 1
