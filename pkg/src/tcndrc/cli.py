"""Command-line entry point: ``tcndrc <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, WavFormatError, read_wav, write_wav
from .device import DatasetManifest, generate_dataset, subset
from .metrics import evaluate
from .model import (
    PRESETS,
    CheckpointError,
    ControlParams,
    TcnConfig,
    build_model,
    load_checkpoint,
    preset,
    receptive_field,
    save_checkpoint,
)
from .streaming import POWER_OF_TWO_FRAMES, StreamState, benchmark, write_bench_csv
from .training import LossConfig, TrainConfig, train, write_train_log

PRESET_HELP = "{" + "|".join(sorted(PRESETS)) + "}[-causal|-noncausal]"


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {text}")
    return value


def _preset(text: str) -> TcnConfig:
    try:
        return preset(text)
    except KeyError:
        raise argparse.ArgumentTypeError(
            f"unknown preset {text!r}; available presets: {', '.join(sorted(PRESETS))} "
            "with optional -causal or -noncausal suffix"
        ) from None


def _frames(text: str) -> list[int]:
    """``32..65536`` (every power of two in range) or a comma-separated list."""
    if ".." in text:
        lo, hi = (int(v) for v in text.split("..", 1))
        sizes = [s for s in POWER_OF_TWO_FRAMES + tuple(2 ** k for k in range(0, 5))
                 if lo <= s <= hi]
        sizes = sorted(set(sizes))
    else:
        sizes = [int(v) for v in text.split(",") if v]
    if not sizes or any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError(f"no valid frame sizes in {text!r}")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tcndrc",
        description="Efficient causal TCNs for dynamic range compression modeling.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a paired dataset over the 40-configuration grid")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seconds-per-config", type=_positive_float, required=True,
                   help="seconds of audio per parameter configuration")
    p.add_argument("--files-per-config", type=_positive_int, default=10,
                   help="files per configuration, split 80/10/10 (default: 10)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a TCN preset on a dataset manifest")
    p.add_argument("--data", type=Path, required=True, help="manifest.tsv")
    p.add_argument("--preset", type=_preset, default=preset("tcn300-causal"), help=PRESET_HELP)
    p.add_argument("--out", type=Path, default=Path("run"), help="directory for checkpoint and log")
    p.add_argument("--epochs", type=_positive_int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=_positive_int, default=TrainConfig.batch_size)
    p.add_argument("--input-length", type=_positive_int, default=TrainConfig.input_length)
    p.add_argument("--lr", type=_positive_float, default=TrainConfig.lr)
    p.add_argument("--patience", type=_positive_int, default=TrainConfig.plateau_patience)
    p.add_argument("--alpha", type=float, default=1.0, help="weight of the STFT loss term")
    p.add_argument("--subset", type=_fraction, default=1.0,
                   help="fraction of training audio per configuration (default: 1.0)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="compute MAE, STFT and LUFS error on a split")
    p.add_argument("--model", type=Path, required=True, help="checkpoint file")
    p.add_argument("--data", type=Path, required=True, help="manifest.tsv")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", type=Path, default=None, help="metrics CSV (default: stdout)")

    p = sub.add_parser("process", help="run a WAV file through a trained model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--switch", choices=("compress", "limit"), default="compress")
    p.add_argument("--peak-reduction", type=_unit_interval, default=0.5)
    p.add_argument("--frame-size", type=_positive_int, default=2048)

    p = sub.add_parser("rf", help="print the receptive field of a configuration")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", type=_preset, help=PRESET_HELP)
    group.add_argument("--k", type=_positive_int, help="kernel size")
    p.add_argument("--n", type=_positive_int, help="number of layers")
    p.add_argument("--d", type=_positive_int, help="dilation growth")
    p.add_argument("--sample-rate", type=_positive_int, default=44100)

    p = sub.add_parser("bench", help="measure real-time factor per frame size")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--model", type=Path, help="checkpoint file")
    source.add_argument("--preset", type=_preset, help=f"untrained {PRESET_HELP}")
    p.add_argument("--frames", type=_frames, default=list(POWER_OF_TWO_FRAMES),
                   help="frame sizes, e.g. 32..65536 or 256,2048 (default: 32..65536)")
    p.add_argument("--seconds-per-point", type=_positive_float, default=1.0)
    p.add_argument("--sample-rate", type=_positive_int, default=44100)
    p.add_argument("--out", type=Path, default=None, help="benchmark CSV (default: stdout)")
    return parser


def cmd_gen_data(args) -> int:
    manifest = generate_dataset(args.out, seed=args.seed, seconds_per_config=args.seconds_per_config,
                                files_per_config=args.files_per_config)
    configs = len(manifest.configs())
    minutes = sum(manifest.duration_per_config().values()) / 60.0
    print(args.out / "manifest.tsv")
    print(f"{configs} configurations, {len(manifest.entries)} files, {minutes:.2f} min of paired audio")
    return 0


def cmd_train(args) -> int:
    if not args.data.exists():
        raise FileNotFoundError(f"manifest not found: {args.data}")
    manifest = DatasetManifest.read(args.data)
    if args.subset < 1.0:
        manifest = subset(manifest, args.subset, seed=args.seed)
    model = build_model(args.preset, seed=args.seed)
    cfg = TrainConfig(batch_size=args.batch_size, input_length=args.input_length, epochs=args.epochs,
                      lr=args.lr, plateau_patience=args.patience, seed=args.seed)
    result = train(model, manifest, cfg, LossConfig(alpha=args.alpha), out_dir=args.out)
    save_checkpoint(result.model, args.out / "best.ckpt")
    write_train_log(result.history, args.out / "train_log.csv")
    print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.5f}")
    print(args.out / "best.ckpt")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    manifest = DatasetManifest.read(args.data)
    result = evaluate(model, manifest.split(args.split))
    if args.out is None:
        result.write_csv(sys.stdout)
    else:
        result.write_csv(args.out)
        lufs = "n/a" if result.lufs_error is None else f"{result.lufs_error:.4f}"
        print(f"mae {result.mae:.6g}  stft {result.stft:.4f}  lufs {lufs}  "
              f"({len(result.rows)} files, {result.loudness_excluded} without loudness)")
    return 0


def cmd_process(args) -> int:
    model = load_checkpoint(args.model)
    buf = read_wav(args.input)
    phi = ControlParams.from_names(args.switch, args.peak_reduction)
    state = StreamState(model, phi, args.frame_size)
    out = state.process(buf.samples).astype(np.float64)
    write_wav(AudioBuffer(out, buf.sample_rate), args.output, "float32")
    return 0


def cmd_rf(args, parser) -> int:
    if args.preset is not None:
        config = args.preset
    else:
        if args.n is None or args.d is None:
            parser.error("rf needs --preset or all of --k, --n and --d")
        config = TcnConfig(kernel_size=args.k, num_layers=args.n, dilation_growth=args.d)
    rf = receptive_field(config, args.sample_rate)
    print(f"{rf.samples} samples, {rf.milliseconds:.1f} ms @ {args.sample_rate / 1000:g} kHz")
    return 0


def cmd_bench(args) -> int:
    model = load_checkpoint(args.model) if args.model is not None else build_model(args.preset)
    reports = benchmark(model, args.frames, args.seconds_per_point, args.sample_rate)
    write_bench_csv(reports, sys.stdout if args.out is None else args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "process": cmd_process,
        "bench": cmd_bench,
    }
    try:
        if args.command == "rf":
            return cmd_rf(args, parser)
        return handlers[args.command](args)
    except (OSError, ValueError, CheckpointError, WavFormatError) as exc:
        print(f"tcndrc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
