"""Command-line surface tying the pipeline together.

Subcommands: synthesize-data, train, enhance, evaluate, benchmark.
Exit codes: 0 success, 1 usage, 2 data/configuration error, 3 numeric
failure. Failures print a single JSON line to stderr. The resolved
configuration of every run is archived into its output directory.
"""

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import datapipe, evalkit
from .detector import load_toy_detector, train_toy_detector
from .errors import CheckpointError, ConfigurationError, NumericError
from .nets import INPUT_SIZE, enhance_image, load_checkpoint
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse defaults to exit code 2; usage problems are exit 1 here
        self.print_usage(sys.stderr)
        sys.stderr.write(_error_line("usage", message) + "\n")
        raise SystemExit(EXIT_USAGE)


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"error": kind, "message": str(message)})


def _device(args) -> str:
    if getattr(args, "device", None):
        return args.device
    return os.environ.get("DETGAN_DEVICE", "cpu")


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigurationError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def _load_train_config(args) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    merged = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        with path.open() as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")
        unknown = sorted(set(loaded) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(loaded)
    for item in args.set or []:
        key, value = _parse_override(item)
        if key not in known:
            raise ConfigurationError(f"unknown config key: {key}")
        merged[key] = value
    # explicit command-line flags win over both config file and --set
    for key in ("mode", "epochs", "batch_size", "seed", "width_multiplier", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    merged.setdefault("device", _device(args))
    return TrainConfig(**merged)


def _archive_config(out: Path, payload: dict, name: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with (out / name).open("w") as fh:
        yaml.safe_dump(payload, fh, sort_keys=True)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synthesize(args) -> int:
    out = Path(args.out)
    targets = (args.min_targets, args.max_targets)
    samples = datapipe.synthesize_world(
        args.count, args.seed, size=args.size, targets_per_image=targets
    )
    if args.detector:
        det = load_toy_detector(args.detector)
        kept = datapipe.filter_by_detection(samples, det, threshold=args.threshold)
        for line in kept.warnings:
            print(f"warning: {line}", file=sys.stderr)
        print(f"detector filter kept {kept.kept} / dropped {len(kept.dropped)}")
        samples = kept.accepted
    multi = [s for s in samples if len(s.boxes) != 1]
    if multi:
        print(f"skipping {len(multi)} multi-target images (paired corpus is single-target)")
        samples = [s for s in samples if len(s.boxes) == 1]
    pairs, manifest = datapipe.build_paired_corpus(samples, args.seed)
    datapipe.write_corpus(pairs, manifest, out)
    _archive_config(
        out,
        {
            "command": "synthesize-data",
            "count": args.count,
            "seed": args.seed,
            "size": args.size,
            "targets": list(targets),
            "threshold": args.threshold,
        },
        "synthesize_config.yaml",
    )
    print(f"wrote {len(pairs)} paired samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_train_config(args)
    out = Path(args.out)
    corpus = datapipe.load_corpus(args.corpus)
    if args.detector:
        det = load_toy_detector(args.detector)
    else:
        clean = [
            datapipe.WorldSample(p.image_id, p.target, list(p.boxes), p.label) for p in corpus
        ]
        print(f"training reference detector on {len(clean)} clean images ...")
        det = train_toy_detector(clean, epochs=args.detector_epochs, seed=config.seed,
                                 device=config.device)
        det.save(out / "detector.pt")
    _archive_config(out, dataclasses.asdict(config), "train_config.yaml")
    result = train(corpus, None, det, config, out_dir=out, resume_from=args.resume)
    print(f"finished epoch {result.state.epoch}; checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    generator, _, _, _ = load_checkpoint(args.checkpoint, _device(args))
    in_dir = Path(args.input)
    if not in_dir.is_dir():
        raise ConfigurationError(f"input directory not found: {in_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in in_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        print(f"warning: no images found in {in_dir}", file=sys.stderr)
    failures = 0
    for path in files:
        try:
            image = datapipe.read_image(path)
            datapipe.write_image(out / path.name, enhance_image(generator, image, _device(args)))
        except Exception as exc:  # per-file: record and continue
            failures += 1
            print(_error_line("enhance-file", f"{path.name}: {exc}"), file=sys.stderr)
    print(f"enhanced {len(files) - failures} / {len(files)} images into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    det = load_toy_detector(args.detector)
    corpus = datapipe.load_corpus(args.corpus)
    samples = datapipe.distorted_samples(corpus)
    categories = datapipe.categorize_test_set(samples, det, threshold=args.threshold)
    named = {cat.value: items for cat, items in categories.items()}
    if args.checkpoint:
        generator, _, _, _ = load_checkpoint(args.checkpoint, _device(args))
        enhance = lambda img: enhance_image(generator, img, _device(args))  # noqa: E731
        model_name = Path(args.checkpoint).stem
    else:
        enhance = None
        model_name = "identity"
    report = evalkit.evaluate(
        enhance, det, named, score_threshold=args.threshold, model_name=model_name
    )
    print(report.render_table())
    if args.out:
        report.write(args.out)
        _archive_config(
            Path(args.out),
            {"command": "evaluate", "threshold": args.threshold, "model": model_name,
             "corpus": str(args.corpus), "detector": str(args.detector)},
            "evaluate_config.yaml",
        )
    return EXIT_OK


def run_benchmark(generator, batch_size: int = 8, iterations: int = 50, warmup: int = 10,
                  device: str = "cpu", seed: int = 0) -> dict:
    """Measure forward-pass throughput at the fixed 256x256 contract.

    FPS is computed from accumulated per-iteration timings and checked
    against an independent wall clock spanning the same timed region;
    image decode/encode is excluded. Absolute numbers are
    hardware-specific, report-only.
    """
    generator.eval()
    torch.manual_seed(seed)
    x = torch.rand(batch_size, 3, INPUT_SIZE, INPUT_SIZE, device=device) * 2.0 - 1.0
    per_iter = []
    with torch.no_grad():
        for _ in range(warmup):
            generator(x)
        wall_start = time.perf_counter()
        for _ in range(iterations):
            t0 = time.perf_counter()
            generator(x)
            per_iter.append(time.perf_counter() - t0)
        wall_elapsed = time.perf_counter() - wall_start
    images = batch_size * iterations
    fps_samples = [batch_size / t for t in per_iter]
    return {
        "device": str(device),
        "batch_size": batch_size,
        "iterations": iterations,
        "warmup": warmup,
        "fps": images / sum(per_iter),
        "fps_wall_clock": images / wall_elapsed,
        "fps_sd": float(np.std(fps_samples)),
        "latency_ms_per_image": 1000.0 * sum(per_iter) / images,
    }


def cmd_benchmark(args) -> int:
    generator, _, _, _ = load_checkpoint(args.checkpoint, _device(args))
    report = run_benchmark(
        generator,
        batch_size=args.batch_size,
        iterations=args.iterations,
        warmup=args.warmup,
        device=_device(args),
        seed=args.seed,
    )
    line = json.dumps(report, sort_keys=True)
    print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "benchmark.json").write_text(line + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="detgan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--device", default=None, help="overrides DETGAN_DEVICE")

    p = sub.add_parser("synthesize-data", help="build a seeded paired corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--min-targets", type=int, default=1)
    p.add_argument("--max-targets", type=int, default=1)
    p.add_argument("--detector", default=None, help="apply detection filtering with this port")
    p.add_argument("--threshold", type=float, default=0.55)
    p.set_defaults(handler=cmd_synthesize)

    p = sub.add_parser("train", help="run adversarial training on a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="YAML file with TrainConfig keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--mode", choices=["B", "G", "D", "N"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--width-multiplier", dest="width_multiplier", type=float, default=None)
    p.add_argument("--detector", default=None, help="frozen detector weights; trained here if omitted")
    p.add_argument("--detector-epochs", type=int, default=20)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train, seed=None)

    p = sub.add_parser("enhance", help="enhance every image in a directory")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_enhance)

    p = sub.add_parser("evaluate", help="report AP / mean IoU / UIQM per category")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--checkpoint", default=None, help="omit for the pass-through baseline")
    p.add_argument("--threshold", type=float, default=0.55)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("benchmark", help="measure inference throughput")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    # seed every stochastic component up front
    if getattr(args, "seed", None) is not None:
        torch.manual_seed(args.seed)
        np.random.seed(args.seed % (2**32))
    try:
        return args.handler(args)
    except NumericError as exc:
        print(_error_line("numeric", exc), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, CheckpointError, ValueError, OSError) as exc:
        print(_error_line("data", exc), file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
