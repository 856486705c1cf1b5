"""Command-line entry point.

Exit codes
  0   success
  2   missing input (file, pool, manifest, checkpoint) or a checkpoint/manifest mismatch
  3   training aborted on non-finite values
  4   predictions do not cover the evaluated split
  64  usage or configuration error
  1   any other failure
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .autodiff.checkpoint import FORMAT_VERSION
from .errors import (CheckpointError, CompSpoofError, ConfigError, CoverageError, GeometryMismatch,
                     InsufficientPool, NumericError)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MISSING = 2
EXIT_NUMERIC = 3
EXIT_COVERAGE = 4
EXIT_USAGE = 64

log = logging.getLogger("compspoof")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _out_dir(args, default=None) -> Path:
    out = args.out or default
    if out is None:
        raise UsageError("--out is required for this command")
    return Path(out)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_forge(args) -> int:
    from .forge import (DEFAULT_RATIOS, ForgeConfig, PoolSpec, build_corpus, stratified_split,
                        validate_corpus, write_manifest)

    out = _out_dir(args)
    pools = PoolSpec.from_file(args.pools)
    pools.check()
    cfg = ForgeConfig(sample_rate=args.sample_rate, min_duration=args.min_duration, max_duration=args.max_duration,
                      snr_min=args.snr_min, snr_max=args.snr_max, keep_stems=not args.no_stems)
    ratios = tuple(args.ratios) if args.ratios else DEFAULT_RATIOS
    seed = args.seed or 0
    entries = build_corpus(pools, args.n_per_class, seed, out, cfg, jobs=args.jobs or os.cpu_count() or 1)
    entries = stratified_split(entries, ratios, seed)
    write_manifest(out / "manifest.jsonl", entries)
    report = validate_corpus(entries, out, cfg, ratios)
    print(f"forged {len(entries)} entries into {out}")
    for split in ("train", "dev", "eval"):
        print(f"  {split:<5} {sum(e.split == split for e in entries)}")
    if report.snr_checked:
        print(f"  max SNR error {report.max_snr_error_db:.3g} dB over {report.snr_checked} mixtures")
    if not report.ok:
        for v in report.violations[:10]:
            print(f"  violation {v.kind}: {v.utt_id} {v.detail}")
        return EXIT_FAILURE
    return EXIT_OK


def _train_config(args):
    from .models import TrainConfig

    overrides = dict(seed=args.seed, epochs_total=args.epochs, system=args.system)
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig.from_text("", **overrides)


def cmd_train(args) -> int:
    from .forge import read_manifest
    from .training import NumericAbort, train

    manifest = _require_file(args.manifest, "manifest")
    config = _train_config(args)
    out = _out_dir(args)
    entries = read_manifest(manifest)
    try:
        result = train(entries, manifest.parent, config, out, resume=args.resume, on_epoch=print)
    except NumericAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    (out / "train_config.txt").write_text(config.to_text())
    print(f"best epoch {result.best_epoch} (dev macro-F1 {result.best_dev_f1:.4f}); checkpoints in {out}")
    return EXIT_OK


def _load_system(path, need_separator: bool = False):
    from .models import CompSpoofSystem

    system, _ = CompSpoofSystem.load(_require_file(path, "checkpoint"))
    if need_separator and system.kind != "separation":
        raise GeometryMismatch(f"{path}: checkpoint holds a baseline detector, not a separator")
    return system


def cmd_separate(args) -> int:
    from . import dsp
    from .separation import separate
    from .wavio import read_wav, write_wav

    system = _load_system(args.checkpoint, need_separator=True)
    src = _require_file(args.input, "input")
    mix = dsp.resample(read_wav(src), system.cfg.sample_rate)
    if len(mix) < system.cfg.win_len:
        raise UsageError(f"{src}: shorter than one analysis window")
    out = _out_dir(args, src.parent)
    out.mkdir(parents=True, exist_ok=True)
    result = separate(mix, system.separator)
    write_wav(out / "speech.wav", result.speech)
    write_wav(out / "environment.wav", result.environment)
    print(f"wrote {out / 'speech.wav'} and {out / 'environment.wav'} (alpha {result.alpha:.4g})")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .forge import read_manifest
    from .inference import entries_for, load_entry_waves, predict_many, write_predictions

    system = _load_system(args.checkpoint)
    manifest = _require_file(args.manifest, "manifest")
    entries = entries_for(read_manifest(manifest), None if args.split == "all" else args.split)
    missing = [e.path for e in entries if not (manifest.parent / e.path).is_file()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} manifest audio files are missing, e.g. {missing[0]}")
    results = predict_many(system, load_entry_waves(entries, manifest.parent))
    out = Path(args.predictions) if args.predictions else _out_dir(args) / "predictions.jsonl"
    write_predictions(out, results, with_chunks=args.chunks)
    print(f"wrote {len(results)} predictions to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .forge import read_manifest
    from .inference import evaluate, read_predictions

    preds = read_predictions(_require_file(args.predictions, "predictions"))
    entries = read_manifest(_require_file(args.manifest, "manifest"))
    report = evaluate(preds, entries, None if args.split == "all" else args.split)
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "report.txt").write_text(report.table() + "\n")
    return EXIT_OK


def cmd_toy(args) -> int:
    from .toy import make_toy_pools

    out = _out_dir(args)
    make_toy_pools(out, args.n, args.sample_rate, args.duration, args.seed or 0)
    print(f"wrote toy pools and {out / 'pools.cfg'}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import ToyExperimentConfig, run_toy_experiment

    out = _out_dir(args)
    cfg = ToyExperimentConfig(seeds=tuple(args.seeds))
    result = run_toy_experiment(out, cfg)
    (out / "results.json").write_text(result.to_json() + "\n")
    for system in cfg.systems:
        scores = " ".join(f"{x:.4f}" for x in result.scores(system))
        print(f"{system:<9} eval macro-F1 {scores}  mean {result.mean(system):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_globals(p, defaults: bool) -> None:
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", default=d(None), help="key=value training config file")
    p.add_argument("--seed", type=int, default=d(None), help="seed for all randomness (default 0)")
    p.add_argument("--out", default=d(None), help="output directory")
    p.add_argument("--jobs", type=_positive_int, default=d(None), help="worker threads for forge")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="compspoof", description="Component-level audio spoofing toolkit.")
    p.add_argument("--version", action="version",
                   version=f"compspoof {__version__} (checkpoint format {FORMAT_VERSION})")
    _add_globals(p, defaults=True)
    # the same flags are accepted after the subcommand name too
    common = _Parser(add_help=False)
    _add_globals(common, defaults=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    f = sub.add_parser("forge", help="build a corpus and manifest from source pools")
    f.add_argument("--pools", required=True, help="pool config (name=directory lines)")
    f.add_argument("--n-per-class", type=_positive_int, required=True)
    f.add_argument("--snr-min", type=float, default=0.0)
    f.add_argument("--snr-max", type=float, default=10.0)
    f.add_argument("--sample-rate", type=_positive_int, default=16000)
    f.add_argument("--min-duration", type=float, default=5.0)
    f.add_argument("--max-duration", type=float, default=21.0)
    f.add_argument("--ratios", type=float, nargs=3, metavar=("TRAIN", "DEV", "EVAL"))
    f.add_argument("--no-stems", action="store_true", help="do not keep component stems")
    f.set_defaults(func=cmd_forge)

    t = sub.add_parser("train", help="train a system on a forged manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--epochs", type=_positive_int, default=None, help="override epochs_total")
    t.add_argument("--system", choices=("sef_jl", "sef", "baseline"), default=None)
    t.add_argument("--resume", action="store_true", help="continue from the newest epoch checkpoint in --out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="split one recording into speech and environment")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("input")
    s.set_defaults(func=cmd_separate)

    i = sub.add_parser("infer", help="predict file-level classes for a manifest split")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--manifest", required=True)
    i.add_argument("--split", default="eval", choices=("train", "dev", "eval", "all"))
    i.add_argument("--predictions", help="output path (default OUT/predictions.jsonl)")
    i.add_argument("--chunks", action="store_true", help="include per-chunk detail")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against a manifest split")
    e.add_argument("--predictions", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="eval", choices=("train", "dev", "eval", "all"))
    e.set_defaults(func=cmd_eval)

    y = sub.add_parser("toy-pools", help="write synthetic source pools")
    y.add_argument("--n", type=_positive_int, default=30)
    y.add_argument("--sample-rate", type=_positive_int, default=8000)
    y.add_argument("--duration", type=float, default=0.75)
    y.set_defaults(func=cmd_toy)

    x = sub.add_parser("toy-experiment", help="baseline vs separation systems on toy corpora")
    x.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .forge import MissingPool

    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"compspoof: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, MissingPool, InsufficientPool, GeometryMismatch, CheckpointError) as exc:
        print(f"compspoof: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"compspoof: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CoverageError as exc:
        print(f"compspoof: {exc}", file=sys.stderr)
        return EXIT_COVERAGE
    except CompSpoofError as exc:
        print(f"compspoof: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
