"""Command-line surface: dataset generation, training, evaluation, decoding,
and the lexicon-radius benchmark.

Exit codes: 0 success, 2 usage or configuration problem, 3 data problem,
4 checkpoint problem. Reports are TSV with a header row; rows append to an
existing report file. Report content carries no timestamps, so a repeated run
with the same flags and seed reproduces it byte for byte (bench timing goes
to a separate sidecar file for the same reason).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import decoding, model as model_mod, synth, training
from .ctc import Alphabet, FrameDistributions
from .errors import (
    AlphabetError,
    CheckpointError,
    ConfigError,
    DataError,
    UsageError,
)
from .tensor import log_softmax_rows

ALPHABET_SHORTHANDS = {
    "digits": "0123456789",
    "alnum": model_mod.DEFAULT_ALPHABET,
}

CONFIG_KEYS = {
    "preset": str, "alphabet": str, "seed": int, "batch_size": int,
    "epochs": int, "max_steps": int, "optimizer": str, "rho": float,
    "eps": float, "lr": float, "mu": float, "delta": int,
    "noise_sigma": float, "max_len": int, "min_len": int,
    "stop_val_acc": float, "eval_every": int, "clip_norm": float,
    "val_subset": int,
}


def _read_run_config(path: str) -> dict:
    """key = value lines; keys mirror the corresponding long flags."""
    values: dict = {}
    text = Path(path).read_text(encoding="utf-8")
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line is not 'key = value': {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = CONFIG_KEYS[key](value)
    return values


def _resolve_alphabet(spec: str) -> str:
    return ALPHABET_SHORTHANDS.get(spec, spec)


def _append_report(path: Path, header: str, rows: Sequence[str]) -> None:
    exists = path.exists()
    with path.open("a", encoding="utf-8", newline="\n") as fh:
        if not exists:
            fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def _load_model(path: str) -> model_mod.Model:
    return model_mod.load(path).model


def _build_parser(defaults: dict) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crnn",
        description="Image-based sequence recognition: train, evaluate, decode.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value defaults file")
        p.add_argument("--seed", type=int,
                       default=defaults.get("seed", 0))

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p_gen)
    p_gen.add_argument("--out", required=True, help="dataset directory")
    p_gen.add_argument("--n", type=int, required=True, help="sample count")
    p_gen.add_argument("--alphabet",
                       default=defaults.get("alphabet", "digits"),
                       help="label symbols, or 'digits' / 'alnum'")
    p_gen.add_argument("--max-len", type=int,
                       default=defaults.get("max_len", 8))
    p_gen.add_argument("--min-len", type=int,
                       default=defaults.get("min_len", 1))
    p_gen.add_argument("--noise-sigma", type=float,
                       default=defaults.get("noise_sigma", 0.03))

    p_train = sub.add_parser("train", help="train a model on a dataset")
    common(p_train)
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--checkpoint", required=True,
                         help="where the best checkpoint is written")
    p_train.add_argument("--preset",
                         choices=sorted(model_mod.PRESETS),
                         default=defaults.get("preset", "standard"))
    p_train.add_argument("--alphabet",
                         default=defaults.get("alphabet", "digits"))
    p_train.add_argument("--optimizer", choices=("adadelta", "momentum"),
                         default=defaults.get("optimizer", "adadelta"))
    p_train.add_argument("--rho", type=float, default=defaults.get("rho", 0.9))
    p_train.add_argument("--eps", type=float,
                         default=defaults.get("eps", 1e-6))
    p_train.add_argument("--lr", type=float, default=defaults.get("lr", 0.01))
    p_train.add_argument("--mu", type=float, default=defaults.get("mu", 0.9))
    p_train.add_argument("--batch-size", type=int,
                         default=defaults.get("batch_size", 16))
    p_train.add_argument("--epochs", type=int,
                         default=defaults.get("epochs", 10))
    p_train.add_argument("--max-steps", type=int,
                         default=defaults.get("max_steps"))
    p_train.add_argument("--clip-norm", type=float,
                         default=defaults.get("clip_norm"))
    p_train.add_argument("--stop-val-acc", type=float,
                         default=defaults.get("stop_val_acc"))
    p_train.add_argument("--eval-every", type=int,
                         default=defaults.get("eval_every"))
    p_train.add_argument("--val-subset", type=int,
                         default=defaults.get("val_subset"))
    p_train.add_argument("--log", help="training log TSV path "
                                       "(default: checkpoint + .log.tsv)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p_eval)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test",
                        choices=("train", "val", "test"))
    p_eval.add_argument("--lexicon", help="word list for constrained decoding")
    p_eval.add_argument("--delta", type=int,
                        default=defaults.get("delta", 3))
    p_eval.add_argument("--report", help="TSV report path (appends)")

    p_dec = sub.add_parser("decode", help="transcribe a single image")
    common(p_dec)
    p_dec.add_argument("--checkpoint", required=True)
    p_dec.add_argument("--image", required=True, help="PGM image path")
    p_dec.add_argument("--lexicon")
    p_dec.add_argument("--delta", type=int, default=defaults.get("delta", 3))

    p_bench = sub.add_parser("bench-delta",
                             help="sweep the lexicon search radius")
    common(p_bench)
    p_bench.add_argument("--dataset", required=True)
    p_bench.add_argument("--checkpoint", required=True)
    p_bench.add_argument("--lexicon", required=True)
    p_bench.add_argument("--split", default="test",
                         choices=("train", "val", "test"))
    p_bench.add_argument("--report", required=True, help="TSV output path")
    p_bench.add_argument("--repeats", type=int, default=5,
                         help="timing repetitions (median reported)")
    p_bench.add_argument("--limit", type=int,
                         help="cap the number of samples")
    return parser


def cmd_gen(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    alphabet = Alphabet(_resolve_alphabet(args.alphabet))
    params = synth.RenderParams(max_label_len=args.max_len,
                                noise_sigma=args.noise_sigma)
    rows = synth.make_dataset(args.out, args.n, alphabet, seed=args.seed,
                              params=params, min_len=args.min_len)
    counts = {s: sum(r.split == s for r in rows) for s in
              ("train", "val", "test")}
    print(f"wrote {len(rows)} samples to {args.out} "
          f"(train={counts['train']} val={counts['val']} test={counts['test']})")
    return 0


def cmd_train(args) -> int:
    alphabet = _resolve_alphabet(args.alphabet)
    config = model_mod.PRESETS[args.preset](alphabet)
    model = model_mod.Model(config, seed=args.seed)
    settings = training.TrainSettings(
        optimizer=args.optimizer, rho=args.rho, eps=args.eps, lr=args.lr,
        mu=args.mu, batch_size=args.batch_size, epochs=args.epochs,
        max_steps=args.max_steps, clip_norm=args.clip_norm, seed=args.seed,
        stop_val_accuracy=args.stop_val_acc,
        eval_every_steps=args.eval_every, val_subset=args.val_subset,
    )
    checkpoint = Path(args.checkpoint)
    log_path = Path(args.log) if args.log else checkpoint.with_suffix(
        checkpoint.suffix + ".log.tsv"
    )
    result = training.train(model, args.dataset, settings,
                            checkpoint_path=checkpoint, log_path=log_path)
    print(f"finished after {result.steps} steps / {result.epochs_run} epochs; "
          f"best val accuracy {result.best_val_accuracy:.4f}; "
          f"checkpoint at {checkpoint}")
    return 0


def _frames_for_sample(scores: np.ndarray, alphabet: Alphabet) -> FrameDistributions:
    return FrameDistributions(np.exp(log_softmax_rows(scores)), alphabet)


def _load_split_checked(dataset: str, split: str):
    rows = synth.read_manifest(dataset)
    if not any(r.split == split for r in rows):
        raise UsageError(f"split {split!r} of {dataset} has no samples")
    return synth.load_split(dataset, split)


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    images, labels = _load_split_checked(args.dataset, args.split)
    metrics = training.evaluate(model, images, labels)
    rows = [
        f"{args.split}\tfree\t{metrics.samples}\t-"
        f"\t{metrics.sequence_accuracy:.6f}\t{metrics.mean_edit_distance:.6f}\t-"
    ]
    print(f"{args.split}: lexicon-free accuracy "
          f"{metrics.sequence_accuracy:.4f}, "
          f"mean edit distance {metrics.mean_edit_distance:.4f} "
          f"({metrics.samples} samples)")

    if args.lexicon:
        lexicon, dropped = decoding.Lexicon.load(args.lexicon, model.alphabet)
        if len(lexicon) == 0:
            raise DataError(f"lexicon {args.lexicon} has no usable entries")
        if dropped:
            print(f"note: dropped {dropped} out-of-alphabet lexicon lines")
        tree = (decoding.bk_build(lexicon)
                if len(lexicon) > decoding.SMALL_LEXICON_LIMIT else None)
        correct = 0
        hits = 0
        dist_sum = 0
        for start in range(0, len(labels), 64):
            chunk = images[start : start + 64]
            scores = model.scores_batch(synth.batch_to_input(chunk))
            for i in range(chunk.shape[0]):
                frames = _frames_for_sample(scores[i], model.alphabet)
                result = decoding.transcribe_with_lexicon(
                    frames, lexicon, tree, args.delta
                )
                label = labels[start + i]
                correct += result.sequence == label
                hits += result.from_lexicon
                dist_sum += decoding.edit_distance(result.sequence, label)
        accuracy = correct / len(labels)
        hit_rate = hits / len(labels)
        rows.append(
            f"{args.split}\tlexicon\t{len(labels)}\t{args.delta}"
            f"\t{accuracy:.6f}\t{dist_sum / len(labels):.6f}\t{hit_rate:.6f}"
        )
        print(f"{args.split}: lexicon accuracy {accuracy:.4f} "
              f"(delta={args.delta}, candidate hit rate {hit_rate:.4f})")

    if args.report:
        _append_report(
            Path(args.report),
            "split\tmode\tsamples\tdelta\tsequence_accuracy"
            "\tmean_edit_distance\tcandidate_hit_rate",
            rows,
        )
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.checkpoint)
    image_path = Path(args.image)
    if not image_path.is_file():
        raise DataError(f"image not found: {image_path}")
    pixels = synth.read_pgm(image_path)
    t0 = time.perf_counter()
    net_input = synth.normalize_input(pixels)
    frames = model.forward(net_input)
    t_forward = time.perf_counter() - t0
    transcription = decoding.best_path_decode(frames)
    print(f"best-path: {transcription}")
    if args.lexicon:
        lexicon, _ = decoding.Lexicon.load(args.lexicon, model.alphabet)
        if len(lexicon) == 0:
            raise DataError(f"lexicon {args.lexicon} has no usable entries")
        t0 = time.perf_counter()
        tree = (decoding.bk_build(lexicon)
                if len(lexicon) > decoding.SMALL_LEXICON_LIMIT else None)
        t_build = time.perf_counter() - t0
        t0 = time.perf_counter()
        result = decoding.transcribe_with_lexicon(frames, lexicon, tree,
                                                  args.delta)
        t_search = time.perf_counter() - t0
        print(f"lexicon: {result.sequence} "
              f"(candidates={result.candidate_count}, "
              f"in_lexicon={result.from_lexicon})")
        print(f"timing: forward {t_forward * 1e3:.1f} ms, "
              f"index build {t_build * 1e3:.1f} ms, "
              f"search+score {t_search * 1e3:.1f} ms")
    else:
        print(f"timing: forward {t_forward * 1e3:.1f} ms")
    return 0


def cmd_bench_delta(args) -> int:
    model = _load_model(args.checkpoint)
    images, labels = _load_split_checked(args.dataset, args.split)
    if args.limit is not None:
        images = images[: args.limit]
        labels = labels[: args.limit]
    lexicon, dropped = decoding.Lexicon.load(args.lexicon, model.alphabet)
    if len(lexicon) == 0:
        raise DataError(f"lexicon {args.lexicon} has no usable entries")
    if dropped:
        print(f"note: dropped {dropped} out-of-alphabet lexicon lines")
    tree = decoding.bk_build(lexicon)

    all_frames = []
    for start in range(0, len(labels), 64):
        scores = model.scores_batch(
            synth.batch_to_input(images[start : start + 64])
        )
        for i in range(scores.shape[0]):
            all_frames.append(_frames_for_sample(scores[i], model.alphabet))

    deterministic_rows = []
    timing_rows = []
    for delta in range(6):
        correct = 0
        hits = 0
        candidates_total = 0
        for frames, label in zip(all_frames, labels):
            result = decoding.lexicon_decode(frames, tree, delta)
            correct += result.sequence == label
            hits += result.from_lexicon
            candidates_total += result.candidate_count
        samples = [time_lexicon_pass(all_frames, tree, delta)
                   for _ in range(args.repeats)]
        per_sample = float(np.median(samples)) / len(labels)
        accuracy = correct / len(labels)
        mean_candidates = candidates_total / len(labels)
        deterministic_rows.append(
            f"{delta}\t{len(labels)}\t{accuracy:.6f}"
            f"\t{mean_candidates:.6f}\t{hits / len(labels):.6f}"
        )
        timing_rows.append(f"{delta}\t{per_sample * 1e3:.3f}")
        print(f"delta={delta}: accuracy={accuracy:.4f} "
              f"mean_candidates={mean_candidates:.1f} "
              f"search={per_sample * 1e3:.2f} ms/sample")

    report = Path(args.report)
    _append_report(report,
                   "delta\tsamples\tsequence_accuracy\tmean_candidates"
                   "\tcandidate_hit_rate",
                   deterministic_rows)
    timing_path = report.with_suffix(report.suffix + ".timing.tsv")
    _append_report(timing_path, "delta\tsearch_ms_per_sample", timing_rows)
    print(f"report: {report} (timing sidecar: {timing_path})")
    return 0


def time_lexicon_pass(all_frames, tree, delta: int) -> float:
    """Wall-clock of one full neighbor-search + rescoring pass."""
    t0 = time.perf_counter()
    for frames in all_frames:
        decoding.lexicon_decode(frames, tree, delta)
    return time.perf_counter() - t0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # Pre-scan for --config so file values become parser defaults that
    # explicit flags still override.
    defaults: dict = {}
    try:
        if "--config" in argv:
            defaults = _read_run_config(argv[argv.index("--config") + 1])
    except IndexError:
        print("error: --config requires a path", file=sys.stderr)
        return 2
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    parser = _build_parser(defaults)
    args = parser.parse_args(argv)
    handlers = {
        "gen": cmd_gen,
        "train": cmd_train,
        "eval": cmd_eval,
        "decode": cmd_decode,
        "bench-delta": cmd_bench_delta,
    }
    try:
        return handlers[args.command](args)
    except (UsageError, ConfigError, AlphabetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
