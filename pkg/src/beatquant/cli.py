"""
Command-line front end.

    beatquant synth --out raw --pieces 20 --seed 1
    beatquant build-dataset --perf-dir raw/perf --beats-dir raw/beats --score-dir raw/score --out corpus
    beatquant train --corpus corpus --out model.ckpt --steps 2000
    beatquant quantize --checkpoint model.ckpt perf.mid beats.tsv --out-score out.score
    beatquant eval out.score raw/score_text/piece_0000.score

Exit codes: 0 ok, 1 usage, 2 input/parse error, 3 internal invariant failure.
Any subcommand accepts ``--config FILE`` with flat ``key = value`` lines;
command-line flags win over the file.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .beat_grid import BeatFormatError, format_beat_annotations, measures_from_downbeats, parse_beat_annotations
from .midi_io import MidiParseError, read_midi_file, write_midi_file
from .quantizer import ScoreFormatError, format_score, notes_to_score, parse_score, score_to_notes
from .tokenizer import DecodeError, EncodingError, Segment, encode_performance, encode_score, tokens_to_json, tokens_to_text

SCORE_TEMPO_BPM = 120.0

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _echo(record: dict):
    print(json.dumps(record, sort_keys=True))


def read_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args):
    from .synth import SynthConfig, generate_corpus

    meters = tuple(
        (int(spec.split("/")[0]), spec.split("/")[1]) for spec in args.meters.split(",") if spec
    )
    cfg = SynthConfig(
        meters=meters,
        tempo_range_bpm=(args.tempo_min, args.tempo_max),
        onset_jitter_sigma_beats=args.sigma,
        tempo_walk_pct_per_beat=args.tempo_walk,
        polyphony=(1, args.polyphony_max),
        measures_per_piece=args.measures,
        dur_noise_range=(1.0, 1.0) if args.no_dur_noise else (args.dur_noise_min, args.dur_noise_max),
        seed=args.seed,
    )
    out = Path(args.out)
    for sub in ("perf", "beats", "score", "score_text"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    pieces = generate_corpus(cfg, args.pieces)
    for k, piece in enumerate(pieces):
        stem = f"piece_{k:04d}"
        write_midi_file(out / "perf" / f"{stem}.mid", piece.performance)
        (out / "beats" / f"{stem}.tsv").write_text(format_beat_annotations(piece.grid))
        write_midi_file(out / "score" / f"{stem}.mid", score_to_notes(piece.score, SCORE_TEMPO_BPM),
                        SCORE_TEMPO_BPM)
        (out / "score_text" / f"{stem}.score").write_text(format_score(piece.score))
    _echo({"command": "synth", "seed": args.seed, "pieces": len(pieces), "out": str(out)})


def _load_grid(path):
    return parse_beat_annotations(Path(path).read_text(encoding="utf-8"))


def cmd_build_dataset(args):
    from .dataset import AugmentConfig, align_and_filter, augment, segment_examples, split_names, write_split

    perf_dir, beats_dir, score_dir = Path(args.perf_dir), Path(args.beats_dir), Path(args.score_dir)
    stems = sorted(p.stem for p in perf_dir.glob("*.mid"))
    if not stems:
        raise InputError(f"no .mid files in {perf_dir}")
    splits = split_names(len(stems), args.seed)
    buckets = {"train": [], "valid": [], "test": []}
    stats = {"pieces": len(stems), "windows": 0, "dropped_length": 0, "dropped_match": 0}
    aug_cfg = AugmentConfig(seed=args.seed)
    aug_rng = np.random.default_rng(args.seed)
    for stem, split in zip(stems, splits):
        perf, _ = read_midi_file(perf_dir / f"{stem}.mid")
        grid = _load_grid(beats_dir / f"{stem}.tsv")
        score_notes, _ = read_midi_file(score_dir / f"{stem}.mid")
        score = notes_to_score(score_notes, measures_from_downbeats(grid), SCORE_TEMPO_BPM)
        variants = [(perf, score, stem)]
        if split == "train":
            for c in range(args.augment_copies):
                p2, s2 = augment(perf, score, grid, aug_cfg, aug_rng)
                variants.append((p2, s2, f"{stem}#aug{c}"))
        for p, s, name in variants:
            examples, dropped = segment_examples(p, s, grid, args.n_measures, args.max_len, provenance=name)
            stats["windows"] += len(examples) + dropped
            stats["dropped_length"] += dropped
            for ex in examples:
                keep, _ = align_and_filter(ex, args.threshold)
                if keep:
                    buckets[split].append(ex)
                else:
                    stats["dropped_match"] += 1
    out = Path(args.out)
    for split, examples in buckets.items():
        write_split(out / split, examples)
        stats[split] = len(examples)
    _echo({"command": "build-dataset", "seed": args.seed, **stats})


def cmd_tokenize(args):
    path = Path(args.file)
    if path.suffix == ".score":
        score = parse_score(path.read_text(encoding="utf-8"))
        if not score.measures:
            raise InputError("score file has no measure headers")
        tokens = encode_score(score, Segment(tuple(score.measures)))
    else:
        if not args.beats:
            raise UsageError("tokenize: a beat annotation file is required for MIDI input")
        notes, _ = read_midi_file(path)
        grid = _load_grid(args.beats)
        from .quantizer import make_segments, split_performance

        segment = make_segments(measures_from_downbeats(grid), len(grid))[0]
        notes = split_performance(notes, grid, [segment])[0][1]
        tokens = encode_performance(notes, grid, segment)
    sys.stdout.write(tokens_to_json(tokens) + "\n" if args.json else tokens_to_text(tokens))


def _model_config(args):
    from .model import ModelConfig

    return ModelConfig(
        d_model=args.d_model,
        n_heads=args.n_heads,
        n_encoder_layers=args.n_encoder_layers,
        n_decoder_layers=args.n_decoder_layers,
        d_ffn=args.d_ffn,
        dropout=args.dropout,
        max_len=args.max_len,
    )


def cmd_train(args):
    from .dataset import read_split
    from .model import TrainConfig, init_model, train

    corpus = Path(args.corpus)
    train_set = read_split(corpus / "train")
    valid_set = read_split(corpus / "valid")
    if not train_set:
        raise InputError(f"no training examples under {corpus / 'train'}")
    cfg = _model_config(args)
    opt = TrainConfig(
        lr=args.lr, batch_size=args.batch_size, steps=args.steps, grad_clip=args.grad_clip,
        seed=args.seed, eval_every=args.eval_every, eval_examples=args.eval_examples,
        warmup_steps=args.warmup_steps,
    )
    model = init_model(cfg, args.seed)
    report = train(model, train_set, valid_set, opt, checkpoint_path=args.out)
    text = report.to_jsonl()
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    _echo({"command": "train", "seed": args.seed, "steps": len(report.step_losses),
           "final_loss": round(report.step_losses[-1], 6), "checkpoint": str(args.out)})


def cmd_quantize(args):
    from .quantizer import grid_snap_quantize, model_quantize

    notes, _ = read_midi_file(args.performance)
    grid = _load_grid(args.beats)
    if args.baseline:
        score, statuses = grid_snap_quantize(notes, grid), []
    else:
        if not args.checkpoint:
            raise UsageError("quantize: give --checkpoint or --baseline")
        from .model import load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)
        score, statuses = model_quantize(model, notes, grid, args.n_measures)
    text = format_score(score)
    if args.out_score:
        Path(args.out_score).write_text(text)
    else:
        sys.stdout.write(text)
    if args.out_midi:
        write_midi_file(args.out_midi, score_to_notes(score, SCORE_TEMPO_BPM), SCORE_TEMPO_BPM)
    fallbacks = sum(s.outcome == "fallback" for s in statuses)
    print(json.dumps({"segments": len(statuses), "fallback": fallbacks, "baseline": bool(args.baseline)}),
          file=sys.stderr)


def _score_pairs(pred: Path, ref: Path):
    if pred.is_dir() != ref.is_dir():
        raise UsageError("eval: compare two files or two directories")
    if not pred.is_dir():
        return [(pred, ref)]
    pairs = []
    for p in sorted(pred.glob("*.score")):
        r = ref / p.name
        if not r.exists():
            raise InputError(f"no reference score for {p.name}")
        pairs.append((p, r))
    if not pairs:
        raise InputError(f"no .score files in {pred}")
    return pairs


def cmd_eval(args):
    from .metrics import f1_from_counts, muster_rates, onset_f1

    matched = n_pred = n_ref = same = 0
    rates = {"epsilon_onset": 0.0, "epsilon_offset": 0.0, "missing_rate": 0.0, "extra_rate": 0.0}
    pairs = _score_pairs(Path(args.pred), Path(args.ref))
    for p, r in pairs:
        pred = parse_score(p.read_text(encoding="utf-8"))
        ref = parse_score(r.read_text(encoding="utf-8"))
        report, matches = onset_f1(pred, ref)
        matched += report.matched_count
        n_pred += report.pred_count
        n_ref += report.ref_count
        same += sum(a.duration_twelfths == b.duration_twelfths for a, b in matches)
        m = muster_rates(pred, ref)
        for key in rates:
            rates[key] += getattr(m, key) / len(pairs)
    precision, recall, f1 = f1_from_counts(matched, n_pred, n_ref)
    result = {
        "method": args.method,
        "files": len(pairs),
        "precision": round(precision, 6),
        "recall": round(recall, 6),
        "onset_f1": round(f1, 6),
        "note_value_accuracy": round(same / matched if matched else 1.0, 6),
        "matched_count": matched,
        "pred_count": n_pred,
        "ref_count": n_ref,
        **{k: round(v, 4) for k, v in rates.items()},
        "metric": "MUSTER-style",
    }
    if args.format == "json":
        _echo(result)
        return
    w = max(len(args.method), 6)
    print(f"{'Method':<{w}} | {'ε_onset':>8} | {'ε_offset':>8}   (MUSTER-style, %)")
    print(f"{args.method:<{w}} | {rates['epsilon_onset']:8.2f} | {rates['epsilon_offset']:8.2f}")
    print(f"precision {precision:.3f}  recall {recall:.3f}  F1 {f1:.3f}  "
          f"note value accuracy {result['note_value_accuracy']:.3f}  "
          f"missing {rates['missing_rate']:.2f}%  extra {rates['extra_rate']:.2f}%")


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="beatquant", description="Beat-aware rhythm quantization toolkit")
    parser.add_argument("--threads", type=int, default=1, help="torch worker threads (training is deterministic only with 1)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--pieces", type=int, default=20)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--measures", type=int, default=8)
    p.add_argument("--sigma", type=float, default=0.02, help="onset jitter, beats")
    p.add_argument("--tempo-min", type=float, default=60.0)
    p.add_argument("--tempo-max", type=float, default=140.0)
    p.add_argument("--tempo-walk", type=float, default=2.0, help="percent per beat")
    p.add_argument("--polyphony-max", type=int, default=2)
    p.add_argument("--meters", default="2/simple,3/simple,4/simple,2/compound")
    p.add_argument("--dur-noise-min", type=float, default=0.9)
    p.add_argument("--dur-noise-max", type=float, default=1.1)
    p.add_argument("--no-dur-noise", action="store_true")

    p = add("build-dataset", cmd_build_dataset, "turn MIDI/beat/score directories into a token corpus")
    p.add_argument("--perf-dir", required=True)
    p.add_argument("--beats-dir", required=True)
    p.add_argument("--score-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-measures", type=int, default=2)
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--threshold", type=float, default=0.85)
    p.add_argument("--augment-copies", type=int, default=0)

    p = add("tokenize", cmd_tokenize, "dump the tokens of a performance MIDI (+ beats) or a .score file")
    p.add_argument("file")
    p.add_argument("beats", nargs="?")
    p.add_argument("--json", action="store_true", help="debug form with token names")

    p = add("train", cmd_train, "train a model on a token corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="line-JSON training report (default: stdout)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--eval-examples", type=int, default=64)
    p.add_argument("--warmup-steps", type=int, default=0)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-encoder-layers", type=int, default=2)
    p.add_argument("--n-decoder-layers", type=int, default=2)
    p.add_argument("--d-ffn", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--max-len", type=int, default=512)

    p = add("quantize", cmd_quantize, "quantize a performance")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--checkpoint")
    group.add_argument("--baseline", action="store_true", help="grid snapping instead of a model")
    p.add_argument("performance")
    p.add_argument("beats")
    p.add_argument("--out-score")
    p.add_argument("--out-midi")
    p.add_argument("--n-measures", type=int, default=2)

    p = add("eval", cmd_eval, "compare predicted and reference .score files (or directories)")
    p.add_argument("pred")
    p.add_argument("ref")
    p.add_argument("--method", default="model")
    p.add_argument("--format", choices=("text", "json"), default="text")
    return parser


def _config_path(argv):
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Parse ``argv``; values from --config become defaults for the chosen subcommand.

    The file is read before parsing so it can supply required options.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in sub_action.choices), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    sub = sub_action.choices[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_config_file(path).items():
        action = actions.get(key)
        if action is None or key in ("help", "config", "func"):
            raise UsageError(f"unknown config key {key!r} for {command}")
        try:
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                defaults[key] = action.type(raw)
            else:
                defaults[key] = raw
        except ValueError:
            raise UsageError(f"bad value {raw!r} for config key {key!r}") from None
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage())
        import torch

        torch.set_num_threads(args.threads)
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: kind=usage reason={json.dumps(str(exc).splitlines()[0])}", file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (InputError, MidiParseError, BeatFormatError, ScoreFormatError, DecodeError, EncodingError,
            FileNotFoundError, IsADirectoryError, UnicodeDecodeError, ValueError) as exc:
        print(f"error: kind=input reason={json.dumps(f'{type(exc).__name__}: {exc}')}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort exit code contract
        print(f"error: kind=internal reason={json.dumps(f'{type(exc).__name__}: {exc}')}", file=sys.stderr)
        return EXIT_INTERNAL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
