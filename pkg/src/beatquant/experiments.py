"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import torch

from .dataset import align_and_filter, segment_examples
from .metrics import f1_from_counts, muster_rates, onset_f1
from .model import ModelConfig, TrainConfig, init_model, train
from .quantizer import grid_snap_quantize, make_segments, model_quantize, slice_score
from .synth import SynthConfig, SynthPiece, generate_corpus
from .tokenizer import SCORE_STEPS


@dataclass
class Counts:
    matched: int = 0
    pred: int = 0
    ref: int = 0
    same_value: int = 0

    def add(self, pred, ref):
        report, pairs = onset_f1(pred, ref)
        self.matched += report.matched_count
        self.pred += report.pred_count
        self.ref += report.ref_count
        self.same_value += sum(a.duration_twelfths == b.duration_twelfths for a, b in pairs)

    @property
    def f1(self) -> float:
        return f1_from_counts(self.matched, self.pred, self.ref)[2]

    @property
    def value_accuracy(self) -> float:
        return self.same_value / self.matched if self.matched else 1.0


def baseline_scores(pieces: list[SynthPiece]) -> dict:
    """Pooled grid-snap onset F1 / value accuracy and mean MUSTER rates over pieces."""
    counts = Counts()
    eps_on = eps_off = 0.0
    for piece in pieces:
        pred = grid_snap_quantize(piece.performance, piece.grid)
        counts.add(pred, piece.score)
        m = muster_rates(pred, piece.score)
        eps_on += m.epsilon_onset
        eps_off += m.epsilon_offset
    n = max(len(pieces), 1)
    return {
        "onset_f1": counts.f1,
        "note_value_accuracy": counts.value_accuracy,
        "epsilon_onset": eps_on / n,
        "epsilon_offset": eps_off / n,
    }


def has_triplet(notes) -> bool:
    return any(n.onset_twelfths % SCORE_STEPS in (4, 8) for n in notes)


def build_examples(pieces, n_measures=2, threshold=0.85):
    examples = []
    for k, piece in enumerate(pieces):
        exs, _ = segment_examples(piece.performance, piece.score, piece.grid, n_measures,
                                  provenance=f"synthetic:{k}")
        examples += [e for e in exs if align_and_filter(e, threshold)[0]]
    return examples


@dataclass
class BenchmarkConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(seed=1234))
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=6000, eval_every=1000, eval_examples=64, warmup_steps=500, time_limit_sec=55 * 60, seed=0))
    n_train_pieces: int = 1300
    n_valid_pieces: int = 20
    n_test_pieces: int = 100
    n_measures: int = 2
    threads: int = 1


def run_learning_benchmark(cfg: BenchmarkConfig | None = None, log=None) -> dict:
    """Train on synthetic data, then compare model vs grid snapping on held-out pieces."""
    cfg = cfg or BenchmarkConfig()
    torch.set_num_threads(cfg.threads)
    start = time.monotonic()
    train_pieces = generate_corpus(cfg.synth, cfg.n_train_pieces)
    valid_pieces = generate_corpus(replace(cfg.synth, seed=cfg.synth.seed + 1), cfg.n_valid_pieces)
    test_pieces = generate_corpus(replace(cfg.synth, seed=cfg.synth.seed + 2), cfg.n_test_pieces)
    train_set = build_examples(train_pieces, cfg.n_measures)
    valid_set = build_examples(valid_pieces, cfg.n_measures)

    model = init_model(cfg.model, seed=cfg.train.seed)
    report = train(model, train_set, valid_set, cfg.train, log=log)

    model_all, base_all = Counts(), Counts()
    model_tri, base_tri = Counts(), Counts()
    fallbacks = segments = 0
    for piece in test_pieces:
        pred, status = model_quantize(model, piece.performance, piece.grid, cfg.n_measures)
        base = grid_snap_quantize(piece.performance, piece.grid)
        fallbacks += sum(s.outcome == "fallback" for s in status)
        segments += len(status)
        model_all.add(pred, piece.score)
        base_all.add(base, piece.score)
        for seg in make_segments(piece.score.measures, cfg.n_measures):
            ref = slice_score(piece.score, seg)
            if has_triplet(ref.notes):
                model_tri.add(slice_score(pred, seg), ref)
                base_tri.add(slice_score(base, seg), ref)
    return {
        "train_examples": len(train_set),
        "steps": len(report.step_losses),
        "final_train_loss": report.step_losses[-1],
        "best_valid_loss": report.best_valid_loss,
        "train_seconds": report.elapsed_sec,
        "total_seconds": time.monotonic() - start,
        "model_onset_f1": model_all.f1,
        "baseline_onset_f1": base_all.f1,
        "model_note_value_accuracy": model_all.value_accuracy,
        "baseline_note_value_accuracy": base_all.value_accuracy,
        "model_triplet_f1": model_tri.f1,
        "baseline_triplet_f1": base_tri.f1,
        "triplet_ref_notes": base_tri.ref,
        "fallback_segments": fallbacks,
        "test_segments": segments,
    }
