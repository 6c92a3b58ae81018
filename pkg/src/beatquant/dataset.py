"""Training example construction: N-measure windows, match filtering, augmentation."""
from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .beat_grid import BeatGrid, MeasureSpan, measures_from_downbeats, seconds_to_beat
from .midi_io import NoteEvent, note_sort_key
from .quantizer import make_segments, slice_score, split_performance
from .tokenizer import (
    SCORE_STEPS,
    QuantizedScore,
    ScoreNote,
    Segment,
    decode_performance_tokens,
    decode_score_tokens,
    encode_performance,
    encode_score,
    tokens_from_text,
    tokens_to_text,
)

DEFAULT_N_MEASURES = 2
DEFAULT_MAX_LEN = 512
DEFAULT_THRESHOLD = 0.85


class PairingError(ValueError):
    pass


@dataclass
class TrainingExample:
    source: list[int]
    target: list[int]
    segment: Segment
    match_ratio: float = 1.0
    provenance: str = ""


@dataclass
class AugmentConfig:
    transpose_range: tuple[int, int] = (-6, 6)
    delete_prob: float = 0.05
    dur_noise_range: tuple[float, float] = (0.8, 1.25)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.delete_prob < 1:
            raise ValueError("delete_prob must be in [0, 1)")
        lo, hi = self.dur_noise_range
        if not 0 < lo <= hi:
            raise ValueError("duration noise interval must be positive and ordered")
        if self.transpose_range[0] > self.transpose_range[1]:
            raise ValueError("transpose_range must be ordered")


def segment_examples(
    perf: Sequence[NoteEvent],
    score: QuantizedScore,
    grid: BeatGrid,
    n_measures: int = DEFAULT_N_MEASURES,
    max_len: int = DEFAULT_MAX_LEN,
    provenance: str = "",
) -> tuple[list[TrainingExample], int]:
    """Cut a performance/score pair into N-measure examples.

    Returns the examples and the number of windows dropped because either
    side exceeded ``max_len`` tokens.
    """
    measures = measures_from_downbeats(grid)
    if len(score.measures) != len(measures):
        raise PairingError(
            f"grid has {len(measures)} measures but score has {len(score.measures)}"
        )
    segments = make_segments(measures, n_measures)
    parts = split_performance(perf, grid, segments)
    examples, dropped = [], 0
    for seg, (_, perf_notes) in zip(segments, parts):
        src = encode_performance(perf_notes, grid, seg)
        tgt = encode_score(slice_score(score, seg), seg)
        if len(src) > max_len or len(tgt) > max_len:
            dropped += 1
            continue
        examples.append(TrainingExample(src, tgt, seg, 1.0, provenance))
    return examples, dropped


def _snapped_beat(onset_beats: float) -> int:
    # a performed note belongs to the beat its nearest score position falls in
    return math.floor(round(onset_beats * SCORE_STEPS) / SCORE_STEPS)


def match_ratio(example: TrainingExample) -> float:
    """2|M| / (|P| + |S|) with M the per-measure pitch multiset intersection."""
    seg = example.segment
    perf = decode_performance_tokens(example.source, seg)
    score = decode_score_tokens(example.target, seg)
    measures = seg.local_measures()
    starts = [m.start_beat for m in measures]

    def measure_of(beat):
        return max(0, min(int(np.searchsorted(starts, beat, side="right")) - 1, len(measures) - 1))

    p_bags: dict[int, Counter] = defaultdict(Counter)
    s_bags: dict[int, Counter] = defaultdict(Counter)
    for n in perf:
        p_bags[measure_of(_snapped_beat(n.onset_beats))][n.pitch] += 1
    for n in score.notes:
        s_bags[measure_of(n.onset_twelfths // SCORE_STEPS)][n.pitch] += 1
    total = len(perf) + len(score.notes)
    if total == 0:
        return 1.0
    matched = sum(sum((p_bags[m] & s_bags[m]).values()) for m in p_bags)
    return 2 * matched / total


def align_and_filter(example: TrainingExample, threshold: float = DEFAULT_THRESHOLD) -> tuple[bool, float]:
    ratio = match_ratio(example)
    example.match_ratio = ratio
    return ratio >= threshold, ratio


def _pair_notes(perf: Sequence[NoteEvent], score: QuantizedScore, grid: BeatGrid):
    """Greedy per-measure pitch pairing, the same rule the match filter uses.

    Returns (pairs of (perf index, score index)) in a deterministic order.
    """
    starts = [m.start_beat for m in score.measures] or [0]

    def measure_of(beat):
        return max(0, int(np.searchsorted(starts, beat, side="right")) - 1)

    p_groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    if perf:
        beats = seconds_to_beat(grid, np.array([n.onset_sec for n in perf]))
        for i, (n, b) in enumerate(zip(perf, beats)):
            p_groups[(measure_of(_snapped_beat(float(b))), n.pitch)].append(i)
    s_groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for j, n in enumerate(score.notes):
        s_groups[(measure_of(n.onset_twelfths // SCORE_STEPS), n.pitch)].append(j)
    pairs = []
    for key in sorted(p_groups):
        pairs += zip(p_groups[key], s_groups.get(key, ()))
    return sorted(pairs)


def _fold_pitch(p: int) -> int:
    while p > 127:
        p -= 12
    while p < 0:
        p += 12
    return p


def augment(
    perf: Sequence[NoteEvent],
    score: QuantizedScore,
    grid: BeatGrid,
    cfg: AugmentConfig,
    rng: np.random.Generator | None = None,
) -> tuple[list[NoteEvent], QuantizedScore]:
    """Transpose both sides, delete paired notes from both sides, jitter performed durations.

    Random draws happen in a fixed order (transposition, one uniform per
    aligned pair, one factor per surviving performed note) so a given seed
    always yields the same result.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.transpose_range
    shift = int(rng.integers(lo, hi + 1))

    pairs = _pair_notes(perf, score, grid)
    drop_p, drop_s = set(), set()
    if pairs:
        coins = rng.random(len(pairs))
        for (i, j), c in zip(pairs, coins):
            if c < cfg.delete_prob:
                drop_p.add(i)
                drop_s.add(j)

    kept = [n for i, n in enumerate(perf) if i not in drop_p]
    d_lo, d_hi = cfg.dur_noise_range
    factors = rng.uniform(d_lo, d_hi, len(kept)) if d_lo != d_hi else np.full(len(kept), d_lo)
    new_perf = [
        NoteEvent(n.onset_sec, n.duration_sec * float(f), _fold_pitch(n.pitch + shift), n.velocity, n.channel)
        for n, f in zip(kept, factors)
    ]
    new_perf.sort(key=note_sort_key)
    new_notes = [
        ScoreNote(n.onset_twelfths, _fold_pitch(n.pitch + shift), n.duration_twelfths)
        for j, n in enumerate(score.notes)
        if j not in drop_s
    ]
    return new_perf, QuantizedScore(new_notes, list(score.measures))


# -- on-disk corpus ---------------------------------------------------------

def _segment_record(seg: Segment) -> dict:
    return {"start_beat": seg.start_beat, "measures": [[m.start_beat, m.num_beats] for m in seg.measures]}


def _segment_from_record(rec: dict) -> Segment:
    return Segment(tuple(MeasureSpan(s, n) for s, n in rec["measures"]))


def write_split(directory, examples: Sequence[TrainingExample]):
    """Write ``examples`` as token files plus a line-JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.jsonl", "w", encoding="utf-8") as manifest:
        for k, ex in enumerate(examples):
            stem = f"{k:06d}"
            (directory / f"{stem}.src").write_text(tokens_to_text(ex.source))
            (directory / f"{stem}.tgt").write_text(tokens_to_text(ex.target))
            record = {
                "id": stem,
                "provenance": ex.provenance,
                "segment": _segment_record(ex.segment),
                "match_ratio": round(ex.match_ratio, 6),
            }
            manifest.write(json.dumps(record, sort_keys=True) + "\n")


def read_split(directory) -> list[TrainingExample]:
    directory = Path(directory)
    out = []
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        return out
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(
            TrainingExample(
                tokens_from_text((directory / f"{rec['id']}.src").read_text()),
                tokens_from_text((directory / f"{rec['id']}.tgt").read_text()),
                _segment_from_record(rec["segment"]),
                rec["match_ratio"],
                rec["provenance"],
            )
        )
    return out


def split_names(n_pieces: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> list[str]:
    """Deterministic piece-level train/valid/test assignment."""
    order = np.random.default_rng(seed).permutation(n_pieces)
    n_valid = max(1, round(fractions[1] * n_pieces)) if n_pieces >= 3 else 0
    n_test = max(1, round(fractions[2] * n_pieces)) if n_pieces >= 3 else 0
    names = ["train"] * n_pieces
    for k, idx in enumerate(order):
        if k < n_valid:
            names[idx] = "valid"
        elif k < n_valid + n_test:
            names[idx] = "test"
    return names
