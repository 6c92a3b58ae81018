"""Quantization pipelines: grid snapping and model-driven decoding with fallback."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .beat_grid import BeatGrid, MeasureSpan, beat_to_seconds, measures_from_downbeats, seconds_to_beat
from .midi_io import NoteEvent
from .tokenizer import (
    MAX_SDUR,
    SCORE_STEPS,
    DecodeError,
    QuantizedScore,
    ScoreNote,
    Segment,
    decode_score_tokens,
    encode_performance,
)


class ScoreFormatError(ValueError):
    pass


def grid_snap_quantize(notes: Sequence[NoteEvent], grid: BeatGrid) -> QuantizedScore:
    """Round every onset and duration to the nearest 1/12 beat (ties to even)."""
    measures = measures_from_downbeats(grid)
    if not notes:
        return QuantizedScore([], measures)
    onsets = seconds_to_beat(grid, np.array([n.onset_sec for n in notes]))
    offsets = seconds_to_beat(grid, np.array([n.offset_sec for n in notes]))
    # np.rint rounds half to even
    q_on = np.rint(onsets * SCORE_STEPS).astype(int)
    q_dur = np.clip(np.rint((offsets - onsets) * SCORE_STEPS).astype(int), 1, MAX_SDUR)
    last = measures[-1].end_beat * SCORE_STEPS - 1
    out = [
        ScoreNote(int(min(max(o, 0), last)), n.pitch, int(d))
        for o, d, n in zip(q_on, q_dur, notes)
    ]
    return QuantizedScore(out, measures)


def snap_performance_tokens(tokens, segment: Segment) -> QuantizedScore:
    """Grid-snap a performance token sequence directly (segment-local result)."""
    from .tokenizer import decode_performance_tokens

    last = segment.num_beats * SCORE_STEPS - 1
    notes = [
        ScoreNote(
            int(min(max(np.rint(n.onset_beats * SCORE_STEPS), 0), last)),
            n.pitch,
            int(min(max(np.rint(n.duration_beats * SCORE_STEPS), 1), MAX_SDUR)),
        )
        for n in decode_performance_tokens(tokens, segment)
    ]
    return QuantizedScore(notes, segment.local_measures())


def make_segments(measures: Sequence[MeasureSpan], n_measures: int) -> list[Segment]:
    """Non-overlapping windows of ``n_measures`` measures; the last may be shorter."""
    if n_measures < 1:
        raise ValueError("n_measures must be >= 1")
    return [Segment(tuple(measures[i:i + n_measures])) for i in range(0, len(measures), n_measures)]


def split_performance(notes: Sequence[NoteEvent], grid: BeatGrid, segments: Sequence[Segment],
                      margin: float = 1.0 / 24):
    """Assign notes to segments by onset beat.

    A note counts toward the segment containing ``onset + margin``, so a note
    played slightly ahead of a segment's first beat lands in that segment
    (where its score note is) rather than at the tail of the previous one.
    Notes outside the covered range go to the boundary segment. Notes whose
    onset is not inside their segment are re-timed to the nearest position
    inside it. Returns, per segment, (original notes, notes for encoding).
    """
    result = [([], []) for _ in segments]
    if not notes:
        return result
    bounds = [s.start_beat for s in segments[1:]]
    eps = 1.0 / 192
    for note in notes:
        onset = seconds_to_beat(grid, note.onset_sec)
        k = int(np.searchsorted(bounds, math.floor(onset + margin), side="right"))
        seg = segments[k]
        result[k][0].append(note)
        if seg.start_beat <= onset < seg.end_beat:
            result[k][1].append(note)
            continue
        offset = seconds_to_beat(grid, note.offset_sec)
        clamped = min(max(onset, seg.start_beat), seg.end_beat - eps)
        new_on = max(beat_to_seconds(grid, clamped), 0.0)
        new_off = beat_to_seconds(grid, clamped + max(offset - onset, eps))
        adjusted = NoteEvent(new_on, max(new_off - new_on, 1e-6), note.pitch, note.velocity, note.channel)
        if math.floor(seconds_to_beat(grid, adjusted.onset_sec)) < seg.start_beat:
            # float round-off at the boundary
            adjusted = NoteEvent(beat_to_seconds(grid, seg.start_beat + 1e-9), adjusted.duration_sec,
                                 note.pitch, note.velocity, note.channel)
        result[k][1].append(adjusted)
    return result


def shift_score(score: QuantizedScore, beats: int) -> list[ScoreNote]:
    d = beats * SCORE_STEPS
    return [ScoreNote(n.onset_twelfths + d, n.pitch, n.duration_twelfths) for n in score.notes]


def slice_score(score: QuantizedScore, segment: Segment) -> QuantizedScore:
    """Segment-local view of a whole-piece score."""
    lo, hi = segment.start_beat * SCORE_STEPS, segment.end_beat * SCORE_STEPS
    notes = [
        ScoreNote(n.onset_twelfths - lo, n.pitch, n.duration_twelfths)
        for n in score.notes
        if lo <= n.onset_twelfths < hi
    ]
    return QuantizedScore(notes, segment.local_measures())


@dataclass
class SegmentStatus:
    start_beat: int
    num_beats: int
    outcome: str  # "model" or "fallback"
    reason: str = ""


def model_quantize(model, notes, grid: BeatGrid, n_measures: int = 2, batch_size: int = 32):
    """Quantize with a trained model, one N-measure segment at a time.

    Segments whose source is too long or whose decoded tokens fail the score
    grammar are grid-snapped instead. Returns (score, per-segment status).
    """
    from .model import greedy_decode_batch

    measures = measures_from_downbeats(grid)
    segments = make_segments(measures, n_measures)
    parts = split_performance(notes, grid, segments)
    max_len = model.cfg.max_len

    statuses: list[SegmentStatus | None] = [None] * len(segments)
    out: list[ScoreNote] = []
    pending = []
    for idx, (seg, (orig, adjusted)) in enumerate(zip(segments, parts)):
        src = encode_performance(adjusted, grid, seg)
        if len(src) > max_len:
            statuses[idx] = SegmentStatus(seg.start_beat, seg.num_beats, "fallback", "source too long")
            out += grid_snap_quantize(orig, grid).notes
        else:
            pending.append((idx, seg, src, orig))

    for b in range(0, len(pending), batch_size):
        chunk = pending[b:b + batch_size]
        decoded = greedy_decode_batch(model, [c[2] for c in chunk], max_len)
        for (idx, seg, _, orig), tokens in zip(chunk, decoded):
            try:
                local = decode_score_tokens(tokens, seg)
            except DecodeError as exc:
                statuses[idx] = SegmentStatus(seg.start_beat, seg.num_beats, "fallback", str(exc))
                out += grid_snap_quantize(orig, grid).notes
                continue
            statuses[idx] = SegmentStatus(seg.start_beat, seg.num_beats, "model")
            out += shift_score(local, seg.start_beat)
    return QuantizedScore(out, measures), statuses


def format_score(score: QuantizedScore) -> str:
    """Line-based score text: measure headers, then ``onset pitch duration`` per note."""
    lines = [f"measure {m.start_beat} {m.num_beats}" for m in score.measures]
    lines += [f"{n.onset_twelfths} {n.pitch} {n.duration_twelfths}" for n in score.notes]
    return "".join(line + "\n" for line in lines)


def parse_score(text: str) -> QuantizedScore:
    measures, notes = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "measure":
                if len(parts) != 3:
                    raise ValueError("expected 'measure start num_beats'")
                measures.append(MeasureSpan(int(parts[1]), int(parts[2])))
            else:
                if len(parts) != 3:
                    raise ValueError("expected 'onset pitch duration'")
                onset, pitch, dur = map(int, parts)
                notes.append(ScoreNote(onset, pitch, dur))
        except ValueError as exc:
            raise ScoreFormatError(f"line {lineno}: {exc}") from None
    return QuantizedScore(notes, measures)


def score_to_notes(score: QuantizedScore, tempo_bpm: float = 120.0, velocity: int = 80) -> list[NoteEvent]:
    """Render a score at a fixed tempo (one beat = one quarter note)."""
    sec = 60.0 / tempo_bpm / SCORE_STEPS
    return [
        NoteEvent(n.onset_twelfths * sec, n.duration_twelfths * sec, n.pitch, velocity)
        for n in score.notes
    ]


def notes_to_score(notes: Sequence[NoteEvent], measures, tempo_bpm: float = 120.0) -> QuantizedScore:
    """Read a fixed-tempo score rendering back onto the 1/12-beat grid."""
    steps = tempo_bpm / 60.0 * SCORE_STEPS
    out = [
        ScoreNote(round(n.onset_sec * steps), n.pitch, max(round(n.duration_sec * steps), 1))
        for n in notes
    ]
    return QuantizedScore(out, list(measures))
