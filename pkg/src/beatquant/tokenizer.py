"""
Beat-relative token vocabulary shared by performance and score sequences.

Both sides use one grammar::

    BOS (marker note*)* EOS      marker := BAR | BEAT
    performance note := PFRAC PITCH PDUR     (1/48-beat resolution)
    score note       := SFRAC PITCH SDUR     (1/12-beat resolution)

There is deliberately no time-signature token: meter is only visible
through where BAR markers fall.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

from .beat_grid import BeatGrid, MeasureSpan, seconds_to_beat
from .midi_io import NoteEvent

PERF_STEPS = 48  # performance positions per beat
SCORE_STEPS = 12  # score positions per beat
MAX_PDUR = 192
MAX_SDUR = 48

PAD, BOS, EOS, BAR, BEAT = range(5)
SPECIAL_NAMES = ("PAD", "BOS", "EOS", "BAR", "BEAT")


@dataclass(frozen=True)
class _Range:
    name: str
    start: int
    low: int  # value encoded by ``start``
    count: int

    def id(self, value: int) -> int:
        if not self.low <= value < self.low + self.count:
            raise ValueError(f"{self.name} value {value} out of range")
        return self.start + value - self.low

    def value(self, token: int) -> int:
        return token - self.start + self.low

    def __contains__(self, token: int) -> bool:
        return self.start <= token < self.start + self.count


PITCH = _Range("PITCH", 5, 0, 128)
PFRAC = _Range("PFRAC", 133, 0, PERF_STEPS)
PDUR = _Range("PDUR", 181, 1, MAX_PDUR)
SFRAC = _Range("SFRAC", 373, 0, SCORE_STEPS)
SDUR = _Range("SDUR", 385, 1, MAX_SDUR)
RANGES = (PITCH, PFRAC, PDUR, SFRAC, SDUR)
VOCAB_SIZE = 433


def token_name(token: int) -> str:
    if 0 <= token < len(SPECIAL_NAMES):
        return SPECIAL_NAMES[token]
    for r in RANGES:
        if token in r:
            return f"{r.name}_{r.value(token)}"
    raise ValueError(f"token id {token} outside vocabulary")


def vocabulary() -> list[str]:
    """All token names, indexed by id."""
    return [token_name(i) for i in range(VOCAB_SIZE)]


@dataclass(frozen=True, order=True)
class ScoreNote:
    onset_twelfths: int
    pitch: int
    duration_twelfths: int

    def __post_init__(self):
        if self.onset_twelfths < 0:
            raise ValueError(f"negative onset {self.onset_twelfths}")
        if self.duration_twelfths < 1:
            raise ValueError(f"score note duration must be >= 1, got {self.duration_twelfths}")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")


@dataclass
class QuantizedScore:
    notes: list[ScoreNote] = field(default_factory=list)
    measures: list[MeasureSpan] = field(default_factory=list)

    def __post_init__(self):
        self.notes = sorted(self.notes)

    @property
    def num_beats(self) -> int:
        return self.measures[-1].end_beat if self.measures else 0


@dataclass(frozen=True)
class Segment:
    """A window of consecutive measures; ``flags`` is True at each measure start."""

    measures: tuple[MeasureSpan, ...]

    def __post_init__(self):
        measures = tuple(self.measures)
        if not measures:
            raise ValueError("segment needs at least one measure")
        for a, b in zip(measures, measures[1:]):
            if a.end_beat != b.start_beat:
                raise ValueError("segment measures must be contiguous")
        object.__setattr__(self, "measures", measures)

    @property
    def start_beat(self) -> int:
        return self.measures[0].start_beat

    @property
    def end_beat(self) -> int:
        return self.measures[-1].end_beat

    @property
    def num_beats(self) -> int:
        return self.end_beat - self.start_beat

    @property
    def flags(self) -> tuple[bool, ...]:
        starts = {m.start_beat for m in self.measures}
        return tuple(b in starts for b in range(self.start_beat, self.end_beat))

    def local_measures(self) -> list[MeasureSpan]:
        return [MeasureSpan(m.start_beat - self.start_beat, m.num_beats) for m in self.measures]

    @classmethod
    def from_flags(cls, flags: Sequence[bool], start_beat: int = 0) -> "Segment":
        flags = list(flags)
        if not flags or not flags[0]:
            raise ValueError("flags must start with a measure start")
        starts = [i for i, f in enumerate(flags) if f] + [len(flags)]
        return cls(tuple(MeasureSpan(start_beat + a, b - a) for a, b in zip(starts, starts[1:])))


class EncodingError(ValueError):
    pass


class DecodeError(ValueError):
    def __init__(self, message: str, index: int):
        super().__init__(f"token {index}: {message}")
        self.index = index


def encode_performance(notes: Sequence[NoteEvent], grid: BeatGrid, segment: Segment) -> list[int]:
    """Tokenize performed notes relative to the beats of ``segment``."""
    by_beat: dict[int, list[tuple[float, int, float, NoteEvent]]] = {}
    for note in notes:
        onset = seconds_to_beat(grid, note.onset_sec)
        dur = seconds_to_beat(grid, note.offset_sec) - onset
        b = math.floor(onset)
        if not segment.start_beat <= b < segment.end_beat:
            raise EncodingError(
                f"note {note} at beat {onset:.3f} outside segment "
                f"[{segment.start_beat}, {segment.end_beat})"
            )
        by_beat.setdefault(b, []).append((onset, note.pitch, dur, note))
    tokens = [BOS]
    for b, flag in zip(range(segment.start_beat, segment.end_beat), segment.flags):
        tokens.append(BAR if flag else BEAT)
        for onset, pitch, dur, _ in sorted(by_beat.get(b, ()), key=lambda x: (x[0], x[1])):
            frac = min(max(round((onset - b) * PERF_STEPS), 0), PERF_STEPS - 1)
            steps = min(max(round(dur * PERF_STEPS), 1), MAX_PDUR)
            tokens += [PFRAC.id(frac), PITCH.id(pitch), PDUR.id(steps)]
    tokens.append(EOS)
    return tokens


def encode_score(score: QuantizedScore, segment: Segment) -> list[int]:
    """Tokenize a segment-local score (onsets counted from the segment start)."""
    n = segment.num_beats
    by_beat: dict[int, list[ScoreNote]] = {}
    clamped = 0
    for note in score.notes:
        b = note.onset_twelfths // SCORE_STEPS
        if b >= n:
            raise EncodingError(f"score note {note} beyond segment of {n} beats")
        by_beat.setdefault(b, []).append(note)
    tokens = [BOS]
    for b, flag in enumerate(segment.flags):
        tokens.append(BAR if flag else BEAT)
        for note in sorted(by_beat.get(b, ())):
            dur = note.duration_twelfths
            if dur > MAX_SDUR:
                clamped += 1
                dur = MAX_SDUR
            tokens += [SFRAC.id(note.onset_twelfths % SCORE_STEPS), PITCH.id(note.pitch), SDUR.id(dur)]
    tokens.append(EOS)
    if clamped:
        warnings.warn(f"{clamped} score duration(s) clamped to {MAX_SDUR} twelfths")
    return tokens


def _parse(tokens: Sequence[int], segment: Segment, frac_range: _Range, dur_range: _Range):
    """Strict grammar walk; yields (beat_index, frac, pitch, dur) per note."""
    tokens = list(tokens)
    flags = segment.flags
    if not tokens or tokens[0] != BOS:
        raise DecodeError("sequence must start with BOS", 0)
    out = []
    beat = -1
    i = 1
    while i < len(tokens):
        tok = tokens[i]
        if tok == EOS:
            if i != len(tokens) - 1:
                raise DecodeError("tokens after EOS", i + 1)
            if beat + 1 != len(flags):
                raise DecodeError(f"{beat + 1} beat markers, segment has {len(flags)}", i)
            return out
        if tok in (BAR, BEAT):
            beat += 1
            if beat >= len(flags):
                raise DecodeError(f"more than {len(flags)} beat markers", i)
            if (tok == BAR) != flags[beat]:
                raise DecodeError(f"expected {'BAR' if flags[beat] else 'BEAT'}", i)
            i += 1
            continue
        if tok in frac_range:
            if beat < 0:
                raise DecodeError("note before first beat marker", i)
            if i + 2 >= len(tokens):
                raise DecodeError("truncated note", i)
            pitch, dur = tokens[i + 1], tokens[i + 2]
            if pitch not in PITCH:
                raise DecodeError(f"expected PITCH, got {_safe_name(pitch)}", i + 1)
            if dur not in dur_range:
                raise DecodeError(f"expected {dur_range.name}, got {_safe_name(dur)}", i + 2)
            out.append((beat, frac_range.value(tok), PITCH.value(pitch), dur_range.value(dur)))
            i += 3
            continue
        raise DecodeError(f"unexpected {_safe_name(tok)}", i)
    raise DecodeError("missing EOS", len(tokens))


def _safe_name(token: int) -> str:
    try:
        return token_name(token)
    except ValueError:
        return f"<{token}>"


def decode_score_tokens(tokens: Sequence[int], segment: Segment) -> QuantizedScore:
    notes = [
        ScoreNote(SCORE_STEPS * beat + frac, pitch, dur)
        for beat, frac, pitch, dur in _parse(tokens, segment, SFRAC, SDUR)
    ]
    return QuantizedScore(notes, segment.local_measures())


@dataclass(frozen=True, order=True)
class PerformedNote:
    """A performance note as seen through its tokens (beat units, segment-local)."""

    onset_beats: float
    pitch: int
    duration_beats: float


def decode_performance_tokens(tokens: Sequence[int], segment: Segment) -> list[PerformedNote]:
    return [
        PerformedNote(beat + frac / PERF_STEPS, pitch, dur / PERF_STEPS)
        for beat, frac, pitch, dur in _parse(tokens, segment, PFRAC, PDUR)
    ]


def tokens_to_text(tokens: Sequence[int]) -> str:
    return "".join(f"{t}\n" for t in tokens)


def tokens_from_text(text: str) -> list[int]:
    return [int(line) for line in text.split() if line]


def tokens_to_json(tokens: Sequence[int]) -> str:
    return json.dumps([{"id": t, "name": token_name(t)} for t in tokens])
