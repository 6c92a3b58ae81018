"""Seeded synthetic performance/score/beat-grid generator."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .beat_grid import BeatGrid, beat_to_seconds, measures_from_downbeats
from .midi_io import NoteEvent, note_sort_key
from .tokenizer import MAX_SDUR, SCORE_STEPS, QuantizedScore, ScoreNote

# onset positions within one beat, in twelfths
PATTERNS = {
    "quarter": (0,),
    "duple": (0, 6),
    "sixteenth": (0, 3, 6, 9),
    "triplet": (0, 4, 8),
    "triplet_long_short": (0, 8),
    "offbeat_sixteenths": (3, 9),
    "offbeat_eighth": (6,),
    "rest": (),
}

# pattern weights per subdivision style; "compound" is 6/8-like meter counted in 2
STYLE_WEIGHTS = {
    "simple": {
        "quarter": 0.2, "duple": 0.25, "sixteenth": 0.15, "triplet": 0.12,
        "triplet_long_short": 0.03, "offbeat_sixteenths": 0.08, "offbeat_eighth": 0.1, "rest": 0.07,
    },
    "compound": {
        "quarter": 0.15, "triplet": 0.5, "triplet_long_short": 0.25, "rest": 0.1,
    },
}

DURATION_SCALES = (0.5, 0.9, 1.0)
JITTER_CLIP = 0.2  # beats


@dataclass
class SynthConfig:
    meters: tuple[tuple[int, str], ...] = ((2, "simple"), (3, "simple"), (4, "simple"), (2, "compound"))
    tempo_range_bpm: tuple[float, float] = (60.0, 140.0)
    onset_jitter_sigma_beats: float = 0.02
    tempo_walk_pct_per_beat: float = 2.0
    polyphony: tuple[int, int] = (1, 2)
    pitch_range: tuple[int, int] = (36, 84)
    measures_per_piece: int = 8
    dur_noise_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0
    pattern_weights: dict[str, dict[str, float]] = field(default_factory=lambda: STYLE_WEIGHTS)

    def __post_init__(self):
        if self.onset_jitter_sigma_beats < 0:
            raise ValueError("jitter sigma must be >= 0")
        lo, hi = self.tempo_range_bpm
        if not 0 < lo <= hi:
            raise ValueError("tempo range must be positive and ordered")
        if not 1 <= self.polyphony[0] <= self.polyphony[1]:
            raise ValueError("bad polyphony range")
        if not 0 <= self.pitch_range[0] <= self.pitch_range[1] <= 127:
            raise ValueError("bad pitch range")
        if self.polyphony[1] > self.pitch_range[1] - self.pitch_range[0] + 1:
            raise ValueError("polyphony exceeds pitch range")
        if not 0 < self.dur_noise_range[0] <= self.dur_noise_range[1]:
            raise ValueError("bad duration noise range")
        if self.measures_per_piece < 1 or not self.meters:
            raise ValueError("need at least one measure and one meter")
        for _, style in self.meters:
            if style not in self.pattern_weights:
                raise ValueError(f"unknown subdivision style {style!r}")


@dataclass
class SynthPiece:
    score: QuantizedScore
    performance: list[NoteEvent]
    grid: BeatGrid
    meter: tuple[int, str]
    beat_patterns: list[str]


def _sample_score(cfg: SynthConfig, rng: np.random.Generator, meter):
    beats_per_measure, style = meter
    n_beats = beats_per_measure * cfg.measures_per_piece
    names = list(cfg.pattern_weights[style])
    weights = np.array([cfg.pattern_weights[style][k] for k in names], dtype=float)
    weights /= weights.sum()
    lo_p, hi_p = cfg.pitch_range
    onsets: list[tuple[int, list[int]]] = []
    patterns = []
    for b in range(n_beats):
        name = names[rng.choice(len(names), p=weights)]
        patterns.append(name)
        for pos in PATTERNS[name]:
            k = int(rng.integers(cfg.polyphony[0], cfg.polyphony[1] + 1))
            pitches = rng.choice(np.arange(lo_p, hi_p + 1), size=k, replace=False)
            onsets.append((b * SCORE_STEPS + pos, sorted(int(p) for p in pitches)))
    end = n_beats * SCORE_STEPS
    notes = []
    for idx, (onset, pitches) in enumerate(onsets):
        nxt = onsets[idx + 1][0] if idx + 1 < len(onsets) else end
        for p in pitches:
            scale = DURATION_SCALES[rng.integers(len(DURATION_SCALES))]
            dur = min(max(round((nxt - onset) * scale), 1), MAX_SDUR)
            notes.append(ScoreNote(onset, p, dur))
    return notes, patterns, n_beats


def _sample_grid(cfg: SynthConfig, rng: np.random.Generator, beats_per_measure: int, n_beats: int):
    lo, hi = cfg.tempo_range_bpm
    tempo = rng.uniform(lo, hi)
    pct = cfg.tempo_walk_pct_per_beat / 100.0
    times = [0.5]
    for _ in range(n_beats - 1):
        times.append(times[-1] + 60.0 / tempo)
        tempo = float(np.clip(tempo * (1.0 + rng.uniform(-pct, pct)), lo, hi))
    flags = [i % beats_per_measure == 0 for i in range(n_beats)]
    return BeatGrid(tuple(times), tuple(flags))


def generate_synthetic(cfg: SynthConfig, rng: np.random.Generator | None = None) -> SynthPiece:
    """Sample one piece: score on the 1/12 grid, a beat grid, and a performance of it."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    meter = cfg.meters[int(rng.integers(len(cfg.meters)))]
    notes, patterns, n_beats = _sample_score(cfg, rng, meter)
    grid = _sample_grid(cfg, rng, meter[0], max(n_beats, 2))
    score = QuantizedScore(notes, measures_from_downbeats(grid))

    sigma = cfg.onset_jitter_sigma_beats
    jitter = np.clip(rng.normal(0.0, sigma, len(score.notes)), -JITTER_CLIP, JITTER_CLIP) if sigma > 0 \
        else np.zeros(len(score.notes))
    d_lo, d_hi = cfg.dur_noise_range
    factors = rng.uniform(d_lo, d_hi, len(score.notes)) if d_lo != d_hi else np.full(len(score.notes), d_lo)
    velocities = rng.integers(50, 101, len(score.notes))

    perf = []
    for note, j, f, v in zip(score.notes, jitter, factors, velocities):
        on_beats = note.onset_twelfths / SCORE_STEPS + float(j)
        dur_beats = note.duration_twelfths / SCORE_STEPS * float(f)
        on_sec = beat_to_seconds(grid, on_beats)
        off_sec = beat_to_seconds(grid, on_beats + dur_beats)
        perf.append(NoteEvent(on_sec, off_sec - on_sec, note.pitch, int(v)))
    perf.sort(key=note_sort_key)
    return SynthPiece(score, perf, grid, meter, patterns)


def generate_corpus(cfg: SynthConfig, n_pieces: int) -> list[SynthPiece]:
    """Pieces with independent per-piece generators spawned from ``cfg.seed``."""
    children = np.random.SeedSequence(cfg.seed).spawn(n_pieces)
    return [generate_synthetic(cfg, np.random.default_rng(s)) for s in children]
