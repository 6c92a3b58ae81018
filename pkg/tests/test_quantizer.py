from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beatquant.beat_grid import BeatGrid, MeasureSpan, seconds_to_beat
from beatquant.midi_io import NoteEvent
from beatquant.quantizer import (
    ScoreFormatError,
    format_score,
    grid_snap_quantize,
    make_segments,
    model_quantize,
    notes_to_score,
    parse_score,
    score_to_notes,
    slice_score,
    split_performance,
)
from beatquant.synth import SynthConfig, generate_corpus, generate_synthetic
from beatquant.tokenizer import QuantizedScore, ScoreNote

UNIT = BeatGrid.regular(4, 4, bpm=60.0)  # beat k at k seconds


def snap_one(onset_beats, dur=0.5):
    return grid_snap_quantize([NoteEvent(onset_beats, dur, 60)], UNIT).notes[0]


@pytest.mark.parametrize("onset, twelfth", [(0.26, 3), (0.125, 2), (0.375, 4), (2.0, 24), (3.0, 36)])
def test_snap_onsets(onset, twelfth):
    assert snap_one(onset).onset_twelfths == twelfth


def test_snap_duration_clamped():
    assert snap_one(0.0, dur=0.01).duration_twelfths == 1
    assert snap_one(0.0, dur=3.9).duration_twelfths == 47
    assert grid_snap_quantize([NoteEvent(0.0, 9.0, 60)], BeatGrid.regular(4, 4, bpm=30.0)).notes[0].duration_twelfths == 48


def test_snap_keeps_measures_and_sorts():
    notes = [NoteEvent(1.0, 0.5, 64), NoteEvent(1.0, 0.5, 60), NoteEvent(0.0, 0.5, 70)]
    score = grid_snap_quantize(notes, UNIT)
    assert [(n.onset_twelfths, n.pitch) for n in score.notes] == [(0, 70), (12, 60), (12, 64)]
    assert score.measures == [MeasureSpan(4 * m, 4) for m in range(4)]


def test_snap_empty():
    assert grid_snap_quantize([], UNIT) == QuantizedScore([], UNIT and [MeasureSpan(4 * m, 4) for m in range(4)])


def test_noiseless_oracle():
    cfg = SynthConfig(seed=8, onset_jitter_sigma_beats=0.0, dur_noise_range=(1.0, 1.0))
    for piece in generate_corpus(cfg, 25):
        assert grid_snap_quantize(piece.performance, piece.grid) == piece.score


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_snap_output_sorted_and_in_range(seed):
    piece = generate_synthetic(SynthConfig(seed=seed, onset_jitter_sigma_beats=0.08))
    score = grid_snap_quantize(piece.performance, piece.grid)
    keys = [(n.onset_twelfths, n.pitch) for n in score.notes]
    assert keys == sorted(keys)
    assert all(0 <= n.onset_twelfths < score.num_beats * 12 for n in score.notes)
    assert len(score.notes) == len(piece.performance)


def test_split_performance_keeps_every_note_once():
    piece = generate_synthetic(SynthConfig(seed=12, onset_jitter_sigma_beats=0.05))
    segments = make_segments(piece.score.measures, 2)
    parts = split_performance(piece.performance, piece.grid, segments)
    assert sum(len(o) for o, _ in parts) == len(piece.performance)
    for seg, (orig, adj) in zip(segments, parts):
        assert len(orig) == len(adj)
        for n in adj:
            assert seg.start_beat <= seconds_to_beat(piece.grid, n.onset_sec) < seg.end_beat


def test_split_early_note_goes_to_next_segment():
    segments = make_segments([MeasureSpan(0, 2), MeasureSpan(2, 2)], 1)
    early = NoteEvent(1.99, 0.5, 60)  # 0.01 beat before the second measure
    parts = split_performance([early], UNIT, segments)
    assert parts[0] == ([], []) and parts[1][0] == [early]
    assert seconds_to_beat(UNIT, parts[1][1][0].onset_sec) >= 2.0


def test_garbage_model_falls_back_everywhere(garbage_model):
    piece = generate_synthetic(SynthConfig(seed=1))
    score, status = model_quantize(garbage_model, piece.performance, piece.grid, n_measures=2)
    assert score == grid_snap_quantize(piece.performance, piece.grid)
    assert len(status) == 4 and all(s.outcome == "fallback" for s in status)


def test_model_quantize_empty_performance(garbage_model):
    grid = BeatGrid.regular(3, 2)
    score, status = model_quantize(garbage_model, [], grid, n_measures=2)
    assert score.notes == []
    assert score.measures == [MeasureSpan(0, 3), MeasureSpan(3, 3)]
    assert len(status) == 1


def test_model_quantize_over_length_source_falls_back(garbage_model):
    model = garbage_model
    model.cfg = replace(model.cfg, max_len=8)
    notes = [NoteEvent(0.1 * k, 0.05, 60 + k) for k in range(10)]
    score, status = model_quantize(model, notes, UNIT, n_measures=4)
    assert status[0].reason == "source too long"
    assert score == grid_snap_quantize(notes, UNIT)


def test_slice_score_local_view():
    score = QuantizedScore([ScoreNote(3, 60, 2), ScoreNote(50, 62, 4)], [MeasureSpan(0, 4), MeasureSpan(4, 4)])
    seg = make_segments(score.measures, 1)[1]
    assert slice_score(score, seg).notes == [ScoreNote(2, 62, 4)]


def test_score_text_round_trip():
    score = QuantizedScore([ScoreNote(0, 60, 6), ScoreNote(6, 64, 6)], [MeasureSpan(0, 2)])
    text = format_score(score)
    assert text == "measure 0 2\n0 60 6\n6 64 6\n"
    assert parse_score(text) == score


@pytest.mark.parametrize("text", ["measure 0\n", "0 60\n", "a b c\n", "0 60 0\n"])
def test_score_text_errors(text):
    with pytest.raises(ScoreFormatError):
        parse_score(text)


def test_score_midi_rendering_round_trip():
    piece = generate_synthetic(SynthConfig(seed=3))
    notes = score_to_notes(piece.score, tempo_bpm=90)
    assert notes_to_score(notes, piece.score.measures, tempo_bpm=90) == piece.score
    assert np.isclose(notes[0].onset_sec, piece.score.notes[0].onset_twelfths * 60 / 90 / 12)
