import pickle
from dataclasses import replace

import numpy as np
import pytest

from beatquant.beat_grid import measures_from_downbeats, seconds_to_beat
from beatquant.synth import JITTER_CLIP, PATTERNS, SynthConfig, generate_corpus, generate_synthetic
from beatquant.tokenizer import SCORE_STEPS

NOISELESS = SynthConfig(onset_jitter_sigma_beats=0.0, dur_noise_range=(1.0, 1.0))


def test_patterns_lie_on_twelfth_grid():
    assert PATTERNS["duple"] == (0, 6) and PATTERNS["sixteenth"] == (0, 3, 6, 9)
    assert PATTERNS["triplet"] == (0, 4, 8) and PATTERNS["rest"] == ()
    assert all(0 <= p < SCORE_STEPS for pat in PATTERNS.values() for p in pat)


@pytest.mark.parametrize("seed", range(5))
def test_noiseless_onsets_are_exact_twelfths(seed):
    piece = generate_synthetic(replace(NOISELESS, seed=seed))
    perf = sorted(piece.performance, key=lambda n: (n.onset_sec, n.pitch))
    beats = seconds_to_beat(piece.grid, np.array([n.onset_sec for n in perf])) * SCORE_STEPS
    np.testing.assert_allclose(beats, np.round(beats), atol=1e-6)
    assert [(int(round(b)), n.pitch) for b, n in zip(beats, perf)] == \
        [(s.onset_twelfths, s.pitch) for s in piece.score.notes]


def test_pieces_are_consistent():
    for piece in generate_corpus(SynthConfig(seed=3), 20):
        assert piece.score.measures == measures_from_downbeats(piece.grid)
        assert len(piece.score.measures) == 8
        assert len(piece.performance) == len(piece.score.notes)
        assert piece.score.measures[0].num_beats == piece.meter[0]
        assert all(1 <= n.duration_twelfths <= 48 for n in piece.score.notes)
        last = piece.score.num_beats * SCORE_STEPS
        assert all(n.onset_twelfths < last for n in piece.score.notes)


def test_corpus_deterministic():
    a = pickle.dumps(generate_corpus(SynthConfig(seed=77), 10))
    b = pickle.dumps(generate_corpus(SynthConfig(seed=77), 10))
    c = pickle.dumps(generate_corpus(SynthConfig(seed=78), 10))
    assert a == b and a != c


def test_jitter_tail_fraction():
    pieces = generate_corpus(SynthConfig(seed=2024), 40)
    errors = []
    for piece in pieces:
        perf = sorted(piece.performance, key=lambda n: (n.onset_sec, n.pitch))
        beats = seconds_to_beat(piece.grid, np.array([n.onset_sec for n in perf]))
        ref = np.array([s.onset_twelfths for s in piece.score.notes]) / SCORE_STEPS
        errors.append(beats - ref)
    errors = np.concatenate(errors)
    assert len(errors) >= 1000
    assert np.abs(errors).max() <= JITTER_CLIP + 1e-9
    tail = np.mean(np.abs(errors) > 1 / 24)
    assert 0.03 <= tail <= 0.06


def test_tempo_walk_stays_in_range():
    for piece in generate_corpus(SynthConfig(seed=5), 20):
        bpm = 60.0 / np.diff(piece.grid.times)
        assert bpm.min() >= 60.0 - 1e-9 and bpm.max() <= 140.0 + 1e-9


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(onset_jitter_sigma_beats=-0.1)
    with pytest.raises(ValueError):
        SynthConfig(tempo_range_bpm=(0.0, 100.0))
    with pytest.raises(ValueError):
        SynthConfig(meters=((4, "swing"),))
