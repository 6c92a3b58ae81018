"""Beat-aware rhythm quantization of expressive MIDI performances."""
from .beat_grid import BeatGrid, MeasureSpan, beat_to_seconds, measures_from_downbeats, parse_beat_annotations, seconds_to_beat
from .midi_io import NoteEvent, TempoMap, parse_midi, serialize_midi
from .tokenizer import QuantizedScore, ScoreNote, Segment, decode_score_tokens, encode_performance, encode_score

__version__ = "0.1.0"
