"""
Minimal Standard MIDI File reader/writer.

Only what the quantization pipeline needs: note on/off pairing, tempo
meta events and PPQ time division. Everything else is skipped by length.
"""
from __future__ import annotations

import struct
import warnings
from bisect import bisect_right
from collections import defaultdict, deque
from dataclasses import dataclass, field

DEFAULT_TEMPO = 500000  # microseconds per quarter note (120 BPM)


class MidiParseError(ValueError):
    """Malformed SMF data. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedMidiError(MidiParseError):
    pass


class UnclosedNoteWarning(UserWarning):
    pass


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset_sec: float
    duration_sec: float
    pitch: int
    velocity: int = 64
    channel: int = 0

    def __post_init__(self):
        if not self.duration_sec > 0:
            raise ValueError(f"duration must be positive, got {self.duration_sec}")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")
        if not 0 <= self.channel <= 15:
            raise ValueError(f"channel out of range: {self.channel}")
        if self.onset_sec < 0:
            raise ValueError(f"onset must be non-negative, got {self.onset_sec}")

    @property
    def offset_sec(self) -> float:
        return self.onset_sec + self.duration_sec


def note_sort_key(note: NoteEvent):
    return (note.onset_sec, note.pitch, note.channel, note.duration_sec)


@dataclass
class TempoMap:
    """Piecewise-constant tempo as (tick, microseconds per quarter) breakpoints."""

    ppq: int = 480
    entries: list[tuple[int, int]] = field(default_factory=lambda: [(0, DEFAULT_TEMPO)])

    def __post_init__(self):
        if self.ppq <= 0:
            raise ValueError("ppq must be positive")
        cleaned: dict[int, int] = {}
        for tick, tempo in self.entries:
            if tick < 0 or tempo <= 0:
                raise ValueError(f"bad tempo entry {(tick, tempo)}")
            cleaned[tick] = tempo  # last write at a tick wins
        if 0 not in cleaned:
            cleaned[0] = DEFAULT_TEMPO
        self.entries = sorted(cleaned.items())
        # cumulative seconds at every breakpoint
        self._ticks = [t for t, _ in self.entries]
        self._secs = [0.0]
        for (t0, us), (t1, _) in zip(self.entries, self.entries[1:]):
            self._secs.append(self._secs[-1] + (t1 - t0) * us / 1e6 / self.ppq)

    def tick_to_seconds(self, tick: int) -> float:
        i = bisect_right(self._ticks, tick) - 1
        t0, us = self.entries[i]
        return self._secs[i] + (tick - t0) * us / 1e6 / self.ppq


def _read_varlen(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for i in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


def _write_varlen(value: int) -> bytes:
    if value < 0 or value > 0x0FFFFFFF:
        raise ValueError(f"delta time out of range: {value}")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


# data byte counts for channel voice messages, keyed by high nibble
_CHANNEL_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


def _read_track(data: bytes, pos: int, end: int):
    """Decode one MTrk body into ([(abs_tick, kind, payload)], last_tick).

    kind is 'on', 'off' or 'tempo'.
    """
    tick = 0
    status = None
    events = []
    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("event truncated after delta time", pos)
        byte = data[pos]
        if byte & 0x80:
            status = byte
            pos += 1
        elif status is None or status >= 0xF0:
            raise MidiParseError("running status without prior channel status", pos)

        if status == 0xFF:
            if pos >= end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos]
            length, pos = _read_varlen(data, pos + 1, end)
            if pos + length > end:
                raise MidiParseError("meta event overruns track", pos)
            body = data[pos:pos + length]
            pos += length
            if meta_type == 0x51:
                if length != 3:
                    raise MidiParseError("tempo meta event must have length 3", pos - length)
                tempo = int.from_bytes(body, "big")
                if tempo == 0:
                    raise MidiParseError("zero tempo", pos - length)
                events.append((tick, "tempo", tempo))
            elif meta_type == 0x2F:
                return events, tick
            status = None
        elif status in (0xF0, 0xF7):
            length, pos = _read_varlen(data, pos, end)
            if pos + length > end:
                raise MidiParseError("sysex overruns track", pos)
            pos += length
            status = None
        elif status >= 0xF0:
            raise MidiParseError(f"unexpected system status byte 0x{status:02X}", pos - 1)
        else:
            n = _CHANNEL_DATA_LEN[status >> 4]
            if pos + n > end:
                raise MidiParseError("truncated channel message", pos)
            args = data[pos:pos + n]
            if any(b & 0x80 for b in args):
                raise MidiParseError("data byte with high bit set", pos)
            pos += n
            kind = status >> 4
            channel = status & 0x0F
            if kind == 0x9 and args[1] > 0:
                events.append((tick, "on", (channel, args[0], args[1])))
            elif kind == 0x8 or kind == 0x9:
                events.append((tick, "off", (channel, args[0])))
            # control changes (incl. sustain pedal), program changes etc. are ignored
    return events, tick


def _chunks(data: bytes):
    pos = 0
    while pos < len(data):
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        kind = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        start = pos + 8
        if start + length > len(data):
            raise MidiParseError(f"chunk {kind!r} length {length} overruns file", pos + 4)
        yield kind, start, start + length
        pos = start + length


def parse_midi(data: bytes) -> tuple[list[NoteEvent], TempoMap]:
    """Parse an SMF (format 0 or 1, PPQ division) into notes and a tempo map.

    Notes from all tracks are merged and sorted by (onset, pitch, channel).
    Overlapping notes of the same (pitch, channel) are paired first-in
    first-out. Notes left open at end of track are closed at the track's
    last event and reported through an :class:`UnclosedNoteWarning`.
    Zero-length notes are dropped.
    """
    data = bytes(data)
    chunks = _chunks(data)
    try:
        kind, start, end = next(chunks)
    except StopIteration:
        raise MidiParseError("empty file", 0) from None
    if kind != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    if end - start < 6:
        raise MidiParseError("MThd chunk too short", 4)
    fmt, ntracks, division = struct.unpack(">HHH", data[start:start + 6])
    if fmt not in (0, 1):
        raise UnsupportedMidiError(f"SMF format {fmt} not supported", 8)
    if division & 0x8000:
        raise UnsupportedMidiError("SMPTE time division not supported", 12)
    if division == 0:
        raise MidiParseError("zero ticks per quarter", 12)

    tracks = []
    for kind, start, end in chunks:
        if kind == b"MTrk":
            tracks.append(_read_track(data, start, end))
        # unknown chunk types are skipped

    tempo_events = sorted(
        (tick, value) for events, _ in tracks for tick, kind, value in events if kind == "tempo"
    )
    tempo_map = TempoMap(ppq=division, entries=tempo_events)

    raw = []  # (on_tick, off_tick, pitch, velocity, channel)
    unclosed = 0
    for events, last_tick in tracks:
        # events within a track are already in tick order
        open_notes: dict[tuple[int, int], deque] = defaultdict(deque)
        for tick, kind, value in events:
            if kind == "on":
                channel, pitch, velocity = value
                open_notes[(channel, pitch)].append((tick, velocity))
            elif kind == "off":
                channel, pitch = value
                queue = open_notes.get((channel, pitch))
                if queue:
                    on_tick, velocity = queue.popleft()
                    raw.append((on_tick, tick, pitch, velocity, channel))
        for (channel, pitch), queue in open_notes.items():
            for on_tick, velocity in queue:
                unclosed += 1
                raw.append((on_tick, last_tick, pitch, velocity, channel))
    if unclosed:
        warnings.warn(f"{unclosed} unclosed note(s) closed at end of track", UnclosedNoteWarning)

    notes = []
    for on_tick, off_tick, pitch, velocity, channel in raw:
        onset = tempo_map.tick_to_seconds(on_tick)
        duration = tempo_map.tick_to_seconds(off_tick) - onset
        if duration <= 0:
            continue
        notes.append(NoteEvent(onset, duration, pitch, velocity, channel))
    notes.sort(key=note_sort_key)
    return notes, tempo_map


def serialize_midi(notes: list[NoteEvent], tempo_bpm: float = 120.0, ppq: int = 480) -> bytes:
    """Write notes as a format-0 SMF with a single tempo. No running status."""
    if ppq < 24 or ppq > 0x7FFF:
        raise ValueError(f"ppq must be in [24, 32767], got {ppq}")
    if tempo_bpm <= 0:
        raise ValueError("tempo must be positive")
    us_per_quarter = round(60e6 / tempo_bpm)
    if not 0 < us_per_quarter < 1 << 24:
        raise ValueError(f"tempo {tempo_bpm} BPM not representable")
    ticks_per_sec = ppq * 1e6 / us_per_quarter

    events = []  # (tick, order, bytes); note-offs sort before note-ons at the same tick
    for note in notes:
        if not 0 <= note.pitch <= 127:
            raise ValueError(f"pitch out of range: {note.pitch}")
        if not 1 <= note.velocity <= 127:
            raise ValueError(f"velocity out of range: {note.velocity}")
        if not 0 <= note.channel <= 15:
            raise ValueError(f"channel out of range: {note.channel}")
        on = round(note.onset_sec * ticks_per_sec)
        off = max(round(note.offset_sec * ticks_per_sec), on + 1)
        events.append((on, 1, bytes([0x90 | note.channel, note.pitch, note.velocity])))
        events.append((off, 0, bytes([0x80 | note.channel, note.pitch, 0])))
    events.sort(key=lambda e: (e[0], e[1]))

    body = bytearray()
    if events:
        body += b"\x00\xff\x51\x03" + us_per_quarter.to_bytes(3, "big")
    last = 0
    for tick, _, msg in events:
        body += _write_varlen(tick - last) + msg
        last = tick
    body += b"\x00\xff\x2f\x00"

    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ppq)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def read_midi_file(path) -> tuple[list[NoteEvent], TempoMap]:
    with open(path, "rb") as fh:
        return parse_midi(fh.read())


def write_midi_file(path, notes, tempo_bpm=120.0, ppq=480):
    with open(path, "wb") as fh:
        fh.write(serialize_midi(notes, tempo_bpm, ppq))
