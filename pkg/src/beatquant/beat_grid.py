"""Beat/downbeat annotations and the seconds <-> beat-position mapping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


class BeatFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class MeasureSpan:
    start_beat: int
    num_beats: int

    def __post_init__(self):
        if self.num_beats < 1:
            raise ValueError("a measure needs at least one beat")

    @property
    def end_beat(self) -> int:
        """One past the last beat of the measure."""
        return self.start_beat + self.num_beats


@dataclass(frozen=True)
class BeatGrid:
    """Beat instants in seconds plus downbeat flags; index i is beat i.

    A grid without any downbeat gets beat 0 promoted to a virtual downbeat.
    """

    times: tuple[float, ...]
    downbeats: tuple[bool, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        flags = tuple(bool(f) for f in self.downbeats)
        if len(times) != len(flags):
            raise ValueError("times and downbeat flags differ in length")
        if len(times) < 2:
            raise ValueError("a beat grid needs at least 2 beats")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("beat times must be strictly increasing")
        if not any(flags):
            flags = (True,) + flags[1:]
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "downbeats", flags)
        object.__setattr__(self, "_t", np.asarray(times))

    @classmethod
    def regular(cls, beats_per_measure: int, n_measures: int, bpm: float = 120.0, start: float = 0.0):
        n = beats_per_measure * n_measures
        period = 60.0 / bpm
        return cls(
            tuple(start + i * period for i in range(n)),
            tuple(i % beats_per_measure == 0 for i in range(n)),
        )

    def __len__(self) -> int:
        return len(self.times)

    def seconds_to_beat(self, t):
        return seconds_to_beat(self, t)

    def beat_to_seconds(self, b):
        return beat_to_seconds(self, b)


def parse_beat_annotations(text: str | Iterable[str]) -> BeatGrid:
    """Read an ASAP-style annotation TSV: ``time<TAB>time<TAB>label``.

    Labels starting with ``db`` mark downbeats, ``b`` plain beats.
    ``#`` lines and blank lines are skipped.
    """
    lines = text.splitlines() if isinstance(text, str) else text
    times, flags = [], []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 3:
            raise BeatFormatError(f"expected 3 tab-separated columns, got {len(cols)}", lineno)
        try:
            t = float(cols[0])
        except ValueError:
            raise BeatFormatError(f"bad time {cols[0]!r}", lineno) from None
        if not np.isfinite(t):
            raise BeatFormatError(f"non-finite time {cols[0]!r}", lineno)
        label = cols[2].strip()
        if label.startswith("db"):
            flags.append(True)
        elif label.startswith("b"):
            flags.append(False)
        else:
            raise BeatFormatError(f"unknown label {label!r}", lineno)
        if times and t <= times[-1]:
            raise BeatFormatError(f"beat time {t} not after previous {times[-1]}", lineno)
        times.append(t)
    if len(times) < 2:
        raise BeatFormatError(f"need at least 2 beats, found {len(times)}")
    return BeatGrid(tuple(times), tuple(flags))


def format_beat_annotations(grid: BeatGrid) -> str:
    return "".join(
        f"{t:.6f}\t{t:.6f}\t{'db' if db else 'b'}\n" for t, db in zip(grid.times, grid.downbeats)
    )


def seconds_to_beat(grid: BeatGrid, t):
    """Piecewise-linear beat position of time ``t`` (scalar or array).

    Outside the annotated range the first/last inter-beat interval is used.
    """
    times = grid._t
    x = np.asarray(t, dtype=float)
    n = len(times)
    i = np.clip(np.searchsorted(times, x, side="right") - 1, 0, n - 2)
    pos = i + (x - times[i]) / (times[i + 1] - times[i])
    return float(pos) if pos.ndim == 0 else pos


def beat_to_seconds(grid: BeatGrid, b):
    """Inverse of :func:`seconds_to_beat`."""
    times = grid._t
    x = np.asarray(b, dtype=float)
    n = len(times)
    i = np.clip(np.floor(x).astype(int), 0, n - 2)
    sec = times[i] + (x - i) * (times[i + 1] - times[i])
    return float(sec) if sec.ndim == 0 else sec


def measures_from_downbeats(grid: BeatGrid) -> list[MeasureSpan]:
    """Split beat indices into measures at downbeats; leading beats form a pickup."""
    starts = [i for i, db in enumerate(grid.downbeats) if db]
    if starts[0] != 0:
        starts.insert(0, 0)
    ends = starts[1:] + [len(grid)]
    return [MeasureSpan(s, e - s) for s, e in zip(starts, ends)]
