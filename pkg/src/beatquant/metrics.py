"""
Score-level evaluation.

``onset_f1`` is the confusion-style measure: a predicted note counts as a hit
when pitch and quantized onset agree exactly; note-value accuracy is the share
of hits whose duration also agrees.

``muster_rates`` is a MUSTER-style error-rate computation: notes are aligned by
pitch LCS, then onset (inter-onset interval) and offset (duration) errors are
counted after choosing the global tempo scale that best explains the
prediction.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from fractions import Fraction

from .tokenizer import SCORE_STEPS, QuantizedScore, ScoreNote

SCALE_CANDIDATES = tuple(
    Fraction(x) for x in ("1/4", "1/3", "1/2", "2/3", "1", "3/2", "2", "3", "4")
)
TOLERANCE_BEATS = Fraction(1, 24)


@dataclass
class EvalReport:
    precision: float
    recall: float
    onset_f1: float
    note_value_accuracy: float
    matched_count: int
    pred_count: int
    ref_count: int

    def as_dict(self):
        return asdict(self)


@dataclass
class MusterReport:
    epsilon_onset: float
    epsilon_offset: float
    missing_rate: float
    extra_rate: float
    chosen_scale: Fraction
    matched_count: int
    no_matches: bool = False

    def as_dict(self):
        d = asdict(self)
        d["chosen_scale"] = str(self.chosen_scale)
        return d


def _notes(score) -> list[ScoreNote]:
    notes = score.notes if isinstance(score, QuantizedScore) else score
    return sorted(notes)


def f1_from_counts(matched: int, n_pred: int, n_ref: int) -> tuple[float, float, float]:
    p = matched / n_pred if n_pred else 0.0
    r = matched / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def onset_f1(pred, ref) -> tuple[EvalReport, list[tuple[ScoreNote, ScoreNote]]]:
    """Greedy one-to-one matching on (onset, pitch); both inputs walked in sorted order."""
    pred_notes, ref_notes = _notes(pred), _notes(ref)
    pool: dict[tuple[int, int], list[ScoreNote]] = defaultdict(list)
    for note in ref_notes:
        pool[(note.onset_twelfths, note.pitch)].append(note)
    used: dict[tuple[int, int], int] = defaultdict(int)
    pairs = []
    for note in pred_notes:
        key = (note.onset_twelfths, note.pitch)
        k = used[key]
        if k < len(pool[key]):
            pairs.append((note, pool[key][k]))
            used[key] = k + 1
    p, r, f = f1_from_counts(len(pairs), len(pred_notes), len(ref_notes))
    same_value = sum(a.duration_twelfths == b.duration_twelfths for a, b in pairs)
    accuracy = same_value / len(pairs) if pairs else 1.0
    report = EvalReport(p, r, f, accuracy, len(pairs), len(pred_notes), len(ref_notes))
    return report, pairs


def lcs_align(a: list, b: list) -> list[tuple[int, int]]:
    """Index pairs of a longest common subsequence of ``a`` and ``b``."""
    n, m = len(a), len(b)
    # strip common prefix/suffix; identical inputs stay linear
    lo = 0
    while lo < min(n, m) and a[lo] == b[lo]:
        lo += 1
    hi = 0
    while hi < min(n, m) - lo and a[n - 1 - hi] == b[m - 1 - hi]:
        hi += 1
    core_a, core_b = a[lo:n - hi], b[lo:m - hi]
    p, q = len(core_a), len(core_b)
    table = [[0] * (q + 1) for _ in range(p + 1)]
    for i in range(p - 1, -1, -1):
        row, below = table[i], table[i + 1]
        x = core_a[i]
        for j in range(q - 1, -1, -1):
            if x == core_b[j]:
                row[j] = below[j + 1] + 1
            else:
                row[j] = max(below[j], row[j + 1])
    pairs = [(k, k) for k in range(lo)]
    i = j = 0
    while i < p and j < q:
        if core_a[i] == core_b[j]:
            pairs.append((lo + i, lo + j))
            i += 1
            j += 1
        elif table[i + 1][j] >= table[i][j + 1]:
            i += 1
        else:
            j += 1
    pairs += [(n - hi + k, m - hi + k) for k in range(hi)]
    return pairs


def _count_errors(values_pred, values_ref, scale) -> int:
    return sum(abs(scale * vp - vr) > TOLERANCE_BEATS for vp, vr in zip(values_pred, values_ref))


def muster_rates(pred, ref) -> MusterReport:
    pred_notes, ref_notes = _notes(pred), _notes(ref)
    pairs = lcs_align([n.pitch for n in pred_notes], [n.pitch for n in ref_notes])
    matched = len(pairs)
    missing = 100.0 * (len(ref_notes) - matched) / len(ref_notes) if ref_notes else 0.0
    extra = 100.0 * (len(pred_notes) - matched) / len(pred_notes) if pred_notes else 0.0
    if not matched:
        return MusterReport(0.0, 0.0, missing, extra, Fraction(1), 0, no_matches=True)

    def beats(x):
        return Fraction(x, SCORE_STEPS)

    aligned = [(pred_notes[i], ref_notes[j]) for i, j in pairs]
    # first aligned pair is the anchor and never an onset error
    ioi_p = [beats(b.onset_twelfths - a.onset_twelfths) for (a, _), (b, _) in zip(aligned, aligned[1:])]
    ioi_r = [beats(b.onset_twelfths - a.onset_twelfths) for (_, a), (_, b) in zip(aligned, aligned[1:])]
    dur_p = [beats(p.duration_twelfths) for p, _ in aligned]
    dur_r = [beats(r.duration_twelfths) for _, r in aligned]

    # ties resolved toward the scale closest to 1
    candidates = sorted(SCALE_CANDIDATES, key=lambda s: (abs(math.log(s)), s))
    scale = min(candidates, key=lambda s: _count_errors(ioi_p, ioi_r, s))
    onset_errors = _count_errors(ioi_p, ioi_r, scale)
    offset_errors = _count_errors(dur_p, dur_r, scale)
    return MusterReport(
        100.0 * onset_errors / matched,
        100.0 * offset_errors / matched,
        missing,
        extra,
        scale,
        matched,
    )
