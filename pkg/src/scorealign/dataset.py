"""Time-stamped note labels, point-in-time note queries, and segmentation.

Sounding intervals are half-open: a record covers ``start_s <= t < end_s``.
Label vectors are 128 booleans indexed by MIDI note; instruments collapse.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio_io import AudioBuffer
from .score import note_name, parse_note_name

N_NOTES = 128

CSV_COLUMNS = ("start", "end", "instrument", "note", "measure", "beat", "note_value")
EXACT_COLUMNS = ("start_exact", "end_exact")


class LabelFormatError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class LabelRecord:
    start_s: float
    end_s: float
    midi_note: int
    instrument: str = ""
    measure: int = 1
    beat: Fraction = Fraction(1)
    note_value: str = "Other"

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s:
            raise ValueError(
                f"label interval must satisfy 0 <= start < end, "
                f"got [{self.start_s}, {self.end_s})"
            )
        if not 0 <= self.midi_note < N_NOTES:
            raise ValueError(f"MIDI note out of range: {self.midi_note}")

    @property
    def note_name(self) -> str:
        return note_name(self.midi_note)


class LabelSet:
    """Immutable, start-sorted collection of :class:`LabelRecord`."""

    def __init__(self, records: Iterable[LabelRecord] = ()):
        self._records = tuple(sorted(records))

    def __iter__(self) -> Iterator[LabelRecord]:
        return iter(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def __getitem__(self, index):
        return self._records[index]

    def __eq__(self, other):
        if not isinstance(other, LabelSet):
            return NotImplemented
        return self._records == other._records

    def __repr__(self):
        return f"LabelSet({len(self)} records)"

    def arrays(self):
        """``(starts, ends, notes)`` as numpy arrays."""
        starts = np.array([r.start_s for r in self._records], dtype=np.float64)
        ends = np.array([r.end_s for r in self._records], dtype=np.float64)
        notes = np.array([r.midi_note for r in self._records], dtype=np.int64)
        return starts, ends, notes


def label_vector(notes: Iterable[int] = ()) -> np.ndarray:
    vec = np.zeros(N_NOTES, dtype=bool)
    for n in notes:
        vec[n] = True
    return vec


def notes_at(labels: LabelSet, t: float) -> np.ndarray:
    """Label vector of the notes sounding at time ``t``."""
    return notes_at_times(labels, np.array([t]))[0]


def notes_at_times(labels: LabelSet, times) -> np.ndarray:
    """Vectorized :func:`notes_at`; ``times`` must be sorted ascending."""
    times = np.asarray(times, dtype=np.float64)
    out = np.zeros((times.size, N_NOTES), dtype=bool)
    for record in labels:
        lo = np.searchsorted(times, record.start_s, side="left")
        hi = np.searchsorted(times, record.end_s, side="left")
        out[lo:hi, record.midi_note] = True
    return out


@dataclass(frozen=True)
class SegmentSpec:
    window: int = 2048
    hop: int = 512
    start_s: float = 1.0
    end_s: float = 91.0

    def __post_init__(self):
        if self.window <= 0 or self.hop <= 0:
            raise ValueError("window and hop must be positive")
        if self.window % 2:
            raise ValueError("segment window must be even")
        if not self.start_s < self.end_s:
            raise ValueError("start_s must precede end_s")


class SegmentSet:
    """Hop-spaced, label-annotated windows over one recording.

    Indexing yields ``(window_samples, label_vector, midpoint_s)``; the
    :meth:`windows` view exposes all windows without copying.
    """

    def __init__(self, audio: AudioBuffer, centers: np.ndarray, window: int,
                 labels: np.ndarray):
        self.audio = audio
        self.centers = centers
        self.window = window
        self.labels = labels

    def __len__(self) -> int:
        return self.centers.size

    def __getitem__(self, k):
        c = int(self.centers[k])
        half = self.window // 2
        return (
            self.audio.samples[c - half:c + half],
            self.labels[k],
            c / self.audio.sample_rate,
        )

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @property
    def midpoints(self) -> np.ndarray:
        return self.centers / self.audio.sample_rate

    @property
    def hop(self) -> int:
        return int(self.centers[1] - self.centers[0]) if len(self) > 1 else 1

    def windows(self) -> np.ndarray:
        """Read-only ``(N, window)`` strided view of all segment windows."""
        first = int(self.centers[0]) - self.window // 2
        view = sliding_window_view(self.audio.samples, self.window)
        return view[first:first + (len(self) - 1) * self.hop + 1:self.hop]

    def sub(self, mask) -> "SubsetSegments":
        return SubsetSegments(self, np.flatnonzero(mask))


class SubsetSegments:
    """Index-selected view of a :class:`SegmentSet` (e.g. a polyphony split)."""

    def __init__(self, parent: SegmentSet, index: np.ndarray):
        self.parent = parent
        self.index = index
        self.window = parent.window
        self.labels = parent.labels[index]

    def __len__(self) -> int:
        return self.index.size

    def __getitem__(self, k):
        return self.parent[int(self.index[k])]

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @property
    def midpoints(self) -> np.ndarray:
        return self.parent.midpoints[self.index]

    def windows(self) -> np.ndarray:
        return self.parent.windows()[self.index]


def make_segments(audio: AudioBuffer, labels: LabelSet,
                  spec: SegmentSpec = SegmentSpec()) -> SegmentSet:
    """Cut hop-spaced windows centred from ``start_s`` up to ``end_s``."""
    sr = audio.sample_rate
    half = spec.window // 2
    first_center = int(round(spec.start_s * sr))
    last_center = int(np.floor(spec.end_s * sr + 1e-9))
    # valid centers satisfy half <= c <= len - half
    last_center = min(last_center, len(audio) - half)
    lo = max(0, -(-(half - first_center) // spec.hop))
    hi = (last_center - first_center) // spec.hop if last_center >= first_center else -1
    if hi < lo:
        raise ValueError(
            f"no segments: {len(audio)} samples cannot hold a {spec.window}-sample "
            f"window centred in [{spec.start_s}, {spec.end_s}] s"
        )
    centers = first_center + spec.hop * np.arange(lo, hi + 1, dtype=np.int64)
    vectors = notes_at_times(labels, centers / sr)
    return SegmentSet(audio, centers, spec.window, vectors)


# --- CSV -------------------------------------------------------------------


def format_beat(beat) -> str:
    beat = Fraction(beat)
    if beat.denominator == 1:
        return str(beat.numerator)
    # dyadic fractions print exactly as short decimals
    d = beat.denominator
    if d & (d - 1) == 0 and d <= 64:
        return repr(float(beat))
    return f"{beat.numerator}/{beat.denominator}"


def write_labels_csv(labels: LabelSet, stream, exact: bool = True) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_COLUMNS + (EXACT_COLUMNS if exact else ()))
    for r in labels:
        row = [
            f"{r.start_s:.2f}", f"{r.end_s:.2f}", r.instrument, r.note_name,
            r.measure, format_beat(r.beat), r.note_value,
        ]
        if exact:
            row += [repr(float(r.start_s)), repr(float(r.end_s))]
        writer.writerow(row)


def export_csv(labels: LabelSet, path, exact: bool = True) -> None:
    """Write the label table; ``exact`` appends full-precision time columns."""
    with open(path, "w", newline="") as fh:
        write_labels_csv(labels, fh, exact)


def read_labels_csv(stream) -> LabelSet:
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise LabelFormatError("line 1: missing header") from None
    header = [h.strip() for h in header]
    if tuple(header[:len(CSV_COLUMNS)]) != CSV_COLUMNS:
        raise LabelFormatError(f"line 1: unexpected header {header}")
    has_exact = tuple(header[len(CSV_COLUMNS):]) == EXACT_COLUMNS
    width = len(header)
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise LabelFormatError(
                f"line {lineno}: expected {width} fields, got {len(row)}"
            )
        try:
            if has_exact:
                start, end = float(row[7]), float(row[8])
            else:
                start, end = float(row[0]), float(row[1])
        except ValueError:
            raise LabelFormatError(f"line {lineno}: non-numeric time") from None
        try:
            records.append(
                LabelRecord(
                    start_s=start,
                    end_s=end,
                    midi_note=parse_note_name(row[3]),
                    instrument=row[2],
                    measure=int(row[4]),
                    beat=Fraction(row[5]),
                    note_value=row[6],
                )
            )
        except ValueError as exc:
            raise LabelFormatError(f"line {lineno}: {exc}") from None
    return LabelSet(records)


def import_csv(path) -> LabelSet:
    with open(path, newline="") as fh:
        return read_labels_csv(fh)


def labels_to_csv_text(labels: LabelSet, exact: bool = True) -> str:
    buf = io.StringIO()
    write_labels_csv(labels, buf, exact)
    return buf.getvalue()


def score_labels(score) -> LabelSet:
    """Labels taken straight from score timing (no alignment)."""
    return LabelSet(
        LabelRecord(
            start_s=e.onset_seconds,
            end_s=e.offset_seconds,
            midi_note=e.midi_note,
            instrument=e.instrument,
            measure=e.measure,
            beat=e.beat,
            note_value=e.note_value,
        )
        for e in score.events
    )
