"""Symbolic scores parsed from Standard MIDI Files.

A :class:`Score` is an ordered list of :class:`NoteEvent` records carrying
both beat-domain timing (straight from the MIDI ticks) and second-domain
timing obtained by integrating the piecewise-constant tempo map.
"""

from __future__ import annotations

import bisect
import logging
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

DEFAULT_TEMPO = 500_000  # microseconds per quarter note, i.e. 120 bpm
DEFAULT_TICKS_PER_BEAT = 480

NOTE_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

# (duration in quarter-note beats, display name), shortest first so that
# ties in the nearest-duration search resolve toward the shorter value.
NOTE_VALUES = (
    (Fraction(1, 4), "Sixteenth"),
    (Fraction(1, 3), "Triplet"),
    (Fraction(1, 2), "Eighth"),
    (Fraction(3, 4), "Dotted Eighth"),
    (Fraction(1), "Quarter"),
    (Fraction(3, 2), "Dotted Quarter"),
    (Fraction(2), "Half"),
    (Fraction(3), "Dotted Half"),
    (Fraction(4), "Whole"),
)
NOTE_VALUE_OTHER = "Other"

# General MIDI program -> instrument names used for label rendering. Programs
# outside this table render as "Program <n>".
INSTRUMENT_NAMES = {
    0: "Piano", 1: "Piano", 2: "Piano", 3: "Piano", 4: "Piano", 5: "Piano",
    6: "Harpsichord",
    40: "Violin", 41: "Viola", 42: "Cello", 43: "String Bass",
    60: "Horn", 68: "Oboe", 70: "Bassoon", 71: "Clarinet", 73: "Flute",
}


class MidiFormatError(ValueError):
    """Malformed or unsupported MIDI data; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


def _check_note(midi_note: int) -> int:
    if not 0 <= midi_note <= 127:
        raise ValueError(f"MIDI note out of range 0..127: {midi_note}")
    return int(midi_note)


def note_name(midi_note: int) -> str:
    """Scientific pitch name with middle C (MIDI 60) as C4, sharps only."""
    n = _check_note(midi_note)
    return f"{NOTE_NAMES[n % 12]}{n // 12 - 1}"


def parse_note_name(name: str) -> int:
    """Inverse of :func:`note_name`; also accepts flats (``Bb3``)."""
    name = name.strip()
    if len(name) < 2:
        raise ValueError(f"bad note name {name!r}")
    letter = name[0].upper()
    rest = name[1:]
    offset = 0
    if rest[:1] == "#":
        offset, rest = 1, rest[1:]
    elif rest[:1] == "b":
        offset, rest = -1, rest[1:]
    try:
        base = NOTE_NAMES.index(letter)
        octave = int(rest)
    except ValueError:
        raise ValueError(f"bad note name {name!r}") from None
    return _check_note((octave + 1) * 12 + base + offset)


def note_frequency(midi_note: int) -> float:
    """Equal-tempered fundamental frequency in Hz (A4 = 440 Hz)."""
    n = _check_note(midi_note)
    return 440.0 * 2.0 ** ((n - 69) / 12.0)


def note_value_name(duration_beats) -> str:
    """Nearest notated value for a duration given in quarter-note beats.

    Durations more than 50% away from every table entry are ``"Other"``.
    """
    d = Fraction(duration_beats)
    best_value, best_name = NOTE_VALUES[0]
    best_gap = abs(d - best_value)
    for value, name in NOTE_VALUES[1:]:
        gap = abs(d - value)
        if gap < best_gap:
            best_value, best_name, best_gap = value, name, gap
    if best_gap > best_value / 2:
        return NOTE_VALUE_OTHER
    return best_name


def instrument_name(program: Optional[int], track: int = 0) -> str:
    if program is None:
        return f"Track {track}"
    return INSTRUMENT_NAMES.get(program, f"Program {program}")


@dataclass(frozen=True)
class NoteEvent:
    midi_note: int
    onset_beats: Fraction
    duration_beats: Fraction
    onset_seconds: float
    duration_seconds: float
    measure: int
    beat: Fraction
    note_value: str
    program: Optional[int] = None
    track: int = 0
    channel: int = 0

    @property
    def offset_seconds(self) -> float:
        return self.onset_seconds + self.duration_seconds

    @property
    def offset_beats(self) -> Fraction:
        return self.onset_beats + self.duration_beats

    @property
    def instrument(self) -> str:
        return instrument_name(self.program, self.track)


@dataclass(frozen=True)
class Score:
    events: tuple = ()
    tempo_map: tuple = ((0, DEFAULT_TEMPO),)
    ticks_per_beat: int = DEFAULT_TICKS_PER_BEAT
    time_signatures: tuple = ((0, 4, 4),)

    def __len__(self) -> int:
        return len(self.events)

    @property
    def end_seconds(self) -> float:
        return max((e.offset_seconds for e in self.events), default=0.0)

    def seconds_at_tick(self, tick) -> float:
        return _TempoIntegrator(self.tempo_map, self.ticks_per_beat).seconds(tick)

    def seconds_at_beat(self, beats) -> float:
        return self.seconds_at_tick(Fraction(beats) * self.ticks_per_beat)


class _TempoIntegrator:
    """Piecewise-constant tempo integration with cumulative segment starts."""

    def __init__(self, tempo_map: Sequence, ticks_per_beat: int):
        self.ticks = [int(t) for t, _ in tempo_map]
        self.tempos = [int(us) for _, us in tempo_map]
        self.tpb = ticks_per_beat
        self.starts = [0.0]
        for k in range(1, len(self.ticks)):
            span = self.ticks[k] - self.ticks[k - 1]
            self.starts.append(
                self.starts[-1] + span * self.tempos[k - 1] / (1e6 * self.tpb)
            )

    def seconds(self, tick) -> float:
        k = bisect.bisect_right(self.ticks, tick) - 1
        k = max(k, 0)
        return self.starts[k] + float(tick - self.ticks[k]) * self.tempos[k] / (
            1e6 * self.tpb
        )


def _normalize_tempo_map(entries: Iterable) -> tuple:
    merged = {}
    for tick, us in sorted(entries, key=lambda e: e[0]):
        if us <= 0:
            raise ValueError(f"non-positive tempo {us} at tick {tick}")
        merged[int(tick)] = int(us)
    if 0 not in merged:
        merged[0] = DEFAULT_TEMPO
    return tuple(sorted(merged.items()))


def _normalize_time_signatures(entries: Iterable) -> tuple:
    merged = {}
    for tick, num, den in sorted(entries, key=lambda e: e[0]):
        merged[int(tick)] = (int(num), int(den))
    if 0 not in merged:
        merged[0] = (4, 4)
    return tuple((t, n, d) for t, (n, d) in sorted(merged.items()))


def _measure_and_beat(tick: int, signatures: tuple, tpb: int):
    """1-based measure number and beat (in the signature's beat unit)."""
    measure = 1
    for k, (sig_tick, num, den) in enumerate(signatures):
        bar_ticks = Fraction(num * 4 * tpb, den)
        next_tick = signatures[k + 1][0] if k + 1 < len(signatures) else None
        if next_tick is not None and tick >= next_tick:
            bars = Fraction(next_tick - sig_tick) / bar_ticks
            # a signature change mid-bar starts a new bar
            measure += int(bars) if bars == int(bars) else int(bars) + 1
            continue
        into = Fraction(tick - sig_tick)
        bars = int(into // bar_ticks)
        rem = into - bars * bar_ticks
        beat = 1 + rem * den / (4 * tpb)
        return measure + bars, beat
    raise AssertionError("unreachable: signatures always start at tick 0")


def build_score(
    notes: Iterable,
    ticks_per_beat: int = DEFAULT_TICKS_PER_BEAT,
    tempo_map: Iterable = ((0, DEFAULT_TEMPO),),
    time_signatures: Iterable = ((0, 4, 4),),
) -> Score:
    """Build a score from ``(midi_note, onset_tick, duration_ticks, program,
    track, channel)`` tuples, deriving every timing and notation field."""
    tempo_map = _normalize_tempo_map(tempo_map)
    signatures = _normalize_time_signatures(time_signatures)
    integ = _TempoIntegrator(tempo_map, ticks_per_beat)
    events = []
    for midi_note, onset, dur, program, track, channel in notes:
        if dur <= 0:
            raise ValueError(f"note {midi_note} at tick {onset} has duration {dur}")
        onset_s = integ.seconds(onset)
        end_s = integ.seconds(onset + dur)
        measure, beat = _measure_and_beat(onset, signatures, ticks_per_beat)
        dur_beats = Fraction(dur, ticks_per_beat)
        events.append(
            NoteEvent(
                midi_note=_check_note(midi_note),
                onset_beats=Fraction(onset, ticks_per_beat),
                duration_beats=dur_beats,
                onset_seconds=onset_s,
                duration_seconds=end_s - onset_s,
                measure=measure,
                beat=beat,
                note_value=note_value_name(dur_beats),
                program=program,
                track=track,
                channel=channel,
            )
        )
    events.sort(key=lambda e: (e.onset_beats, e.midi_note, e.track))
    return Score(tuple(events), tempo_map, ticks_per_beat, signatures)


def score_from_beats(
    notes: Iterable,
    bpm: float = 120.0,
    ticks_per_beat: int = DEFAULT_TICKS_PER_BEAT,
    program: Optional[int] = 0,
) -> Score:
    """Convenience builder from ``(midi_note, onset_beats, duration_beats)``."""
    rows = []
    for midi_note, onset_b, dur_b in notes:
        onset = Fraction(onset_b) * ticks_per_beat
        dur = Fraction(dur_b) * ticks_per_beat
        if onset.denominator != 1 or dur.denominator != 1:
            raise ValueError("beat positions must fall on whole ticks")
        rows.append((midi_note, int(onset), int(dur), program, 0, 0))
    return build_score(
        rows, ticks_per_beat, tempo_map=((0, round(60e6 / bpm)),)
    )


# --- SMF parsing -----------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes, pos: int, end: int):
        self.data = data
        self.pos = pos
        self.end = end

    def byte(self) -> int:
        if self.pos >= self.end:
            raise MidiFormatError("unexpected end of track", self.pos)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise MidiFormatError("unexpected end of track", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiFormatError("variable-length quantity too long", self.pos)


_DATA_LENGTHS = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


def _parse_track(data: bytes, start: int, end: int, track_index: int, sink: dict):
    reader = _Reader(data, start, end)
    tick = 0
    status = None
    open_notes = {}  # (channel, pitch) -> list of (onset_tick, program)
    programs = {}
    ended = False
    while reader.pos < end:
        tick += reader.varlen()
        pos = reader.pos
        first = reader.byte()
        if first == 0xFF:
            meta_type = reader.byte()
            payload = reader.take(reader.varlen())
            if meta_type == 0x51:
                if len(payload) != 3:
                    raise MidiFormatError("tempo event must carry 3 bytes", pos)
                sink["tempo"].append((tick, int.from_bytes(payload, "big")))
            elif meta_type == 0x58:
                if len(payload) < 2:
                    raise MidiFormatError("short time signature event", pos)
                sink["timesig"].append((tick, payload[0], 2 ** payload[1]))
            elif meta_type == 0x2F:
                ended = True
                break
            continue
        if first in (0xF0, 0xF7):
            reader.take(reader.varlen())
            status = None
            continue
        if first & 0x80:
            status = first
            params = []
        else:
            if status is None:
                raise MidiFormatError("data byte without running status", pos)
            params = [first]
        kind, channel = status & 0xF0, status & 0x0F
        if kind not in _DATA_LENGTHS:
            raise MidiFormatError(f"unsupported status byte 0x{status:02X}", pos)
        while len(params) < _DATA_LENGTHS[kind]:
            params.append(reader.byte())

        if kind == 0xC0:
            programs[channel] = params[0]
        elif kind == 0x90 and params[1] > 0:
            key = (channel, params[0])
            open_notes.setdefault(key, []).append((tick, programs.get(channel)))
        elif kind == 0x80 or kind == 0x90:
            key = (channel, params[0])
            queue = open_notes.get(key)
            if not queue:
                logger.debug("note-off without note-on: %s at tick %d", key, tick)
                continue
            onset, program = queue.pop(0)
            sink["notes"].append(
                (params[0], onset, tick - onset, program, track_index, channel)
            )

    if not ended:
        logger.warning("track %d has no end-of-track event", track_index)
    for (channel, pitch), queue in open_notes.items():
        for onset, program in queue:
            logger.warning(
                "unmatched note-on %d in track %d at tick %d; closing at track end",
                pitch, track_index, onset,
            )
            sink["notes"].append(
                (pitch, onset, tick - onset, program, track_index, channel)
            )


def parse_midi(data: bytes) -> Score:
    """Parse a type 0 or type 1 Standard MIDI File."""
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiFormatError("bad header magic", 0)
    (header_len,) = struct.unpack(">I", data[4:8])
    if header_len < 6 or len(data) < 8 + header_len:
        raise MidiFormatError("truncated header chunk", 4)
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise MidiFormatError("SMF type 2 is not supported", 8)
    if fmt not in (0, 1):
        raise MidiFormatError(f"unknown SMF type {fmt}", 8)
    if division & 0x8000:
        raise MidiFormatError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiFormatError("zero ticks per beat", 12)

    sink = {"notes": [], "tempo": [], "timesig": []}
    pos = 8 + header_len
    for track_index in range(ntracks):
        if pos + 8 > len(data):
            raise MidiFormatError(f"missing track {track_index}", pos)
        chunk_id = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body_start = pos + 8
        if body_start + length > len(data):
            raise MidiFormatError(f"track {track_index} truncated", pos)
        if chunk_id == b"MTrk":
            _parse_track(data, body_start, body_start + length, track_index, sink)
        else:
            logger.debug("skipping unknown chunk %r", chunk_id)
        pos = body_start + length

    notes = []
    for row in sink["notes"]:
        if row[2] <= 0:
            logger.warning("dropping zero-length note %d at tick %d", row[0], row[1])
            continue
        notes.append(row)
    return build_score(notes, division, sink["tempo"], sink["timesig"])


# --- SMF writing -----------------------------------------------------------


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _track_chunk(timed: list) -> bytes:
    """``timed`` holds (tick, order, raw_event_bytes); order breaks tick ties."""
    body = bytearray()
    last = 0
    for tick, _order, raw in sorted(timed, key=lambda e: (e[0], e[1])):
        body += _varlen(tick - last) + raw
        last = tick
    body += b"\x00\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def write_midi(score: Score) -> bytes:
    """Serialize a score as a type 1 SMF: a conductor track plus one track
    per (track, channel, program) group."""
    tpb = score.ticks_per_beat
    conductor = []
    for tick, us in score.tempo_map:
        conductor.append((tick, 0, b"\xff\x51\x03" + int(us).to_bytes(3, "big")))
    for tick, num, den in score.time_signatures:
        exponent = den.bit_length() - 1
        conductor.append((tick, 1, bytes([0xFF, 0x58, 0x04, num, exponent, 24, 8])))

    groups = {}
    for event in score.events:
        key = (event.track, event.channel, event.program)
        groups.setdefault(key, []).append(event)
    tracks = [_track_chunk(conductor)]
    for (_track, channel, program), events in sorted(
        groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] or 0)
    ):
        timed = []
        if program is not None:
            timed.append((0, 0, bytes([0xC0 | channel, program])))
        for event in events:
            on = event.onset_beats * tpb
            off = event.offset_beats * tpb
            if on.denominator != 1 or off.denominator != 1:
                raise ValueError("event times must fall on whole ticks")
            timed.append((int(off), 1, bytes([0x80 | channel, event.midi_note, 0])))
            timed.append((int(on), 2, bytes([0x90 | channel, event.midi_note, 80])))
        tracks.append(_track_chunk(timed))
    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(tracks), tpb)
    return header + b"".join(tracks)


def read_midi(path) -> Score:
    with open(path, "rb") as fh:
        return parse_midi(fh.read())
