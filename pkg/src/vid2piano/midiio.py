"""Standard MIDI File reading and writing.

Reads SMF type 0/1 into frame-indexed note events (25 fps) and writes
type 0 files back. Tick/frame conversion uses exact rational arithmetic
so writer output re-reads to the identical event list.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction

from .rollcore import DEFAULT_VELOCITY, FPS, NoteEvent

TICKS_PER_QUARTER = 480
DEFAULT_TEMPO_BPM = 80.0
_US_PER_MINUTE = 60_000_000


class MidiParseError(ValueError):
    """Malformed SMF input; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MidiWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MidiDocument:
    """Note events plus the SMF timing metadata they were read with."""

    events: tuple[NoteEvent, ...]
    tempo_bpm: float = DEFAULT_TEMPO_BPM
    ticks_per_quarter: int = TICKS_PER_QUARTER

    def __post_init__(self):
        if self.tempo_bpm <= 0:
            raise ValueError(f"tempo_bpm must be positive, got {self.tempo_bpm}")
        if self.ticks_per_quarter <= 0:
            raise ValueError(f"ticks_per_quarter must be positive, got {self.ticks_per_quarter}")
        object.__setattr__(self, "events", tuple(self.events))

    @property
    def num_frames(self) -> int:
        return max((ev.offset_frame for ev in self.events), default=0)


def _round_frac(x: Fraction) -> int:
    # round half up, deterministically
    return int((x + Fraction(1, 2)).__floor__())


def _ticks_per_frame(tempo_us: int, tpq: int) -> Fraction:
    # ticks/sec = tpq * 1e6 / tempo_us; divide by fps for ticks per frame
    return Fraction(tpq * 1_000_000, tempo_us) / Fraction(FPS)


class _Cursor:
    """Byte reader that tracks its offset for error reporting."""

    def __init__(self, data: bytes, start: int = 0, end: int | None = None):
        self.data = data
        self.pos = start
        self.end = len(data) if end is None else end

    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, n: int) -> bytes:
        if self.remaining() < n:
            raise MidiParseError(
                f"unexpected end of data, needed {n} bytes", self.pos
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        b = self.take(2)
        return (b[0] << 8) | b[1]

    def u32(self) -> int:
        b = self.take(4)
        return (b[0] << 24) | (b[1] << 16) | (b[2] << 8) | b[3]

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            byte = self.u8()
            value = (value << 7) | (byte & 0x7F)
            if not byte & 0x80:
                return value
        raise MidiParseError("variable-length quantity longer than 4 bytes", self.pos)


@dataclass
class _RawNote:
    pitch: int
    velocity: int
    on_tick: int
    off_tick: int


def _parse_track(cur: _Cursor, track_idx: int) -> tuple[list[_RawNote], list[tuple[int, int]]]:
    """Parse one MTrk chunk into raw notes and (tick, tempo_us) changes."""
    notes: list[_RawNote] = []
    tempos: list[tuple[int, int]] = []
    open_notes: dict[int, list[_RawNote]] = {}
    tick = 0
    status = None

    def close(pitch: int, off_tick: int) -> None:
        stack = open_notes.get(pitch)
        if stack:
            note = stack.pop(0)
            note.off_tick = off_tick
            notes.append(note)

    while cur.remaining() > 0:
        tick += cur.varlen()
        byte = cur.u8()
        if byte & 0x80:
            status = byte
        elif status is None:
            raise MidiParseError(f"data byte {byte:#x} with no running status", cur.pos - 1)
        else:
            cur.pos -= 1  # running status: re-read as data
        if status == 0xFF:
            meta_type = cur.u8()
            length = cur.varlen()
            payload = cur.take(length)
            if meta_type == 0x51:
                if length != 3:
                    raise MidiParseError("set-tempo meta event must be 3 bytes", cur.pos)
                tempos.append((tick, (payload[0] << 16) | (payload[1] << 8) | payload[2]))
            elif meta_type == 0x2F:
                break
            status = None  # meta/sysex cancel running status
        elif status in (0xF0, 0xF7):
            cur.take(cur.varlen())
            status = None
        elif status >= 0xF0:
            raise MidiParseError(f"unsupported system message {status:#x}", cur.pos - 1)
        else:
            kind = status & 0xF0
            if kind in (0xC0, 0xD0):  # program change / channel pressure: 1 data byte
                cur.take(1)
                continue
            d1 = cur.u8()
            d2 = cur.u8()
            if d1 & 0x80 or d2 & 0x80:
                raise MidiParseError("data byte has high bit set", cur.pos - 1)
            if kind == 0x90 and d2 > 0:
                open_notes.setdefault(d1, []).append(_RawNote(d1, d2, tick, -1))
            elif kind == 0x80 or (kind == 0x90 and d2 == 0):
                close(d1, tick)

    dangling = sum(len(stack) for stack in open_notes.values())
    if dangling:
        warnings.warn(
            f"track {track_idx}: {dangling} unmatched note-on(s) closed at track end",
            MidiWarning,
        )
        for stack in open_notes.values():
            for note in list(stack):
                note.off_tick = tick
                notes.append(note)
    return notes, tempos


def read_midi_file(data: bytes) -> MidiDocument:
    """Parse an SMF type 0/1 byte string into a 25 fps MidiDocument.

    Note-on with velocity 0 counts as note-off. The first set-tempo event
    fixes the tick-to-frame mapping; later tempo changes are ignored with
    a warning.
    """
    cur = _Cursor(data)
    if cur.take(4) != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    header_len = cur.u32()
    if header_len < 6:
        raise MidiParseError(f"header chunk too short ({header_len} bytes)", cur.pos - 4)
    fmt = cur.u16()
    num_tracks = cur.u16()
    division = cur.u16()
    cur.take(header_len - 6)
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division not supported", 12)
    if division == 0:
        raise MidiParseError("zero ticks per quarter", 12)

    all_notes: list[_RawNote] = []
    all_tempos: list[tuple[int, int]] = []
    for track_idx in range(num_tracks):
        if cur.take(4) != b"MTrk":
            raise MidiParseError(f"expected MTrk chunk for track {track_idx}", cur.pos - 4)
        track_len = cur.u32()
        if track_len > cur.remaining():
            raise MidiParseError(
                f"track {track_idx} declares {track_len} bytes but only "
                f"{cur.remaining()} remain",
                cur.pos - 4,
            )
        track_cur = _Cursor(data, cur.pos, cur.pos + track_len)
        notes, tempos = _parse_track(track_cur, track_idx)
        all_notes.extend(notes)
        all_tempos.extend(tempos)
        cur.pos += track_len

    all_tempos.sort()
    tempo_us = all_tempos[0][1] if all_tempos else round(_US_PER_MINUTE / 120.0)
    if len({us for _, us in all_tempos}) > 1:
        warnings.warn("multiple tempo changes; using the first for frame timing", MidiWarning)

    frames_per_tick = 1 / _ticks_per_frame(tempo_us, division)
    events = []
    dropped = 0
    for note in sorted(all_notes, key=lambda n: (n.on_tick, n.pitch)):
        onset = _round_frac(note.on_tick * frames_per_tick)
        offset = _round_frac(note.off_tick * frames_per_tick)
        if offset <= onset:
            dropped += 1
            continue
        events.append(
            NoteEvent(note.pitch, onset, offset, velocity=max(1, min(127, note.velocity)))
        )
    if dropped:
        warnings.warn(f"dropped {dropped} note(s) shorter than one frame", MidiWarning)
    events.sort(key=lambda ev: (ev.onset_frame, ev.pitch))
    return MidiDocument(tuple(events), _US_PER_MINUTE / tempo_us, division)


def _encode_varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_midi_file(doc: MidiDocument) -> bytes:
    """Emit an SMF type 0 file; tick times convert exactly back to frames."""
    tempo_us = round(_US_PER_MINUTE / doc.tempo_bpm)
    tpf = _ticks_per_frame(tempo_us, doc.ticks_per_quarter)

    # (tick, order, pitch, velocity): offs (order 0) before ons (order 1) at a tick
    messages: list[tuple[int, int, int, int]] = []
    for ev in doc.events:
        if not 0 <= ev.pitch <= 127:
            raise ValueError(f"pitch {ev.pitch} outside MIDI range")
        messages.append((_round_frac(ev.onset_frame * tpf), 1, ev.pitch, ev.velocity))
        messages.append((_round_frac(ev.offset_frame * tpf), 0, ev.pitch, 0))
    messages.sort()

    track = bytearray()
    track += _encode_varlen(0) + bytes(
        [0xFF, 0x51, 0x03, tempo_us >> 16 & 0xFF, tempo_us >> 8 & 0xFF, tempo_us & 0xFF]
    )
    last_tick = 0
    for tick, order, pitch, velocity in messages:
        track += _encode_varlen(tick - last_tick)
        status = 0x90 if order else 0x80
        track += bytes([status, pitch, velocity])
        last_tick = tick
    track += _encode_varlen(0) + bytes([0xFF, 0x2F, 0x00])

    header = b"MThd" + (6).to_bytes(4, "big")
    header += (0).to_bytes(2, "big") + (1).to_bytes(2, "big")
    header += doc.ticks_per_quarter.to_bytes(2, "big")
    return header + b"MTrk" + len(track).to_bytes(4, "big") + bytes(track)


def document_from_events(
    events: list[NoteEvent],
    tempo_bpm: float = DEFAULT_TEMPO_BPM,
) -> MidiDocument:
    """Wrap pipeline events with the default emission metadata (tempo 80)."""
    return MidiDocument(tuple(events), tempo_bpm, TICKS_PER_QUARTER)
