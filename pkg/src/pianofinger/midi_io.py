"""Standard MIDI File reading and writing.

Only what the fingering pipeline needs: note on/off pairing, tempo maps and
ticks-per-quarter division. Format 0 and 1 are read; format 0 is written.
"""

from __future__ import annotations

import bisect
import logging
import struct
from dataclasses import dataclass, field
from typing import Iterable

from .errors import (
    MalformedHeader,
    OutOfRange,
    Overlong,
    Truncated,
    TruncatedChunk,
    UnsupportedDivision,
)

log = logging.getLogger(__name__)

LOWEST_PITCH = 21  # A0
HIGHEST_PITCH = 108  # C8
DEFAULT_TEMPO = 500_000  # microseconds per quarter note
MAX_VLQ = 0x0FFFFFFF


def pitch_to_key(pitch: int) -> int:
    """MIDI pitch -> piano key index (A0 = 1 ... C8 = 88)."""
    if not LOWEST_PITCH <= pitch <= HIGHEST_PITCH:
        raise OutOfRange(f"pitch {pitch} is not on an 88-key piano")
    return pitch - 20


def key_to_pitch(key_index: int) -> int:
    if not 1 <= key_index <= 88:
        raise OutOfRange(f"key index {key_index} outside 1..88")
    return key_index + 20


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset_s: float
    offset_s: float
    velocity: int = 64
    key_index: int = field(default=0, compare=False)

    def __post_init__(self):
        key = pitch_to_key(self.pitch)
        if self.key_index not in (0, key):
            raise ValueError(f"key_index {self.key_index} does not match pitch {self.pitch}")
        object.__setattr__(self, "key_index", key)
        if not self.offset_s > self.onset_s:
            raise ValueError(f"note offset {self.offset_s} not after onset {self.onset_s}")
        if self.onset_s < 0:
            raise ValueError("negative onset")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside 1..127")

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s


@dataclass(frozen=True)
class TempoMap:
    """Tick-sorted (tick, microseconds_per_quarter) changes starting at tick 0."""

    ticks_per_quarter: int
    changes: tuple[tuple[int, int], ...] = ((0, DEFAULT_TEMPO),)

    def __post_init__(self):
        if self.ticks_per_quarter <= 0:
            raise ValueError("ticks_per_quarter must be positive")
        changes = list(self.changes)
        if not changes or changes[0][0] != 0:
            changes.insert(0, (0, DEFAULT_TEMPO))
        ticks = [t for t, _ in changes]
        if any(b <= a for a, b in zip(ticks, ticks[1:])):
            raise ValueError("tempo change ticks must be strictly increasing")
        if any(us <= 0 for _, us in changes):
            raise ValueError("tempo must be positive")
        object.__setattr__(self, "changes", tuple(changes))
        # seconds elapsed at each change point
        starts = [0.0]
        for (t0, us), (t1, _) in zip(changes, changes[1:]):
            starts.append(starts[-1] + (t1 - t0) * us / (self.ticks_per_quarter * 1e6))
        object.__setattr__(self, "_starts", tuple(starts))
        object.__setattr__(self, "_ticks", tuple(ticks))

    @classmethod
    def from_events(cls, ticks_per_quarter: int, events: Iterable[tuple[int, int]]) -> "TempoMap":
        # later events at the same tick win
        by_tick: dict[int, int] = {}
        for tick, us in sorted(events, key=lambda e: e[0]):
            by_tick[tick] = us
        return cls(ticks_per_quarter, tuple(sorted(by_tick.items())))

    def seconds(self, tick: int) -> float:
        i = bisect.bisect_right(self._ticks, tick) - 1
        t0, us = self.changes[i]
        return self._starts[i] + (tick - t0) * us / (self.ticks_per_quarter * 1e6)

    def ticks(self, seconds: float) -> int:
        """Nearest tick for a time in seconds (inverse of :meth:`seconds`)."""
        i = bisect.bisect_right(self._starts, seconds) - 1
        i = max(i, 0)
        t0, us = self.changes[i]
        return t0 + round((seconds - self._starts[i]) * self.ticks_per_quarter * 1e6 / us)


@dataclass(frozen=True)
class NoteSequence:
    notes: tuple[NoteEvent, ...] = ()
    ticks_per_quarter: int = 480
    source_format: int = 0
    dropped_out_of_range: int = field(default=0, compare=False)
    unmatched_note_ons: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "notes", tuple(sorted(self.notes, key=_note_key)))

    def __len__(self):
        return len(self.notes)

    def __iter__(self):
        return iter(self.notes)

    def __getitem__(self, i):
        return self.notes[i]


def _note_key(n: NoteEvent):
    return (n.onset_s, n.pitch, n.offset_s)


# ---------------------------------------------------------------------------
# Variable-length quantities
# ---------------------------------------------------------------------------

def decode_vlq(data: bytes, pos: int = 0) -> tuple[int, int]:
    """Decode a variable-length quantity starting at ``data[pos]``.

    Returns ``(value, bytes_consumed)``.
    """
    value = 0
    for i in range(4):
        if pos + i >= len(data):
            raise Truncated("variable-length quantity runs past end of data")
        byte = data[pos + i]
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, i + 1
    raise Overlong("variable-length quantity longer than 4 bytes")


def encode_vlq(value: int) -> bytes:
    if not 0 <= value <= MAX_VLQ:
        raise OutOfRange(f"{value} not representable as a 4-byte VLQ")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------

def _chunks(data: bytes, pos: int):
    while pos < len(data):
        if pos + 8 > len(data):
            raise TruncatedChunk(f"chunk header truncated at byte {pos}")
        kind = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + length]
        if len(body) != length:
            raise TruncatedChunk(f"{kind!r} chunk declares {length} bytes, has {len(body)}")
        yield kind, body
        pos += 8 + length


def _read_track(body: bytes):
    """Yield (tick, status, data1, data2) channel events and ('tempo', us) metas."""
    pos = 0
    tick = 0
    status = None
    while pos < len(body):
        delta, n = decode_vlq(body, pos)
        pos += n
        tick += delta
        if pos >= len(body):
            raise TruncatedChunk("event truncated after delta time")
        byte = body[pos]
        if byte == 0xFF:
            if pos + 2 > len(body):
                raise TruncatedChunk("meta event truncated")
            meta_type = body[pos + 1]
            length, n = decode_vlq(body, pos + 2)
            start = pos + 2 + n
            payload = body[start:start + length]
            if len(payload) != length:
                raise TruncatedChunk("meta event payload truncated")
            pos = start + length
            if meta_type == 0x51 and length == 3:
                yield tick, "tempo", int.from_bytes(payload, "big"), None
            elif meta_type == 0x2F:
                yield tick, "end", None, None
                return
            continue
        if byte in (0xF0, 0xF7):
            length, n = decode_vlq(body, pos + 1)
            pos += 1 + n + length
            status = None
            continue
        if byte & 0x80:
            status = byte
            pos += 1
        elif status is None:
            raise MalformedHeader(f"data byte 0x{byte:02x} without running status")
        kind = status & 0xF0
        size = 1 if kind in (0xC0, 0xD0) else 2
        args = body[pos:pos + size]
        if len(args) != size:
            raise TruncatedChunk("channel event truncated")
        pos += size
        if kind in (0x80, 0x90):
            yield tick, kind | (status & 0x0F), args[0], args[1]


def parse_smf(data: bytes) -> NoteSequence:
    """Parse SMF bytes into a :class:`NoteSequence` of absolute-time notes."""
    if data[:4] != b"MThd":
        raise MalformedHeader("missing MThd chunk")
    chunks = list(_chunks(data, 0))
    header = chunks[0][1]
    if len(header) < 6:
        raise MalformedHeader("MThd chunk shorter than 6 bytes")
    fmt, ntracks, division = struct.unpack(">HHH", header[:6])
    if fmt not in (0, 1):
        raise MalformedHeader(f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise UnsupportedDivision("SMPTE time division is not supported")
    if division == 0:
        raise MalformedHeader("zero ticks per quarter")

    tracks = [list(_read_track(body)) for kind, body in chunks[1:] if kind == b"MTrk"]
    if len(tracks) != ntracks:
        log.warning("header declares %d tracks, found %d", ntracks, len(tracks))
    tempo = TempoMap.from_events(
        division, [(t, us) for tr in tracks for t, kind, us, _ in tr if kind == "tempo"]
    )

    notes = []
    dropped = 0
    dangling = 0
    for track in tracks:
        open_notes: dict[tuple[int, int], tuple[int, int]] = {}
        end_tick = track[-1][0] if track else 0

        def close(key, tick):
            nonlocal dropped
            on_tick, vel = open_notes.pop(key)
            pitch = key[1]
            if not LOWEST_PITCH <= pitch <= HIGHEST_PITCH:
                dropped += 1
                return
            if tick <= on_tick:
                return
            notes.append(NoteEvent(pitch, tempo.seconds(on_tick), tempo.seconds(tick), vel))

        for tick, status, d1, d2 in track:
            if isinstance(status, str):
                continue
            key = (status & 0x0F, d1)
            if status & 0xF0 == 0x90 and d2 > 0:
                if key in open_notes:
                    close(key, tick)
                open_notes[key] = (tick, d2)
            elif key in open_notes:
                close(key, tick)
        for key in sorted(open_notes, key=lambda k: open_notes[k][0]):
            dangling += 1
            close(key, end_tick)

    if dropped:
        log.warning("dropped %d notes outside the piano range", dropped)
    if dangling:
        log.warning("closed %d unmatched note-ons at end of track", dangling)
    return NoteSequence(tuple(notes), division, fmt, dropped, dangling)


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def write_smf(seq: NoteSequence, tempo: int = DEFAULT_TEMPO) -> bytes:
    """Serialize notes as a single-track format-0 SMF at a constant tempo.

    Same-pitch overlaps are written the way :func:`parse_smf` reads them back:
    the earlier note ends where the next one starts.
    """
    tpq = seq.ticks_per_quarter
    if not 0 < tpq < 0x8000:
        raise OutOfRange("ticks_per_quarter must be in 1..32767")
    tmap = TempoMap(tpq, ((0, tempo),))
    spans: dict[int, list[list[int]]] = {}
    for n in seq.notes:
        on = tmap.ticks(n.onset_s)
        spans.setdefault(n.pitch, []).append([on, max(tmap.ticks(n.offset_s), on + 1), n.velocity])
    events = []  # (tick, order, pitch, bytes); note-offs sort before note-ons
    for pitch, group in spans.items():
        group.sort()
        for cur, nxt in zip(group, group[1:]):
            if cur[1] > nxt[0]:
                cur[1] = nxt[0]
        for on, off, vel in group:
            if off > on:
                events.append((on, 1, pitch, bytes((0x90, pitch, vel))))
                events.append((off, 0, pitch, bytes((0x80, pitch, 0))))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    track = bytearray()
    track += b"\x00\xff\x51\x03" + tempo.to_bytes(3, "big")
    last = 0
    for tick, _, _, payload in events:
        track += encode_vlq(tick - last) + payload
        last = tick
    track += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, tpq)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)
