"""Synthetic performances with known fingering.

A piece is a pair of monophonic lines, one per hand, played in separate
registers. Each hand's position follows a seeded random walk over white keys;
every note picks a finger and the nearest key under it, and the hand shifts
so that finger sits exactly on the key. Neighbouring fingers are
``hand_span_keys / 4`` white keys apart, so thumb to pinky spans the hand,
with the thumb nearest the middle of the keyboard.

Rendering produces the three inputs of the extraction pipeline: an SMF, a
pose stream and a WAV whose only sound is a click at the first onset.

All randomness uses ``numpy.random.Generator(PCG64(seed))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .alignment import AudioClip, write_wav
from .errors import BadConfig
from .keyboard import KeyboardGeometry
from .midi_io import DEFAULT_TEMPO, NoteEvent, NoteSequence, TempoMap, write_smf
from .pose import LEFT, RIGHT, Fingertip, HandPose, PoseFrame, PoseStream, dump_pose_stream, frame_time
from .press import GoldNote, dump_gold_tsv, finger_id
from .tagger import HandPiece, HmmModel, N_LABELS, interval_class

TICKS_PER_QUARTER = 480
# white-key ordinals each hand's anchor may occupy; with the default span the
# two hands stay more than 8 key widths apart
HAND_ZONES = {LEFT: (4.0, 13.0), RIGHT: (38.0, 47.0)}
ANCHOR_STEPS = (-2, -1, 1, 2)


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def default_geometry() -> KeyboardGeometry:
    return KeyboardGeometry.from_band(40.0, 1240.0, 220.0, 340.0, 1280, 360)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    n_notes: int = 200
    fps: float = 25.0
    note_duration_s: tuple[float, float] = (0.1, 0.4)
    gap_s: tuple[float, float] = (0.0, 0.2)
    keypoint_noise: float = 0.0  # std of the pressing fingertip, in white-key widths
    drop_prob: float = 0.0
    drop_hands: tuple[str, ...] = (LEFT, RIGHT)
    true_offset_s: float = 0.0
    hand_span_keys: int = 8
    lead_in_s: float = 1.0
    tail_s: float = 1.0
    sample_rate: int = 16000

    def __post_init__(self):
        problems = []
        if self.n_notes < 0:
            problems.append("n_notes must be non-negative")
        if not self.fps > 0:
            problems.append("fps must be positive")
        lo, hi = self.note_duration_s
        if not 0 < lo <= hi:
            problems.append("note_duration_s must be a positive range")
        if self.fps > 0 and lo < 1.0 / self.fps:
            problems.append("shortest note must last at least one frame")
        if not 0 <= self.gap_s[0] <= self.gap_s[1]:
            problems.append("gap_s must be a non-negative range")
        if self.keypoint_noise < 0:
            problems.append("keypoint_noise must be >= 0")
        if not 0 <= self.drop_prob <= 1:
            problems.append("drop_prob must be in [0, 1]")
        if any(h not in (LEFT, RIGHT) for h in self.drop_hands):
            problems.append("drop_hands must contain only 'L'/'R'")
        if self.hand_span_keys < 5:
            problems.append("hand_span_keys must cover at least the five fingers")
        if self.lead_in_s < abs(self.true_offset_s):
            problems.append("lead_in_s must exceed |true_offset_s| so video time stays >= 0")
        if self.sample_rate <= 0:
            problems.append("sample_rate must be positive")
        if problems:
            raise BadConfig("; ".join(problems))

    @property
    def finger_spacing(self) -> float:
        """Distance between neighbouring fingertips, in white-key widths."""
        return self.hand_span_keys / 4.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SimPiece:
    notes: NoteSequence
    gold: tuple[int, ...]  # finger id per note, aligned with notes.notes
    hands: tuple[str, ...]
    anchors_x: tuple[float, ...]  # hand anchor (finger 3 position) while each note sounds
    config: SimConfig = field(default_factory=SimConfig)

    def gold_notes(self) -> list[GoldNote]:
        return [GoldNote(n.onset_s, n.pitch, f) for n, f in zip(self.notes, self.gold)]

    def hand_pieces(self, piece_id: str = "sim") -> list[HandPiece]:
        out = []
        for hand in (LEFT, RIGHT):
            idx = [i for i, h in enumerate(self.hands) if h == hand]
            if not idx:
                continue
            notes = [self.notes[i] for i in idx]
            fingers = [self.gold[i] - (0 if hand == LEFT else 5) for i in idx]
            out.append(HandPiece(hand, [n.pitch for n in notes], [fingers], piece_id,
                                 [n.onset_s for n in notes], [n.offset_s for n in notes]))
        return out


def _direction(hand: str) -> int:
    # thumbs face the middle of the keyboard
    return 1 if hand == RIGHT else -1


def finger_x(anchor_x: float, hand: str, finger: int, spacing_px: float) -> float:
    return anchor_x + _direction(hand) * (finger - 3) * spacing_px


def generate_piece(config: SimConfig, geometry: KeyboardGeometry | None = None) -> SimPiece:
    geometry = geometry or default_geometry()
    rng = rng_for(config.seed)
    tmap = TempoMap(TICKS_PER_QUARTER, ((0, DEFAULT_TEMPO),))
    w = geometry.white_width
    spread = config.finger_spacing
    lead = tmap.ticks(config.lead_in_s)
    cursor = {LEFT: lead, RIGHT: lead}
    anchor = {h: float(rng.integers(int(lo), int(hi) + 1)) for h, (lo, hi) in HAND_ZONES.items()}
    first = True
    rows = []
    for _ in range(config.n_notes):
        hand = LEFT if rng.random() < 0.5 else RIGHT
        lo, hi = HAND_ZONES[hand]
        step = ANCHOR_STEPS[rng.integers(len(ANCHOR_STEPS))]
        a = anchor[hand] + step
        if not lo <= a <= hi:
            a = anchor[hand] - step
        finger = int(rng.integers(1, N_LABELS + 1))
        offset = _direction(hand) * (finger - 3) * spread
        target = geometry.white_x(a + offset + rng.uniform(-0.5, 0.5))
        key = geometry.key(geometry.nearest_key(target))
        anchor_x = key.x_center - offset * w
        anchor[hand] = (anchor_x - geometry.x_left) / w - 0.5

        gap = 0 if first else tmap.ticks(rng.uniform(*config.gap_s))
        on = cursor[hand] + gap
        if first:
            first = False
        off = on + max(1, tmap.ticks(rng.uniform(*config.note_duration_s)))
        cursor[hand] = off
        rows.append((on, off, key.midi_pitch, hand, finger_id(hand, finger), anchor_x,
                     int(rng.integers(40, 110))))

    rows.sort(key=lambda r: (r[0], r[2]))
    notes = [NoteEvent(p, tmap.seconds(on), tmap.seconds(off), vel)
             for on, off, p, _, _, _, vel in rows]
    seq = NoteSequence(tuple(notes), TICKS_PER_QUARTER, 0)
    return SimPiece(seq, tuple(r[4] for r in rows), tuple(r[3] for r in rows),
                    tuple(r[5] for r in rows), config)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _hand_timeline(piece: SimPiece, hand: str, offset_s: float):
    """Video-time spans and anchors of one hand's notes."""
    return [(n.onset_s + offset_s, n.offset_s + offset_s, piece.gold[i], piece.anchors_x[i], n)
            for i, n in enumerate(piece.notes) if piece.hands[i] == hand]


def _anchor_at(timeline, t: float):
    """(anchor_x, pressing finger id or None, pressed note or None) at video time t."""
    prev = None
    for start, end, fid, ax, note in timeline:
        if start <= t < end:
            return ax, fid, note
        if t < start:
            if prev is None:
                return ax, None, None
            p_end, p_ax = prev
            frac = (t - p_end) / (start - p_end) if start > p_end else 1.0
            return p_ax + frac * (ax - p_ax), None, None
        prev = (end, ax)
    return (prev[1], None, None) if prev else (None, None, None)


def render_pose_stream(piece: SimPiece, geometry: KeyboardGeometry | None = None) -> PoseStream:
    geometry = geometry or default_geometry()
    cfg = piece.config
    rng = rng_for(cfg.seed + 1_000_003)
    w = geometry.white_width
    spacing = cfg.finger_spacing * w
    h = geometry.band_height
    last = max((n.offset_s for n in piece.notes), default=0.0)
    n_frames = max(1, int(math.ceil((last + cfg.true_offset_s + cfg.tail_s) * cfg.fps)))
    timelines = {hand: _hand_timeline(piece, hand, cfg.true_offset_s) for hand in (LEFT, RIGHT)}
    frames = []
    for i in range(n_frames):
        t = frame_time(i, cfg.fps)
        hands = []
        for hand in (LEFT, RIGHT):
            ax, pressing, note = _anchor_at(timelines[hand], t)
            if ax is None:
                continue
            tips = []
            for finger in range(1, 6):
                x = finger_x(ax, hand, finger, spacing)
                y = geometry.y_top + 0.75 * h
                if pressing is not None and finger_id(hand, finger) == pressing:
                    key = geometry.key(note.key_index)
                    x = key.x_center + rng.normal(0.0, cfg.keypoint_noise * w)
                    y = geometry.y_top + (0.4 if key.is_black else 0.75) * h
                conf = round(float(rng.uniform(0.6, 1.0)), 3)
                if hand in cfg.drop_hands and rng.random() < cfg.drop_prob:
                    continue
                tips.append(Fingertip(finger, float(x), float(y), conf))
            box = min(finger_x(ax, hand, f, spacing) for f in (1, 5)) - 0.5 * w
            hands.append(HandPose(hand, tuple(tips), float(box)))
        frames.append(PoseFrame(i, t, tuple(hands)))
    return PoseStream(cfg.fps, tuple(frames))


def render_audio(piece: SimPiece, duration_s: float | None = None) -> AudioClip:
    """Silence with a 0.9 click at the first note's video-time onset."""
    cfg = piece.config
    last = max((n.offset_s for n in piece.notes), default=0.0)
    duration_s = duration_s or (last + cfg.true_offset_s + cfg.tail_s)
    samples = np.zeros(max(1, int(math.ceil(duration_s * cfg.sample_rate))))
    if len(piece.notes):
        start = round((piece.notes[0].onset_s + cfg.true_offset_s) * cfg.sample_rate)
        tail = 0.9 * np.exp(-np.arange(400) / 60.0)
        end = min(len(samples), start + len(tail))
        samples[start:end] = tail[:end - start]
    return AudioClip(cfg.sample_rate, samples)


def render_performance(piece: SimPiece, geometry: KeyboardGeometry | None = None
                       ) -> tuple[bytes, str, bytes]:
    """(SMF bytes, pose JSON lines, WAV bytes) for a simulated piece."""
    stream = render_pose_stream(piece, geometry)
    duration = len(stream.frames) / piece.config.fps
    return (write_smf(piece.notes), dump_pose_stream(stream),
            write_wav(render_audio(piece, duration)))


def render_keyboard_frame(geometry: KeyboardGeometry, occlusions: Sequence[tuple] = (),
                          white=230, black=20, background=30) -> np.ndarray:
    """Grayscale image of the keyboard; ``occlusions`` are dark (y0, y1, x0, x1) boxes."""
    img = np.full((geometry.frame_height, geometry.frame_width), background, np.uint8)
    y0, y1 = int(round(geometry.y_top)), int(round(geometry.y_bottom))
    x0, x1 = int(round(geometry.x_left)), int(round(geometry.x_right))
    img[y0:y1, x0:x1] = white
    for k in geometry.keys:
        if k.is_black:
            a = int(round(k.x_center - k.width / 2))
            b = int(round(k.x_center + k.width / 2))
            img[y0:int(round(k.y_bottom)), a:b] = black
    for oy0, oy1, ox0, ox1 in occlusions:
        img[oy0:oy1, ox0:ox1] = background
    return img


def manifest(piece: SimPiece, geometry: KeyboardGeometry, files: dict) -> dict:
    return {"config": piece.config.to_dict(), "geometry": geometry.to_calibration(),
            "n_notes": len(piece.notes), "files": files,
            "gold": [{"onset_s": n.onset_s, "pitch": n.pitch, "finger": f}
                     for n, f in zip(piece.notes, piece.gold)]}


def gold_tsv(piece: SimPiece) -> str:
    return dump_gold_tsv(piece.gold_notes())


# ---------------------------------------------------------------------------
# Tagger corpora drawn from a known model
# ---------------------------------------------------------------------------

def sample_hand_pieces(model: HmmModel, n_pieces: int, length: int, rng: np.random.Generator,
                       intervals: Sequence[int], interval_probs: Sequence[float] | None = None,
                       start_pitch: int = 72, hand: str = RIGHT, n_labelings: int = 1,
                       label_noise: float = 0.0) -> list[HandPiece]:
    """Pitch sequences from a random interval walk, labelled by sampling ``model``.

    ``label_noise`` replaces each sampled label by a uniform random finger with
    that probability (a stand-in for automatically extracted, imperfect labels).
    """
    pieces = []
    intervals = list(intervals)
    for pi in range(n_pieces):
        pitches = [start_pitch]
        for _ in range(length - 1):
            step = intervals[rng.choice(len(intervals), p=interval_probs)]
            nxt = pitches[-1] + step
            if not 21 <= nxt <= 108:
                nxt = pitches[-1] - step
            pitches.append(nxt)
        labelings = []
        for _ in range(n_labelings):
            ys = [int(rng.choice(N_LABELS, p=model.initial)) + 1]
            for a, b in zip(pitches, pitches[1:]):
                row = model.row(interval_class(a, b, model.clamp), ys[-1])
                ys.append(int(rng.choice(N_LABELS, p=row)) + 1)
            if label_noise:
                ys = [int(rng.integers(1, N_LABELS + 1)) if rng.random() < label_noise else y
                      for y in ys]
            labelings.append(ys)
        pieces.append(HandPiece(hand, pitches, labelings, f"{hand}{pi}"))
    return pieces


def random_hmm(rng: np.random.Generator, clamp: int = 12, concentration: float = 0.3,
               hand: str = RIGHT) -> HmmModel:
    """Dirichlet-random model; small ``concentration`` gives peaked rows."""
    n_classes = 2 * clamp + 1
    initial = rng.dirichlet(np.full(N_LABELS, 1.0))
    transition = rng.dirichlet(np.full(N_LABELS, concentration), size=(n_classes, N_LABELS))
    return HmmModel(initial, transition, 1.0, clamp, hand)


def sim_summary(piece: SimPiece) -> str:
    return json.dumps({"n_notes": len(piece.notes), "seed": piece.config.seed})
