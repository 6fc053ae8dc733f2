"""Per-frame fingertip keypoints produced by an upstream hand-pose model.

The on-disk format is JSON lines: a header ``{"fps": 25}`` followed by one
object per frame::

    {"frame": 12, "hands": [{"label": "R", "box_x_min": 410.0,
                             "tips": [{"f": 1, "x": 433.1, "y": 250.0, "c": 0.93}, ...]}]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import BadHeader, EmptyStream
from .midi_io import NoteEvent

log = logging.getLogger(__name__)

LEFT, RIGHT = "L", "R"
MIN_TIP_CONFIDENCE = 0.05
# slack for float round-off when comparing shifted note times with frame times
TIME_EPS = 1e-9


@dataclass(frozen=True)
class Fingertip:
    finger: int  # 1 = thumb ... 5 = pinky
    x: float
    y: float
    confidence: float = 1.0

    def __post_init__(self):
        if not 1 <= self.finger <= 5:
            raise ValueError(f"finger {self.finger} outside 1..5")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class HandPose:
    hand: str
    fingertips: tuple[Fingertip, ...] = ()
    box_x_min: float = 0.0

    def __post_init__(self):
        if self.hand not in (LEFT, RIGHT):
            raise ValueError(f"hand label must be 'L' or 'R', got {self.hand!r}")
        ids = [t.finger for t in self.fingertips]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate finger ids in one hand")

    @property
    def mean_confidence(self) -> float:
        if not self.fingertips:
            return 0.0
        return sum(t.confidence for t in self.fingertips) / len(self.fingertips)


@dataclass(frozen=True)
class PoseFrame:
    frame_index: int
    time_s: float
    hands: tuple[HandPose, ...] = ()


@dataclass(frozen=True)
class PoseStream:
    fps: float
    frames: tuple[PoseFrame, ...]
    malformed_lines: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        idx = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([f.time_s for f in self.frames], dtype=float)

    @cached_property
    def tip_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) arrays of shape (n_frames, 10), NaN where a finger is absent.

        Column ``c`` holds finger id ``c + 1`` (L1..L5, R1..R5).
        """
        xs = np.full((len(self.frames), 10), np.nan)
        ys = np.full((len(self.frames), 10), np.nan)
        for i, fr in enumerate(self.frames):
            for hand in fr.hands:
                base = 0 if hand.hand == LEFT else 5
                for t in hand.fingertips:
                    xs[i, base + t.finger - 1] = t.x
                    ys[i, base + t.finger - 1] = t.y
        return xs, ys

    def __len__(self):
        return len(self.frames)


def frame_time(frame_index: int, fps: float) -> float:
    return frame_index / fps


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _parse_hand(obj) -> HandPose:
    tips = []
    for t in obj.get("tips", []):
        c = float(t.get("c", 1.0))
        tips.append(Fingertip(int(t["f"]), float(t["x"]), float(t["y"]), c))
    return HandPose(obj["label"], tuple(tips), float(obj.get("box_x_min", 0.0)))


def parse_pose_stream(text: str, min_confidence: float = MIN_TIP_CONFIDENCE) -> PoseStream:
    """Parse a JSON-lines pose stream.

    Malformed frame lines are skipped and counted; a repeated frame index keeps
    the last occurrence. Fingertips below ``min_confidence`` are discarded.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise EmptyStream("pose stream is empty")
    try:
        header = json.loads(lines[0])
        fps = float(header["fps"])
    except (ValueError, KeyError, TypeError) as exc:
        raise BadHeader(f"first line must be a header with fps: {exc}") from exc
    if not fps > 0:
        raise BadHeader("fps must be positive")

    frames: dict[int, PoseFrame] = {}
    bad = 0
    for line in lines[1:]:
        try:
            obj = json.loads(line)
            idx = int(obj["frame"])
            if idx < 0:
                raise ValueError("negative frame index")
            hands = []
            for h in obj.get("hands", []):
                hand = _parse_hand(h)
                tips = tuple(t for t in hand.fingertips if t.confidence >= min_confidence)
                hands.append(replace(hand, fingertips=tips))
        except (ValueError, KeyError, TypeError) as exc:
            bad += 1
            log.debug("skipping malformed pose line: %s", exc)
            continue
        frames[idx] = PoseFrame(idx, frame_time(idx, fps), tuple(hands))
    if bad:
        log.warning("skipped %d malformed pose lines", bad)
    return PoseStream(fps, tuple(frames[i] for i in sorted(frames)), bad)


def dump_pose_stream(stream: PoseStream) -> str:
    out = [json.dumps({"fps": stream.fps})]
    for fr in stream.frames:
        hands = [
            {"label": h.hand, "box_x_min": h.box_x_min,
             "tips": [{"f": t.finger, "x": t.x, "y": t.y, "c": t.confidence}
                      for t in h.fingertips]}
            for h in fr.hands
        ]
        out.append(json.dumps({"frame": fr.frame_index, "hands": hands}))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Hand labels and frame selection
# ---------------------------------------------------------------------------

def normalize_hand_labels(frame: PoseFrame) -> PoseFrame:
    """Keep at most two hands and make their labels distinct.

    With more than two detections the two most confident hands survive. Two
    hands carrying the same label are relabelled by position: the one whose
    box starts further left becomes the left hand.
    """
    hands = list(frame.hands)
    if len(hands) > 2:
        order = sorted(range(len(hands)), key=lambda i: -hands[i].mean_confidence)
        keep = sorted(order[:2])
        hands = [hands[i] for i in keep]
    if len(hands) == 2 and hands[0].hand == hands[1].hand:
        a, b = sorted(hands, key=lambda h: h.box_x_min)
        hands = [replace(a, hand=LEFT), replace(b, hand=RIGHT)]
    if tuple(hands) == frame.hands:
        return frame
    return replace(frame, hands=tuple(hands))


def normalize_stream(stream: PoseStream) -> PoseStream:
    """Normalize every frame; returns ``stream`` itself when nothing changes."""
    frames = tuple(normalize_hand_labels(f) for f in stream.frames)
    if all(a is b for a, b in zip(frames, stream.frames)):
        return stream
    return replace(stream, frames=frames)


def frame_window(stream: PoseStream, note: NoteEvent, offset_s: float = 0.0) -> tuple[int, int]:
    """Index range [lo, hi) of frames whose time falls inside the shifted note.

    Falls back to the single frame nearest the shifted onset when no frame
    lies inside the note.
    """
    if not stream.frames:
        raise EmptyStream("pose stream has no frames")
    times = stream.times
    start = note.onset_s + offset_s - TIME_EPS
    end = note.offset_s + offset_s - TIME_EPS
    lo = int(np.searchsorted(times, start, side="left"))
    hi = int(np.searchsorted(times, end, side="left"))
    if hi > lo:
        return lo, hi
    # nearest frame; ties go to the earlier one
    if lo == 0:
        return 0, 1
    if lo >= len(times) or start - times[lo - 1] <= times[lo] - start:
        return lo - 1, lo
    return lo, lo + 1


def frames_for_note(stream: PoseStream, note: NoteEvent, offset_s: float = 0.0) -> list[PoseFrame]:
    lo, hi = frame_window(stream, note, offset_s)
    return list(stream.frames[lo:hi])
