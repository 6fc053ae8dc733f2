"""Which finger pressed each note.

Every visible fingertip is scored by a normal density centred on the pressed
key, with the key width as standard deviation. Scores are normalized over the
fingers that could plausibly be pressing, per frame, and the frames covering a
note are combined with exponentially decaying weights starting from the first
frame. A piece's confidence is the product of each note's top probability,
kept in log space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyFrameList, LengthMismatch
from .keyboard import KeyboardGeometry, key_gaussian
from .midi_io import NoteEvent
from .pose import LEFT, TIME_EPS, PoseFrame, PoseStream, normalize_hand_labels, normalize_stream

N_FINGERS = 10
NO_POSE = "NO_POSE"
LOW_EVIDENCE = "LOW_EVIDENCE"
DEFAULT_GAMMA = 0.5
DEFAULT_Y_GATE = 0.5
DEFAULT_MAX_SIGMAS = 8.0
_SQRT_2PI = math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Finger ids: 1..5 = L1..L5 (thumb..pinky), 6..10 = R1..R5
# ---------------------------------------------------------------------------

def finger_id(hand: str, finger: int) -> int:
    if not 1 <= finger <= 5:
        raise ValueError(f"finger {finger} outside 1..5")
    return finger if hand == LEFT else finger + 5


def finger_label(fid: int) -> str:
    if not 1 <= fid <= N_FINGERS:
        raise ValueError(f"finger id {fid} outside 1..10")
    return f"L{fid}" if fid <= 5 else f"R{fid - 5}"


def parse_finger_label(label: str) -> int:
    label = label.strip().upper()
    if len(label) != 2 or label[0] not in "LR" or label[1] not in "12345":
        raise ValueError(f"bad finger label {label!r}")
    return finger_id(label[0], int(label[1]))


def split_finger(fid: int) -> tuple[str, int]:
    """finger id -> (hand, 1..5)"""
    label = finger_label(fid)
    return label[0], int(label[1])


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FingerDistribution:
    probs: np.ndarray  # shape (10,), index = finger id - 1
    support: frozenset = frozenset()
    low_evidence: bool = False

    @property
    def empty(self) -> bool:
        return not self.support

    def __getitem__(self, fid: int) -> float:
        return float(self.probs[fid - 1])


@dataclass(frozen=True, eq=False)
class NoteFingering:
    note: NoteEvent
    distribution: FingerDistribution
    best: int
    confidence: float
    flags: frozenset = frozenset()

    @property
    def no_pose(self) -> bool:
        return NO_POSE in self.flags


@dataclass(frozen=True, eq=False)
class ExtractionResult:
    events: tuple[NoteFingering, ...]
    log_confidence: float
    offset_s: float = 0.0
    gamma: float = DEFAULT_GAMMA
    piece_id: str = ""

    def __len__(self):
        return len(self.events)


def piece_log_confidence(events: Iterable[NoteFingering]) -> float:
    return float(sum(math.log(e.confidence) for e in events if not e.no_pose))


def _argmax(probs: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest finger id on ties
    return int(np.argmax(probs)) + 1


def _fingering(note, probs, support, low, flags=()) -> NoteFingering:
    flags = set(flags)
    if not support:
        probs = np.full(N_FINGERS, 1.0 / N_FINGERS)
        flags.add(NO_POSE)
    elif low:
        flags.add(LOW_EVIDENCE)
    dist = FingerDistribution(probs, frozenset(support), low)
    best = _argmax(probs)
    return NoteFingering(note, dist, best, float(probs[best - 1]), frozenset(flags))


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def _gate(geometry: KeyboardGeometry, y_gate: float) -> tuple[float, float]:
    pad = 0.5 * y_gate * geometry.band_height
    return geometry.y_top - pad, geometry.y_bottom + pad


def _densities(xs, ys, mu, sigma, y_lo, y_hi, max_sigmas):
    """Normal densities of fingertip x positions; 0 where a tip does not qualify."""
    z = (xs - mu) / sigma
    with np.errstate(invalid="ignore"):
        ok = (ys >= y_lo) & (ys <= y_hi) & (np.abs(z) <= max_sigmas)
    dens = np.exp(-0.5 * np.where(ok, z, 0.0) ** 2) / (sigma * _SQRT_2PI)
    return np.where(ok, dens, 0.0)


def finger_distribution(frame: PoseFrame, geometry: KeyboardGeometry, key_index: int,
                        y_gate: float = DEFAULT_Y_GATE,
                        max_sigmas: float = DEFAULT_MAX_SIGMAS) -> FingerDistribution:
    """Normalized press probabilities over the fingertips visible in one frame.

    Only tips whose y lies within the keyboard band (grown by ``y_gate`` of its
    height) and whose x is within ``max_sigmas`` standard deviations of the key
    centre take part. An empty support means no finger qualified.
    """
    frame = normalize_hand_labels(frame)
    xs = np.full(N_FINGERS, np.nan)
    ys = np.full(N_FINGERS, np.nan)
    for hand in frame.hands:
        for t in hand.fingertips:
            fid = finger_id(hand.hand, t.finger)
            xs[fid - 1], ys[fid - 1] = t.x, t.y
    mu, sigma = key_gaussian(geometry, key_index)
    dens = _densities(xs, ys, mu, sigma, *_gate(geometry, y_gate), max_sigmas)
    total = dens.sum()
    if total <= 0:
        return FingerDistribution(np.zeros(N_FINGERS))
    support = frozenset(int(i) + 1 for i in np.flatnonzero(dens > 0))
    low = dens.max() < math.exp(-4.5) / (sigma * _SQRT_2PI)
    return FingerDistribution(dens / total, support, bool(low))


def aggregate_note(frames: Sequence[PoseFrame], geometry: KeyboardGeometry, note: NoteEvent,
                   gamma: float = DEFAULT_GAMMA, y_gate: float = DEFAULT_Y_GATE,
                   max_sigmas: float = DEFAULT_MAX_SIGMAS) -> NoteFingering:
    """Combine per-frame distributions with weights gamma**k, k = 0 for the first frame.

    Frames with no qualifying finger are skipped. If none qualify the note is
    flagged NO_POSE and gets a uniform distribution.
    """
    if not frames:
        raise EmptyFrameList("no frames for note")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must be in (0, 1]")
    acc = np.zeros(N_FINGERS)
    total_w = 0.0
    support: set[int] = set()
    low = True
    for k, frame in enumerate(frames):
        dist = finger_distribution(frame, geometry, note.key_index, y_gate, max_sigmas)
        if dist.empty:
            continue
        w = gamma ** k
        acc += w * dist.probs
        total_w += w
        support |= dist.support
        low &= dist.low_evidence
    if total_w == 0:
        return _fingering(note, None, (), False)
    return _fingering(note, acc / total_w, support, low)


def _windows(times: np.ndarray, starts: np.ndarray, ends: np.ndarray):
    """Vectorized version of :func:`pianofinger.pose.frame_window`."""
    lo = np.searchsorted(times, starts, side="left")
    hi = np.searchsorted(times, ends, side="left")
    empty = hi <= lo
    if empty.any():
        n = len(times)
        l = lo[empty]
        prev = np.clip(l - 1, 0, n - 1)
        nxt = np.clip(l, 0, n - 1)
        s = starts[empty]
        take_prev = (l >= n) | ((l > 0) & (s - times[prev] <= times[nxt] - s))
        idx = np.where(take_prev, prev, nxt)
        lo[empty] = idx
        hi[empty] = idx + 1
    return lo, hi


def extract_piece(notes: Sequence[NoteEvent], stream: PoseStream, geometry: KeyboardGeometry,
                  offset_s: float = 0.0, gamma: float = DEFAULT_GAMMA,
                  y_gate: float = DEFAULT_Y_GATE, max_sigmas: float = DEFAULT_MAX_SIGMAS,
                  exclusive: bool = False, piece_id: str = "") -> ExtractionResult:
    """Finger distributions for every note of a piece.

    ``offset_s`` is added to MIDI times to obtain video times. Notes are scored
    in one vectorized pass; the result matches calling :func:`aggregate_note`
    on :func:`pianofinger.pose.frames_for_note` note by note.
    """
    if not 0 < gamma <= 1:
        raise ValueError("gamma must be in (0, 1]")
    notes = list(notes)
    if not notes:
        return ExtractionResult((), 0.0, offset_s, gamma, piece_id)
    stream = normalize_stream(stream)
    if not stream.frames:
        return _all_no_pose(notes, offset_s, gamma, piece_id)

    probs, support_mask, low = _score_notes(notes, stream, geometry, offset_s, gamma,
                                            y_gate, max_sigmas)
    events = []
    for j, note in enumerate(notes):
        support = [int(i) + 1 for i in np.flatnonzero(support_mask[j])]
        events.append(_fingering(note, probs[j] if support else None, support, bool(low[j])))
    if exclusive:
        events = exclusive_assignment(events)
    return ExtractionResult(tuple(events), piece_log_confidence(events), offset_s, gamma,
                            piece_id)


def piece_score(notes, stream, geometry, offset_s=0.0, gamma=DEFAULT_GAMMA,
                y_gate=DEFAULT_Y_GATE, max_sigmas=DEFAULT_MAX_SIGMAS) -> float:
    """Log confidence of a piece without building per-note objects."""
    notes = list(notes)
    if not notes or not stream.frames:
        return 0.0
    stream = normalize_stream(stream)
    probs, support_mask, _ = _score_notes(notes, stream, geometry, offset_s, gamma,
                                          y_gate, max_sigmas)
    has = support_mask.any(axis=1)
    return float(np.log(probs[has].max(axis=1)).sum())


def _score_notes(notes, stream, geometry, offset_s, gamma, y_gate, max_sigmas):
    onsets = np.array([n.onset_s for n in notes]) + (offset_s - TIME_EPS)
    ends = np.array([n.offset_s for n in notes]) + (offset_s - TIME_EPS)
    lo, hi = _windows(stream.times, onsets, ends)
    counts = hi - lo
    note_of = np.repeat(np.arange(len(notes)), counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(counts.sum()) - starts[note_of]
    frame_idx = lo[note_of] + k

    gauss = np.array([key_gaussian(geometry, n.key_index) for n in notes])
    mu = gauss[note_of, 0][:, None]
    sigma = gauss[note_of, 1][:, None]
    xs, ys = stream.tip_arrays
    dens = _densities(xs[frame_idx], ys[frame_idx], mu, sigma, *_gate(geometry, y_gate),
                      max_sigmas)
    total = dens.sum(axis=1)
    used = total > 0
    p = np.divide(dens, total[:, None], out=np.zeros_like(dens), where=used[:, None])
    w = np.where(used, float(gamma) ** k, 0.0)
    low_pair = dens.max(axis=1) < math.exp(-4.5) / (sigma[:, 0] * _SQRT_2PI)

    acc = np.zeros((len(notes), N_FINGERS))
    np.add.at(acc, note_of, w[:, None] * p)
    wsum = np.zeros(len(notes))
    np.add.at(wsum, note_of, w)
    support = np.zeros((len(notes), N_FINGERS), bool)
    np.logical_or.at(support, note_of, dens > 0)
    any_high = np.zeros(len(notes), bool)
    np.logical_or.at(any_high, note_of, used & ~low_pair)
    probs = np.divide(acc, wsum[:, None], out=np.zeros_like(acc), where=wsum[:, None] > 0)
    return probs, support, ~any_high


def _all_no_pose(notes, offset_s, gamma, piece_id):
    events = tuple(_fingering(n, None, (), False) for n in notes)
    return ExtractionResult(events, 0.0, offset_s, gamma, piece_id)


def exclusive_assignment(events: Sequence[NoteFingering], tolerance_s: float = 0.02
                         ) -> list[NoteFingering]:
    """Stop two notes struck together from sharing a finger.

    Notes whose onsets lie within ``tolerance_s`` form a group. The most
    confident note keeps its finger, the next takes its best unclaimed finger,
    and so on. Distributions are left untouched.
    """
    out = list(events)
    order = sorted(range(len(out)), key=lambda i: out[i].note.onset_s)
    groups: list[list[int]] = []
    for i in order:
        if groups and out[i].note.onset_s - out[groups[-1][0]].note.onset_s <= tolerance_s:
            groups[-1].append(i)
        else:
            groups.append([i])
    for group in groups:
        if len(group) < 2:
            continue
        claimed: set[int] = set()
        for i in sorted(group, key=lambda i: (-out[i].confidence, i)):
            ev = out[i]
            if ev.no_pose:
                continue
            probs = ev.distribution.probs.copy()
            for fid in claimed:
                probs[fid - 1] = -1.0
            best = _argmax(probs)
            if probs[best - 1] <= 0:
                best = ev.best
            claimed.add(best)
            if best != ev.best:
                out[i] = NoteFingering(ev.note, ev.distribution, best,
                                       float(ev.distribution.probs[best - 1]), ev.flags)
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class PRPoint:
    threshold: float
    kept: int
    correct: int
    precision: float
    recall: float
    f1: float


@dataclass
class ExtractionReport:
    rows: list[PRPoint]
    curve: list[PRPoint]
    n_total: int
    n_no_pose: int
    n_unlabeled: int = 0

    def to_dict(self) -> dict:
        def pt(p):
            return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                    for k, v in p.__dict__.items()}
        return {"n_total": self.n_total, "n_no_pose": self.n_no_pose,
                "n_unlabeled": self.n_unlabeled,
                "rows": [pt(p) for p in self.rows], "curve": [pt(p) for p in self.curve]}


def _pr_point(threshold, conf, correct, n_total) -> PRPoint:
    kept = conf > threshold
    n_kept = int(kept.sum())
    n_correct = int((kept & correct).sum())
    precision = n_correct / n_kept if n_kept else float("nan")
    recall = n_kept / n_total if n_total else float("nan")
    if n_kept and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
    return PRPoint(float(threshold), n_kept, n_correct, precision, recall, f1)


def evaluate_extraction(result: ExtractionResult | Sequence[NoteFingering],
                        gold: Sequence[Optional[int]],
                        thresholds: Sequence[float] = (0.9, 0.5, 0.0)) -> ExtractionReport:
    """Precision/recall of the best-finger guess as a function of confidence.

    A note is kept at threshold ``c`` when its confidence exceeds ``c``.
    Precision counts kept notes whose best finger equals the gold finger;
    recall is the kept fraction of all labelled notes. NO_POSE notes are never
    kept. Gold entries of ``None`` are excluded and counted as unlabeled.
    """
    events = result.events if isinstance(result, ExtractionResult) else tuple(result)
    if len(events) != len(gold):
        raise LengthMismatch(f"{len(events)} events vs {len(gold)} gold labels")
    pairs = [(e, g) for e, g in zip(events, gold) if g is not None]
    n_total = len(pairs)
    conf = np.array([-1.0 if e.no_pose else e.confidence for e, _ in pairs])
    correct = np.array([(not e.no_pose) and e.best == g for e, g in pairs], dtype=bool)
    rows = [_pr_point(c, conf, correct, n_total) for c in thresholds]
    curve_ts = [0.0] + sorted(set(float(c) for c in conf if c >= 0))
    curve = [_pr_point(c, conf, correct, n_total) for c in sorted(set(curve_ts))]
    n_no_pose = sum(1 for e, _ in pairs if e.no_pose)
    return ExtractionReport(rows, curve, n_total, n_no_pose, len(events) - n_total)


# ---------------------------------------------------------------------------
# Dataset and gold files
# ---------------------------------------------------------------------------

def result_to_json(result: ExtractionResult) -> dict:
    return {
        "piece_id": result.piece_id,
        "offset_s": result.offset_s,
        "gamma": result.gamma,
        "log_confidence": result.log_confidence,
        "events": [
            {"onset_s": e.note.onset_s, "offset_s": e.note.offset_s, "pitch": e.note.pitch,
             "key_index": e.note.key_index, "velocity": e.note.velocity,
             "probs": [float(p) for p in e.distribution.probs],
             "best": finger_label(e.best), "confidence": e.confidence,
             "flags": sorted(e.flags)}
            for e in result.events
        ],
    }


def result_from_json(obj: dict) -> ExtractionResult:
    events = []
    for ev in obj["events"]:
        note = NoteEvent(int(ev["pitch"]), float(ev["onset_s"]), float(ev["offset_s"]),
                         int(ev.get("velocity", 64)))
        probs = np.array(ev["probs"], dtype=float)
        flags = frozenset(ev.get("flags", ()))
        support = frozenset() if NO_POSE in flags else frozenset(
            int(i) + 1 for i in np.flatnonzero(probs > 0))
        dist = FingerDistribution(probs, support, LOW_EVIDENCE in flags)
        events.append(NoteFingering(note, dist, parse_finger_label(ev["best"]),
                                    float(ev["confidence"]), flags))
    log_conf = obj.get("log_confidence")
    if log_conf is None:
        log_conf = piece_log_confidence(events)
    return ExtractionResult(tuple(events), float(log_conf), float(obj.get("offset_s", 0.0)),
                            float(obj.get("gamma", DEFAULT_GAMMA)), obj.get("piece_id", ""))


def dump_dataset(result: ExtractionResult) -> str:
    return json.dumps(result_to_json(result), indent=1) + "\n"


@dataclass(frozen=True)
class GoldNote:
    onset_s: float
    pitch: int
    finger: int


def parse_gold_tsv(text: str) -> list[GoldNote]:
    """Rows ``onset_s<TAB>pitch<TAB>finger`` with finger labels like ``R2``."""
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if cols[0] == "onset_s":
            continue
        out.append(GoldNote(float(cols[0]), int(cols[1]), parse_finger_label(cols[2])))
    return out


def dump_gold_tsv(gold: Iterable[GoldNote]) -> str:
    lines = ["onset_s\tpitch\tfinger"]
    lines += [f"{g.onset_s:.6f}\t{g.pitch}\t{finger_label(g.finger)}" for g in gold]
    return "\n".join(lines) + "\n"


def match_gold(notes: Sequence[NoteEvent], gold: Sequence[GoldNote],
               tolerance_s: float = 0.02) -> list[Optional[int]]:
    """Gold finger per note, matched on pitch and onset within ``tolerance_s``.

    Each gold row is used at most once; closest onsets are paired first.
    """
    by_pitch: dict[int, list[int]] = {}
    for ni, n in enumerate(notes):
        by_pitch.setdefault(n.pitch, []).append(ni)
    candidates = []
    for gi, g in enumerate(gold):
        for ni in by_pitch.get(g.pitch, ()):
            d = abs(notes[ni].onset_s - g.onset_s)
            if d <= tolerance_s:
                candidates.append((d, ni, gi))
    labels: list[Optional[int]] = [None] * len(notes)
    used = set()
    for _, ni, gi in sorted(candidates):
        if labels[ni] is None and gi not in used:
            labels[ni] = gold[gi].finger
            used.add(gi)
    return labels
