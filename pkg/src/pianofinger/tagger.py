"""Per-hand fingering prediction as sequence labelling.

A first-order HMM whose transition matrix is conditioned on the (clamped)
pitch interval between consecutive notes. Labels are fingers 1 (thumb) to 5
(pinky). Models are trained by smoothed counting, fine-tuned by interpolating
counts with a base model, and decoded with Viterbi.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpus, LengthMismatch
from .press import ExtractionResult, split_finger

N_LABELS = 5
DEFAULT_CLAMP = 12
DEFAULT_ALPHA = 1.0
DEFAULT_LAMBDA = 0.8


def interval_class(p_prev: int, p_next: int, clamp: int = DEFAULT_CLAMP) -> int:
    return max(-clamp, min(clamp, p_next - p_prev))


@dataclass
class HandPiece:
    hand: str
    notes: list[int]  # MIDI pitches
    labels: list[list[int]] = field(default_factory=list)  # each labelling: fingers 1..5
    piece_id: str = ""
    onsets: list[float] | None = None
    offsets: list[float] | None = None

    def __post_init__(self):
        for lab in self.labels:
            if len(lab) != len(self.notes):
                raise LengthMismatch(f"labelling of length {len(lab)} for {len(self.notes)} notes")
            if any(not 1 <= y <= N_LABELS for y in lab):
                raise ValueError("finger labels must be in 1..5")

    def __len__(self):
        return len(self.notes)


@dataclass
class HmmModel:
    initial: np.ndarray  # (5,)
    transition: np.ndarray  # (n_classes, 5, 5); [c, prev, next]
    alpha: float = DEFAULT_ALPHA
    clamp: int = DEFAULT_CLAMP
    hand: str = "R"

    @property
    def n_classes(self) -> int:
        return 2 * self.clamp + 1

    def row(self, cls: int, prev: int) -> np.ndarray:
        """P(next finger | prev finger, interval class), fingers 1-based."""
        return self.transition[cls + self.clamp, prev - 1]

    def predict(self, pitches: Sequence[int]) -> list[int]:
        return viterbi_decode(self, pitches)

    def to_dict(self) -> dict:
        return {"hand": self.hand, "alpha": self.alpha, "clamp": self.clamp,
                "initial": self.initial.tolist(), "transition": self.transition.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "HmmModel":
        return cls(np.asarray(d["initial"], float), np.asarray(d["transition"], float),
                   float(d["alpha"]), int(d["clamp"]), d.get("hand", "R"))


def _counts(corpus: Iterable[HandPiece], clamp: int):
    init = np.zeros(N_LABELS)
    trans = np.zeros((2 * clamp + 1, N_LABELS, N_LABELS))
    seen = 0
    for piece in corpus:
        if not piece.labels or not piece.notes:
            continue
        seen += 1
        w = 1.0 / len(piece.labels)
        classes = [interval_class(a, b, clamp) + clamp
                   for a, b in zip(piece.notes, piece.notes[1:])]
        for lab in piece.labels:
            init[lab[0] - 1] += w
            for c, y0, y1 in zip(classes, lab, lab[1:]):
                trans[c, y0 - 1, y1 - 1] += w
    if not seen:
        raise EmptyCorpus("corpus has no labelled pieces")
    return init, trans


def _normalize(a: np.ndarray) -> np.ndarray:
    return a / a.sum(axis=-1, keepdims=True)


def train_hmm(corpus: Sequence[HandPiece], alpha: float = DEFAULT_ALPHA,
              clamp: int = DEFAULT_CLAMP, hand: str | None = None) -> HmmModel:
    """Maximum-likelihood counts with add-``alpha`` smoothing.

    Pieces with several labellings contribute each one with weight
    1/#labellings. With ``hand`` given, other hands' pieces are ignored.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if hand is not None:
        corpus = [p for p in corpus if p.hand == hand]
    if not corpus:
        raise EmptyCorpus("empty corpus")
    init, trans = _counts(corpus, clamp)
    return HmmModel(_normalize(init + alpha), _normalize(trans + alpha), alpha, clamp,
                    hand or corpus[0].hand)


def finetune_hmm(base: HmmModel, corpus: Sequence[HandPiece], lam: float = DEFAULT_LAMBDA,
                 alpha: float | None = None) -> HmmModel:
    """Adapt ``base`` to ``corpus`` by interpolating in count space.

    For every row the base probabilities are turned into pseudo-counts with the
    same total mass as the smoothed target counts, then mixed:
    ``lam * target + (1 - lam) * pseudo``. ``lam=1`` ignores the base,
    ``lam=0`` returns it unchanged.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    alpha = base.alpha if alpha is None else alpha
    if not corpus:
        raise EmptyCorpus("empty fine-tuning corpus")
    init, trans = _counts(corpus, base.clamp)
    init, trans = init + alpha, trans + alpha

    def mix(target, base_rows):
        mass = target.sum(axis=-1, keepdims=True)
        return _normalize(lam * target + (1.0 - lam) * base_rows * mass)

    return HmmModel(mix(init, base.initial), mix(trans, base.transition), alpha, base.clamp,
                    base.hand)


def viterbi_decode(model: HmmModel, pitches: Sequence[int]) -> list[int]:
    """Most probable finger sequence; ties go to the lower finger at every step."""
    pitches = list(pitches)
    if not pitches:
        raise ValueError("cannot decode an empty sequence")
    log_init = np.log(model.initial)
    log_trans = np.log(model.transition)
    delta = log_init
    back = []
    for a, b in zip(pitches, pitches[1:]):
        scores = delta[:, None] + log_trans[interval_class(a, b, model.clamp) + model.clamp]
        prev = np.argmax(scores, axis=0)
        back.append(prev)
        delta = scores[prev, np.arange(N_LABELS)]
    path = [int(np.argmax(delta))]
    for prev in reversed(back):
        path.append(int(prev[path[-1]]))
    return [y + 1 for y in reversed(path)]


def sequence_log_prob(model: HmmModel, pitches: Sequence[int], fingers: Sequence[int]) -> float:
    lp = float(np.log(model.initial[fingers[0] - 1]))
    for (a, b), (y0, y1) in zip(zip(pitches, pitches[1:]), zip(fingers, fingers[1:])):
        lp += float(np.log(model.row(interval_class(a, b, model.clamp), y0)[y1 - 1]))
    return lp


def match_rate(pred: Sequence[int], piece: HandPiece) -> float:
    """Accuracy against each gold labelling, averaged over labellings."""
    if not piece.labels:
        raise ValueError("piece has no gold labelling")
    if len(pred) != len(piece.notes):
        raise LengthMismatch(f"{len(pred)} predictions for {len(piece.notes)} notes")
    pred = np.asarray(pred)
    return float(np.mean([np.mean(pred == np.asarray(lab)) for lab in piece.labels]))


def corpus_match_rate(models: dict[str, HmmModel], corpus: Sequence[HandPiece]) -> float:
    """Note-weighted mean match rate of the per-hand models over a corpus."""
    total = 0.0
    n = 0
    for piece in corpus:
        if not piece.labels or not piece.notes:
            continue
        pred = viterbi_decode(models[piece.hand], piece.notes)
        total += match_rate(pred, piece) * len(piece)
        n += len(piece)
    if not n:
        raise EmptyCorpus("no labelled notes to evaluate")
    return total / n


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def parse_corpus(text: str) -> list[HandPiece]:
    """Read the TSV corpus format.

    Each piece starts with ``#piece <id> <hand>``; rows are
    ``onset_s, offset_s, pitch, labels`` where ``labels`` joins one finger per
    labelling with ``_`` (``-`` when unlabelled).
    """
    pieces: list[HandPiece] = []
    current = None

    def flush():
        if current is None:
            return
        pid, hand, rows = current
        n_lab = {len(r[3]) for r in rows}
        if len(n_lab) > 1:
            raise ValueError(f"piece {pid}: rows disagree on the number of labellings")
        k = n_lab.pop() if n_lab else 0
        labels = [[r[3][i] for r in rows] for i in range(k)]
        pieces.append(HandPiece(hand, [r[2] for r in rows], labels, pid,
                                [r[0] for r in rows], [r[1] for r in rows]))

    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#piece"):
            flush()
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("L", "R"):
                raise ValueError(f"line {lineno}: expected '#piece <id> <L|R>'")
            current = (parts[1], parts[2], [])
            continue
        if line.startswith("#"):
            continue
        if current is None:
            raise ValueError(f"line {lineno}: row before any #piece header")
        cols = line.split("\t")
        if len(cols) < 3:
            raise ValueError(f"line {lineno}: expected at least 3 tab-separated columns")
        labels = [] if len(cols) < 4 or cols[3] in ("", "-") else [
            int(x) for x in cols[3].split("_")]
        current[2].append((float(cols[0]), float(cols[1]), int(cols[2]), labels))
    flush()
    return pieces


def dump_corpus(pieces: Iterable[HandPiece]) -> str:
    lines = []
    for i, p in enumerate(pieces):
        lines.append(f"#piece {p.piece_id or i} {p.hand}")
        onsets = p.onsets or [float(t) for t in range(len(p.notes))]
        offsets = p.offsets or [t + 1.0 for t in onsets]
        for t in range(len(p.notes)):
            lab = "_".join(str(lab[t]) for lab in p.labels) or "-"
            lines.append(f"{onsets[t]:.6f}\t{offsets[t]:.6f}\t{p.notes[t]}\t{lab}")
    return "\n".join(lines) + "\n"


def dump_models(models: dict[str, HmmModel]) -> str:
    return json.dumps({"models": {h: m.to_dict() for h, m in sorted(models.items())}}) + "\n"


def load_models(text: str) -> dict[str, HmmModel]:
    obj = json.loads(text)
    return {h: HmmModel.from_dict(d) for h, d in obj["models"].items()}


def pieces_from_extraction(result: ExtractionResult, piece_id: str = "") -> list[HandPiece]:
    """Split an extraction dataset into per-hand silver-labelled pieces.

    Each note takes its most likely finger; NO_POSE notes are skipped.
    """
    by_hand: dict[str, list] = {"L": [], "R": []}
    for ev in result.events:
        if ev.no_pose:
            continue
        hand, finger = split_finger(ev.best)
        by_hand[hand].append((ev.note, finger))
    out = []
    for hand in ("L", "R"):
        rows = sorted(by_hand[hand], key=lambda r: (r[0].onset_s, r[0].pitch))
        if rows:
            out.append(HandPiece(hand, [n.pitch for n, _ in rows], [[f for _, f in rows]],
                                 f"{piece_id or result.piece_id}", [n.onset_s for n, _ in rows],
                                 [n.offset_s for n, _ in rows]))
    return out
