"""Aligning MIDI time with video time.

A first guess comes from the audio track: the first sample louder than a
threshold is taken as the first MIDI onset. The guess is then refined by
trying every frame shift within a window around it and keeping the shift with
the highest piece confidence.
"""

from __future__ import annotations

import io
import json
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NoOnset, NotRiff, Truncated, UnsupportedCodec
from .keyboard import KeyboardGeometry
from .press import DEFAULT_GAMMA, DEFAULT_MAX_SIGMAS, DEFAULT_Y_GATE, piece_score
from .pose import PoseStream, normalize_stream

DEFAULT_ONSET_THRESHOLD = 0.1
DEFAULT_WINDOW_S = 1.0


@dataclass(frozen=True, eq=False)
class AudioClip:
    sample_rate: int
    samples: np.ndarray  # mono float64 in [-1, 1]

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if len(self.samples) == 0:
            raise ValueError("audio clip is empty")
        if np.abs(self.samples).max() > 1.0:
            raise ValueError("samples must lie in [-1, 1]")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def parse_wav(data: bytes) -> AudioClip:
    """Decode 16-bit PCM WAV (mono or stereo, stereo mixed to mono)."""
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise NotRiff("not a RIFF/WAVE file")
    try:
        with wave.open(io.BytesIO(data), "rb") as w:
            channels, width, rate, nframes = (w.getnchannels(), w.getsampwidth(),
                                              w.getframerate(), w.getnframes())
            if width != 2 or channels not in (1, 2):
                raise UnsupportedCodec(f"need 16-bit PCM mono/stereo, got "
                                       f"{8 * width}-bit x{channels}")
            raw = w.readframes(nframes)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedCodec(msg) from exc
        raise Truncated(msg) from exc
    except EOFError as exc:
        raise Truncated("WAV chunk truncated") from exc
    if len(raw) != nframes * channels * 2:
        raise Truncated(f"data chunk holds {len(raw)} bytes, header promises "
                        f"{nframes * channels * 2}")
    ints = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    samples = ints.reshape(-1, channels).mean(axis=1) / 32768.0
    return AudioClip(rate, samples)


def write_wav(clip: AudioClip) -> bytes:
    """Mono 16-bit PCM; inverse of :func:`parse_wav` for samples on the 1/32768 grid."""
    ints = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(ints.tobytes())
    return buf.getvalue()


def first_onset(clip: AudioClip, threshold: float = DEFAULT_ONSET_THRESHOLD) -> float:
    """Time in seconds of the first sample whose magnitude exceeds ``threshold``."""
    loud = np.flatnonzero(np.abs(clip.samples) > threshold)
    if not len(loud):
        raise NoOnset(f"no sample exceeds {threshold}")
    return loud[0] / clip.sample_rate


def initial_offset(clip: AudioClip | None, notes, threshold=DEFAULT_ONSET_THRESHOLD) -> float:
    """Audio-based guess of video time minus MIDI time (0 without audio)."""
    if clip is None or not len(notes):
        return 0.0
    return first_onset(clip, threshold) - min(n.onset_s for n in notes)


@dataclass
class AlignmentReport:
    initial_offset_s: float
    best_offset_s: float
    scores: list[tuple[float, float]] = field(default_factory=list)

    @property
    def best_score(self) -> float:
        return dict(self.scores)[self.best_offset_s] if self.scores else 0.0

    def to_dict(self) -> dict:
        return {"initial_offset_s": self.initial_offset_s, "best_offset_s": self.best_offset_s,
                "scores": [{"offset_s": o, "log_confidence": s} for o, s in self.scores]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def to_csv(self) -> str:
        rows = ["offset_s,log_confidence"]
        rows += [f"{o:.6f},{s:.9g}" for o, s in self.scores]
        return "\n".join(rows) + "\n"


def candidate_offsets(initial_offset_s: float, window_s: float, fps: float) -> list[float]:
    k = int(round(window_s * fps))
    return [initial_offset_s + i / fps for i in range(-k, k + 1)]


def search_offset(notes, stream: PoseStream, geometry: KeyboardGeometry,
                  initial_offset_s: float = 0.0, window_s: float = DEFAULT_WINDOW_S,
                  gamma: float = DEFAULT_GAMMA, y_gate: float = DEFAULT_Y_GATE,
                  max_sigmas: float = DEFAULT_MAX_SIGMAS, threads: int = 1) -> AlignmentReport:
    """Score every frame shift within ``window_s`` of the initial offset.

    The best shift maximises the piece log confidence; ties go to the shift
    closest to the initial offset, then to the earlier shift.
    """
    if window_s < 0:
        raise ValueError("window must be non-negative")
    notes = list(notes)
    stream = normalize_stream(stream)
    offsets = candidate_offsets(initial_offset_s, window_s, stream.fps)

    def score(off):
        return piece_score(notes, stream, geometry, off, gamma, y_gate, max_sigmas)

    if threads > 1:
        stream.tip_arrays  # build the shared cache before fanning out
        with ThreadPoolExecutor(threads) as pool:
            values = list(pool.map(score, offsets))
    else:
        values = [score(o) for o in offsets]

    k = (len(offsets) - 1) // 2
    best = max(range(len(offsets)), key=lambda i: (values[i], -abs(i - k), -i))
    return AlignmentReport(initial_offset_s, offsets[best], list(zip(offsets, values)))
