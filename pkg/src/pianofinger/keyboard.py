"""Keyboard geometry: where each of the 88 keys sits in the video frame.

Geometry comes either from a JSON calibration file or from a simple detector
that looks for the largest bright region in a handful of grayscale frames.
White keys are assumed to have equal width; black keys are placed on the
boundary between their white neighbours.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import BadCalibration, InconsistentFrames, NoBrightRegion, OutOfRange

N_KEYS = 88
N_WHITE = 52
BLACK_PITCH_CLASSES = frozenset({1, 3, 6, 8, 10})


def is_black_pitch(pitch: int) -> bool:
    return pitch % 12 in BLACK_PITCH_CLASSES


def white_ordinal(key_index: int) -> int:
    """Number of white keys strictly left of ``key_index``'s left edge boundary.

    For a white key this is its 0-based position among white keys; for a black
    key it is the ordinal of the white key to its right.
    """
    return sum(1 for k in range(1, key_index) if not is_black_pitch(k + 20))


@dataclass(frozen=True)
class KeyGeometry:
    key_index: int
    midi_pitch: int
    x_center: float
    width: float
    is_black: bool
    y_top: float
    y_bottom: float


@dataclass(frozen=True)
class KeyboardGeometry:
    keys: tuple[KeyGeometry, ...]
    frame_width: int
    frame_height: int
    x_left: float
    x_right: float
    y_top: float
    y_bottom: float
    black_width_ratio: float = 0.6
    black_height_ratio: float = 0.6
    sigma_scale: float = 1.0

    @classmethod
    def from_band(cls, x_left, x_right, y_top, y_bottom, frame_width, frame_height,
                  black_width_ratio=0.6, black_height_ratio=0.6, sigma_scale=1.0):
        x_left, x_right, y_top, y_bottom = map(float, (x_left, x_right, y_top, y_bottom))
        if not x_right > x_left or not y_bottom > y_top:
            raise BadCalibration("keyboard band must have positive width and height")
        if not (0 < black_width_ratio <= 1 and 0 < black_height_ratio <= 1):
            raise BadCalibration("black key ratios must lie in (0, 1]")
        if sigma_scale <= 0:
            raise BadCalibration("sigma_scale must be positive")
        white_w = (x_right - x_left) / N_WHITE
        black_bottom = y_top + black_height_ratio * (y_bottom - y_top)
        keys = []
        for key in range(1, N_KEYS + 1):
            pitch = key + 20
            ordinal = white_ordinal(key)
            if is_black_pitch(pitch):
                keys.append(KeyGeometry(key, pitch, x_left + ordinal * white_w,
                                        black_width_ratio * white_w, True, y_top, black_bottom))
            else:
                keys.append(KeyGeometry(key, pitch, x_left + (ordinal + 0.5) * white_w,
                                        white_w, False, y_top, y_bottom))
        return cls(tuple(keys), int(frame_width), int(frame_height), x_left, x_right,
                   y_top, y_bottom, float(black_width_ratio), float(black_height_ratio),
                   float(sigma_scale))

    @property
    def white_width(self) -> float:
        return (self.x_right - self.x_left) / N_WHITE

    @property
    def band_height(self) -> float:
        return self.y_bottom - self.y_top

    def key(self, key_index: int) -> KeyGeometry:
        if not 1 <= key_index <= N_KEYS:
            raise OutOfRange(f"key index {key_index} outside 1..88")
        return self.keys[key_index - 1]

    def white_x(self, ordinal: float) -> float:
        """x of the centre of white key ``ordinal`` (fractional ordinals allowed)."""
        return self.x_left + (ordinal + 0.5) * self.white_width

    def nearest_key(self, x: float) -> int:
        centers = np.array([k.x_center for k in self.keys])
        return int(np.argmin(np.abs(centers - x))) + 1

    def to_calibration(self) -> dict:
        return {
            "frame_width": self.frame_width,
            "frame_height": self.frame_height,
            "band": {"x_left": self.x_left, "x_right": self.x_right,
                     "y_top": self.y_top, "y_bottom": self.y_bottom},
            "white_key_left": self.x_left,
            "white_key_width": self.white_width,
            "black_width_ratio": self.black_width_ratio,
            "black_height_ratio": self.black_height_ratio,
            "sigma_scale": self.sigma_scale,
        }


def key_gaussian(geometry: KeyboardGeometry, key_index: int) -> tuple[float, float]:
    """Mean and standard deviation of the key's horizontal press model."""
    k = geometry.key(key_index)
    return k.x_center, k.width * geometry.sigma_scale


# ---------------------------------------------------------------------------
# Calibration files
# ---------------------------------------------------------------------------

def geometry_from_calibration(cal: dict) -> KeyboardGeometry:
    """Build the full key table from a calibration mapping.

    ``white_key_left``/``white_key_width`` take precedence over the band's
    horizontal extent when present.
    """
    try:
        band = cal["band"]
        y_top, y_bottom = float(band["y_top"]), float(band["y_bottom"])
        if "white_key_left" in cal and "white_key_width" in cal:
            x_left = float(cal["white_key_left"])
            x_right = x_left + N_WHITE * float(cal["white_key_width"])
        else:
            x_left, x_right = float(band["x_left"]), float(band["x_right"])
        return KeyboardGeometry.from_band(
            x_left, x_right, y_top, y_bottom,
            int(cal["frame_width"]), int(cal["frame_height"]),
            float(cal.get("black_width_ratio", 0.6)),
            float(cal.get("black_height_ratio", 0.6)),
            float(cal.get("sigma_scale", 1.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, BadCalibration):
            raise
        raise BadCalibration(f"invalid calibration: {exc}") from exc


def load_calibration(path) -> KeyboardGeometry:
    return geometry_from_calibration(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PPM")


def bright_band(frame: np.ndarray) -> tuple[int, int, int, int]:
    """(y_top, y_bottom, x_left, x_right) of the largest bright region, end-exclusive."""
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ValueError("expected a 2-D grayscale frame")
    if frame.min() == frame.max():
        mask = np.zeros(frame.shape, bool) if frame.max() == 0 else np.ones(frame.shape, bool)
    else:
        mask = frame > threshold_otsu(frame)
    labels, n = ndimage.label(mask)
    if n == 0:
        raise NoBrightRegion("frame has no bright pixels")
    sizes = np.bincount(labels.ravel())[1:]
    biggest = int(np.argmax(sizes)) + 1
    if sizes[biggest - 1] < 0.1 * frame.size:
        raise NoBrightRegion(
            f"largest bright area covers {sizes[biggest - 1] / frame.size:.1%} of the frame")
    rows, cols = ndimage.find_objects(labels)[biggest - 1]
    return rows.start, rows.stop, cols.start, cols.stop


def detect_keyboard(frames: Sequence[np.ndarray], black_width_ratio=0.6,
                    black_height_ratio=0.6, sigma_scale=1.0) -> KeyboardGeometry:
    """Locate the keyboard from one or more grayscale frames.

    Band edges are found per frame and averaged in frame order, so hands that
    hide part of the keyboard in some frames are averaged out.
    """
    if not len(frames):
        raise ValueError("need at least one frame")
    shape = np.asarray(frames[0]).shape
    if any(np.asarray(f).shape != shape for f in frames):
        raise ValueError("all frames must have the same dimensions")
    edges = np.array([bright_band(f) for f in frames], dtype=float)
    mean = edges.mean(axis=0)
    spread = np.abs(edges - mean).max()
    if spread > 0.1 * shape[0]:
        warnings.warn(InconsistentFrames(
            f"band edges disagree by up to {spread:.1f} px across {len(frames)} frames"))
    y_top, y_bottom, x_left, x_right = mean
    return KeyboardGeometry.from_band(x_left, x_right, y_top, y_bottom, shape[1], shape[0],
                                      black_width_ratio, black_height_ratio, sigma_scale)
