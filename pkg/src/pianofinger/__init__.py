"""Piano fingering extraction from MIDI, fingertip keypoints and audio."""

__version__ = "0.1.0"
