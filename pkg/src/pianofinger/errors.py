"""Exception hierarchy shared by all pianofinger modules."""


class PianoFingerError(ValueError):
    """Base class for data errors raised by the package."""


# midi-io
class MalformedHeader(PianoFingerError):
    pass


class TruncatedChunk(PianoFingerError):
    pass


class UnsupportedDivision(PianoFingerError):
    pass


class Overlong(PianoFingerError):
    pass


class Truncated(PianoFingerError):
    pass


class OutOfRange(PianoFingerError):
    pass


# keyboard
class NoBrightRegion(PianoFingerError):
    pass


class BadCalibration(PianoFingerError):
    pass


# pose stream
class EmptyStream(PianoFingerError):
    pass


class BadHeader(PianoFingerError):
    pass


# press inference / evaluation
class EmptyFrameList(PianoFingerError):
    pass


class LengthMismatch(PianoFingerError):
    pass


# alignment
class NotRiff(PianoFingerError):
    pass


class UnsupportedCodec(PianoFingerError):
    pass


class NoOnset(PianoFingerError):
    pass


# tagger
class EmptyCorpus(PianoFingerError):
    pass


# simulator
class BadConfig(PianoFingerError):
    pass


class InconsistentFrames(UserWarning):
    """Keyboard band edges disagree across frames; detection still returns a result."""
