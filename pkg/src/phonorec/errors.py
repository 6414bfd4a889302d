"""Exception types shared across the pipeline.

Every error carries the fields a caller needs to report it; the CLI prints
``error: <ClassName>: <message>`` on stderr.
"""

from __future__ import annotations


class PhonorecError(Exception):
    """Base class for all pipeline errors."""


# -- phonology ---------------------------------------------------------------


class UnknownValue(PhonorecError, ValueError):
    def __init__(self, kind, code, line: int | None = None):
        self.kind = kind
        self.code = code
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown {getattr(kind, 'value', kind)} value {code!r}{where}")


class EmptyDataset(PhonorecError, ValueError):
    pass


# -- ingest ------------------------------------------------------------------


class ParseError(PhonorecError, ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        prefix = f"{path}:" if path is not None else ""
        where = f"{prefix}{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(f"{where}{message}")


class DuplicateGloss(PhonorecError, ValueError):
    def __init__(self, gloss: str, line: int | None = None):
        self.gloss = gloss
        self.line = line
        super().__init__(f"duplicate gloss {gloss!r}" + (f" at line {line}" if line else ""))


class FormatError(PhonorecError, ValueError):
    pass


class NonFiniteValue(PhonorecError, ValueError):
    def __init__(self, frame: int, joint: int | str):
        self.frame = frame
        self.joint = joint
        super().__init__(f"non-finite keypoint value at frame {frame}, joint {joint}")


class MissingJoint(PhonorecError, KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(name)

    def __str__(self):
        return f"required joint {self.name!r} not present"


class EmptySequence(PhonorecError, ValueError):
    pass


class MissingKeypointFile(PhonorecError, FileNotFoundError):
    def __init__(self, video_id: str, path):
        self.video_id = video_id
        self.path = path
        super().__init__(f"keypoint file for video {video_id!r} not found: {path}")


# -- splits ------------------------------------------------------------------


class TooFewSamples(PhonorecError, ValueError):
    def __init__(self, cls: str, count: int, unit: str = "records"):
        self.cls = cls
        self.count = count
        self.unit = unit
        super().__init__(f"class {cls!r} has only {count} {unit}; at least 3 are needed")


class InconsistentGlossLabel(PhonorecError, ValueError):
    def __init__(self, gloss: str, codes):
        self.gloss = gloss
        self.codes = tuple(codes)
        super().__init__(f"gloss {gloss!r} carries several labels: {', '.join(self.codes)}")


# -- autodiff / models -------------------------------------------------------


class ShapeMismatch(PhonorecError, ValueError):
    pass


class UnnormalizedAdjacency(PhonorecError, ValueError):
    pass


class IndexOutOfRange(PhonorecError, IndexError):
    pass


class NonFiniteError(PhonorecError, FloatingPointError):
    """A forward op produced inf or nan."""


# -- train -------------------------------------------------------------------


class NonFiniteLoss(PhonorecError, FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        self.epoch = epoch
        self.batch = batch
        msg = f"non-finite loss at epoch {epoch}, batch {batch}"
        super().__init__(msg + (f": {detail}" if detail else ""))


class EmptySplit(PhonorecError, ValueError):
    pass


# -- eval --------------------------------------------------------------------


class EmptyMatrix(PhonorecError, ValueError):
    pass


class RowSumMismatch(PhonorecError, ValueError):
    pass


class MismatchedTestSets(PhonorecError, ValueError):
    pass


class ConfigError(PhonorecError, ValueError):
    pass
