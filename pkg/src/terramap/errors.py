"""Exception types raised across the package."""

from __future__ import annotations


class TerramapError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfigError(TerramapError):
    """A grid or run configuration violates a structural constraint."""


class InvalidPoseError(TerramapError):
    """A sensor pose is unusable (e.g. quaternion too far from unit norm)."""


class DegenerateLikelihoodError(TerramapError):
    """A filter update would normalize an all-(near-)zero posterior."""


class RangeViolationError(TerramapError):
    """A terrain edit would push heights outside the representable band."""


class MissingPoseError(TerramapError):
    """A scan file has no matching row in the pose table."""


class MalformedRowError(TerramapError):
    """A CSV row in a dataset could not be parsed.

    Carries the offending file and 1-based line number so batch ingestion
    failures are actionable.
    """

    def __init__(self, path, line_no, detail=""):
        self.path = str(path)
        self.line_no = int(line_no)
        self.detail = detail
        msg = f"{self.path}:{self.line_no}: malformed row"
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)
