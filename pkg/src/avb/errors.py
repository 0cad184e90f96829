"""Exception types shared across the library.

Every error raised on purpose by this package derives from :class:`AvbError`,
so callers can catch one type at the boundary. The subclasses mirror the
failure modes of the public operations: malformed inputs get a specific type
rather than a bare ``ValueError`` so tests (and users) can assert on them.
"""

from __future__ import annotations


class AvbError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AvbError):
    """Mismatched or invalid array shapes / lengths."""


class MissingModelFit(AvbError):
    """A model collection entry has no corresponding fit (or an unknown fit id was supplied)."""


class NonFiniteObjective(AvbError):
    """An objective value required to be finite was NaN or infinite."""


class DegenerateBox(AvbError):
    """A product-of-intervals state has an empty or inverted interval."""


class OutOfSupport(AvbError):
    """Interval endpoints stick out of the admissible coordinate box."""


class AbsoluteContinuityError(AvbError):
    """A discrete distribution puts mass where the reference distribution has none."""


class NumericalBreakdown(AvbError):
    """An iterative fit produced non-finite intermediate quantities.

    Carries the iteration index at which the breakdown was detected.
    """

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class CapacityError(AvbError):
    """A discretized space cannot hold what was asked of it (too many atoms / particles)."""


class ParseError(AvbError):
    """A data file could not be parsed.

    Carries the 1-based line number of the offending record.
    """

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class ConfigError(AvbError):
    """An experiment configuration failed validation."""
