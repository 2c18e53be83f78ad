"""Exception types shared across the engine."""


class OctSonifyError(Exception):
    """Base class for all engine errors."""


class SequenceParseError(OctSonifyError):
    """A sequence file record could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FrameValidationError(OctSonifyError):
    """A frame violates a field invariant (range, ordering, bounds)."""

    def __init__(self, message, frame=None, column=None):
        self.frame = frame
        self.column = column
        parts = []
        if frame is not None:
            parts.append(f"frame {frame}")
        if column is not None:
            parts.append(f"column {column}")
        if parts:
            message = f"{', '.join(parts)}: {message}"
        super().__init__(message)


class SequenceError(OctSonifyError):
    """Sequence-level invariant violated (ordering, emptiness)."""


class InsufficientEvidenceError(OctSonifyError):
    """Too few usable samples to fit a model."""


class DegenerateOrientationError(OctSonifyError):
    """Pixel cloud too vertical for a lateral line fit."""


class SimulationFault(OctSonifyError):
    """Non-finite value produced during lattice integration."""

    def __init__(self, message, node=None, spring=None):
        self.node = node
        self.spring = spring
        super().__init__(message)


class ConfigError(OctSonifyError):
    """Invalid or unknown configuration value."""
