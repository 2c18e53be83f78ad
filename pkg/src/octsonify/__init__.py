"""Sonification engine turning retinal-layer segmentation streams into audio.

Pipeline: segmentation frames -> smooth layer curves and needle geometry ->
anatomy-anchored mass-spring-damper lattice -> audio-rate integration and
pickup -> mono audio stream.  A zone-pitch / pulse-rate sonifier is included
as a comparison method, plus a synthetic injection phantom for driving the
whole pipeline without recorded data.
"""

__version__ = "0.1.0"

from .errors import (
    DegenerateOrientationError,
    FrameValidationError,
    InsufficientEvidenceError,
    OctSonifyError,
    SequenceError,
    SequenceParseError,
    SimulationFault,
)

__all__ = [
    "OctSonifyError",
    "SequenceError",
    "SequenceParseError",
    "FrameValidationError",
    "InsufficientEvidenceError",
    "DegenerateOrientationError",
    "SimulationFault",
    "__version__",
]
