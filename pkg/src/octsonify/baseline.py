"""Comparison sonifier: static zone pitch with pulse-rate proximity coding.

Three anatomical zones each own a fixed pitch; a pulse train gates the tone
with a rate that ramps linearly with the tip's depth fraction between the
layer boundaries, so pulses come faster as the tip nears the deep boundary
(a sign flag flips the convention).  Carrier phase is continuous across
blocks, and zone changes crossfade over 10 ms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .anatomy import LayerCurve
from .errors import InsufficientEvidenceError

__all__ = ["ZONE_VITREOUS", "ZONE_RETINA", "ZONE_RPE", "BaselineParams",
           "classify_zone", "depth_fraction", "BaselineSynth"]

ZONE_VITREOUS = "vitreous"
ZONE_RETINA = "intraretinal"
ZONE_RPE = "at_rpe"


@dataclass(frozen=True)
class BaselineParams:
    pitches: dict = field(default_factory=lambda: {
        ZONE_VITREOUS: 220.0, ZONE_RETINA: 440.0, ZONE_RPE: 880.0})
    rate_min: float = 2.0       # pulses / s
    rate_max: float = 12.0
    pulse_env_ms: float = 25.0
    amplitude: float = 0.4
    crossfade_ms: float = 10.0
    faster_when_closer: bool = True

    def __post_init__(self):
        if not (self.rate_max > self.rate_min > 0):
            raise ValueError("need rate_max > rate_min > 0")
        pitches = set(self.pitches.values())
        if len(pitches) != 3 or any(not 100.0 <= p <= 4000.0 for p in pitches):
            raise ValueError("zone pitches must be distinct and in 100..4000 Hz")

    def rate(self, u: float) -> float:
        u = min(max(float(u), 0.0), 1.0)
        if not self.faster_when_closer:
            u = 1.0 - u
        return self.rate_min + (self.rate_max - self.rate_min) * u


def classify_zone(tip, ilm: LayerCurve, rpe: LayerCurve) -> str:
    """Zone of a tip point: above ILM, between the layers, or at/below RPE."""
    x, y = float(tip[0]), float(tip[1])
    for curve in (ilm, rpe):
        if not (curve.domain[0] <= x <= curve.domain[1]):
            raise InsufficientEvidenceError(
                f"tip column {x:.1f} outside curve domain {curve.domain}")
    iy = float(ilm.y_at(x))
    ry = float(rpe.y_at(x))
    if y < iy:
        return ZONE_VITREOUS
    if y < ry:
        return ZONE_RETINA
    return ZONE_RPE


def depth_fraction(tip, ilm: LayerCurve, rpe: LayerCurve) -> float:
    """Tip depth as a fraction of the ILM-to-RPE traversal, clamped to [0, 1]."""
    x, y = float(tip[0]), float(tip[1])
    iy = float(ilm.y_at(x))
    ry = float(rpe.y_at(x))
    if ry <= iy:
        return 0.0
    return min(max((y - iy) / (ry - iy), 0.0), 1.0)


class BaselineSynth:
    """Block renderer with carrier phase, pulse phase, and crossfade state."""

    def __init__(self, params: BaselineParams | None = None, rate=44100):
        self.params = params or BaselineParams()
        self.fs = int(rate)
        self._phase = 0.0          # carrier phase, cycles
        self._old_phase = 0.0
        self._pulse_phase = 1.0    # starts ready to fire a pulse
        self._zone = None
        self._fade_left = 0
        self._fade_total = max(1, int(self.params.crossfade_ms * 1e-3 * rate))
        self._old_freq = 0.0

    def block(self, zone: str, u: float, n: int) -> np.ndarray:
        """Render n samples of the zone tone gated by the pulse train."""
        p = self.params
        freq = p.pitches[zone]
        if self._zone is None:
            self._zone = zone
        elif zone != self._zone:
            self._old_freq = p.pitches[self._zone]
            self._old_phase = self._phase
            self._fade_left = self._fade_total
            self._zone = zone

        rate = p.rate(u)
        idx = np.arange(1, n + 1, dtype=np.float64)
        phases = self._phase + freq / self.fs * idx
        tone = np.sin(2.0 * np.pi * phases)
        self._phase = float(phases[-1] % 1.0)

        pulse = self._pulse_phase + rate / self.fs * idx
        self._pulse_phase = float(pulse[-1] % 1.0)
        # time since the last pulse onset, in seconds
        since = (pulse - np.floor(pulse)) / rate
        env_len = p.pulse_env_ms * 1e-3
        gate = np.where(since < env_len,
                        0.5 * (1.0 - np.cos(2.0 * np.pi * since / env_len)),
                        0.0)

        out = p.amplitude * tone * gate
        if self._fade_left > 0:
            take = min(self._fade_left, n)
            old_phases = self._old_phase + self._old_freq / self.fs * idx[:take]
            old_tone = np.sin(2.0 * np.pi * old_phases)
            ramp = (np.arange(take) + self._fade_total - self._fade_left) \
                / self._fade_total
            out[:take] = (p.amplitude * gate[:take]
                          * ((1.0 - ramp) * old_tone + ramp * tone[:take]))
            self._old_phase = float(old_phases[-1] % 1.0)
            self._fade_left -= take
        return out
