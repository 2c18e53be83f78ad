"""Session configuration: a validated key-value tree with JSON persistence.

Every tunable constant in the engine lives here with its default.  Files are
UTF-8 JSON; unknown keys are rejected so typos fail loudly.  Dotted-path
overrides (``lattice.rows=16``) support CLI flags.  Loading validates the
parameter table against the integrator stability bound so a config that
would clamp at build time is refused up front.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

from ..baseline import BaselineParams, ZONE_RETINA, ZONE_RPE, ZONE_VITREOUS
from ..dynamics import ExciteParams
from ..errors import ConfigError
from ..ingest import PhantomConfig
from ..lattice import ILM, RETINA, RPE, VITREOUS, ParamTable, stiffness_calibration

__all__ = ["SessionConfig", "load_config", "save_config", "parse_config",
           "apply_overrides"]


@dataclass
class AudioSection:
    rate: int = 44100
    block_size: int = 256
    output_gain: float = 0.1
    tail_s: float = 1.0
    label_weights: dict = field(default_factory=dict)  # pickup overrides


@dataclass
class AnatomySection:
    smoothing: float = 10.0
    conf_threshold: float = 0.3
    knot_spacing: int = 8
    huber_delta: float = 3.0
    huber_max_iter: int = 20
    huber_tol: float = 1e-6
    tip_ema_alpha: float = 0.6
    recompute_rotation: bool = False
    roi_width: int = 256
    roi_height: int = 192
    roi_vitreous_frac: float = 0.22
    roi_search_radius: float = 50.0
    roi_direct_radius: float = 3.0


@dataclass
class LatticeSection:
    rows: int = 12
    cols: int = 16
    w_thin: float = 3.0
    layer_band_px: float = 2.0
    neighborhood: str = "auto"          # "auto" | "1" | "2"
    sub_rpe_delta: bool = True
    freq_ref_hz: float = 440.0
    k_ref: float = 400.0
    anchor_coeff: float = 0.25
    damping_scale: float = 25.0
    mass: dict = field(default_factory=lambda: {
        VITREOUS: 1.0, ILM: 1.0, RETINA: 1.0, RPE: 1.0})
    stiffness: dict = field(default_factory=lambda: {
        VITREOUS: 40.0, ILM: 900.0, RETINA: 400.0, RPE: 2000.0})
    damping: dict = field(default_factory=lambda: {
        VITREOUS: 0.8, ILM: 0.1, RETINA: 0.3, RPE: 0.05})
    order: dict = field(default_factory=lambda: {
        VITREOUS: 1, ILM: 2, RETINA: 1, RPE: 2})


@dataclass
class ExciteSection:
    a0: float = 3.0e5
    a0_def: float = 6.0e6
    v_min: float = 5.0
    v_ref: float = 100.0
    k_ref: float = 400.0
    crossing_gain: float = 4.0
    f_min: float = 0.25
    jitter_max_ms: float = 50.0
    envelope_ms: float = 3.0
    window_w: int = 64


@dataclass
class BaselineSection:
    pitch_vitreous: float = 220.0
    pitch_retina: float = 440.0
    pitch_rpe: float = 880.0
    rate_min: float = 2.0
    rate_max: float = 12.0
    pulse_env_ms: float = 25.0
    amplitude: float = 0.4
    faster_when_closer: bool = True


@dataclass
class PhantomSection:
    width: int = 512
    height: int = 512
    fps: float = 30.0
    bleb_a_max: float = 60.0
    bleb_v0: float = 2.0
    bleb_sigma: float = 40.0
    inject_rate: float = 1.0
    shadow_halfwidth: int = 6
    shadow_conf_factor: float = 0.2
    shadow_drop_p: float = 0.5
    tilt_deg: float = 0.0
    script: str = "bleb"
    frames: int = 315


@dataclass
class RuntimeSection:
    frame_budget_ms: float = 28.0
    analysis_stride: int = 1
    buffer_ahead_blocks: int = 24


@dataclass
class SessionConfig:
    method: str = "proposed"
    seed: int = 0
    audio: AudioSection = field(default_factory=AudioSection)
    anatomy: AnatomySection = field(default_factory=AnatomySection)
    lattice: LatticeSection = field(default_factory=LatticeSection)
    excite: ExciteSection = field(default_factory=ExciteSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    runtime: RuntimeSection = field(default_factory=RuntimeSection)

    # -- derived engine objects ---------------------------------------------

    def param_table(self) -> ParamTable:
        return ParamTable(mass=dict(self.lattice.mass),
                          stiffness=dict(self.lattice.stiffness),
                          damping=dict(self.lattice.damping),
                          order=dict(self.lattice.order),
                          w_thin=self.lattice.w_thin)

    def k_cal(self) -> float:
        return stiffness_calibration(self.lattice.freq_ref_hz,
                                     self.lattice.k_ref,
                                     anchor_coeff=self.lattice.anchor_coeff)

    def excite_params(self) -> ExciteParams:
        e = self.excite
        rate = self.audio.rate
        return ExciteParams(
            a0=e.a0, a0_def=e.a0_def, v_min=e.v_min, v_ref=e.v_ref,
            k_ref=e.k_ref, crossing_gain=e.crossing_gain, f_min=e.f_min,
            jitter_max_samples=int(round(e.jitter_max_ms * 1e-3 * rate)),
            envelope_samples=max(1, int(round(e.envelope_ms * 1e-3 * rate))))

    def baseline_params(self) -> BaselineParams:
        b = self.baseline
        return BaselineParams(
            pitches={ZONE_VITREOUS: b.pitch_vitreous,
                     ZONE_RETINA: b.pitch_retina,
                     ZONE_RPE: b.pitch_rpe},
            rate_min=b.rate_min, rate_max=b.rate_max,
            pulse_env_ms=b.pulse_env_ms, amplitude=b.amplitude,
            faster_when_closer=b.faster_when_closer)

    def phantom_config(self) -> PhantomConfig:
        p = self.phantom
        return PhantomConfig(
            width=p.width, height=p.height, bleb_a_max=p.bleb_a_max,
            bleb_v0=p.bleb_v0, bleb_sigma=p.bleb_sigma,
            inject_rate=p.inject_rate, shadow_halfwidth=p.shadow_halfwidth,
            shadow_conf_factor=p.shadow_conf_factor,
            shadow_drop_p=p.shadow_drop_p)

    def validate(self):
        if self.method not in ("proposed", "baseline"):
            raise ConfigError(f"unknown method '{self.method}'")
        if self.audio.block_size < 16:
            raise ConfigError("audio.block_size too small")
        if self.lattice.neighborhood not in ("auto", "1", "2"):
            raise ConfigError("lattice.neighborhood must be auto, 1 or 2")
        if self.runtime.analysis_stride < 1:
            raise ConfigError("runtime.analysis_stride must be >= 1")
        # stability bound: the strongest possible spring (intensity factor
        # up to 1.5) must integrate stably without build-time clamping
        k_max = max(self.lattice.stiffness.values()) * 1.5 * self.k_cal()
        m_min = min(self.lattice.mass.values())
        omega = math.sqrt(2.0 * k_max / m_min)
        if omega / self.audio.rate > 0.5:
            raise ConfigError(
                f"parameter table violates the stability bound "
                f"(omega*dt = {omega / self.audio.rate:.3f} > 0.5); "
                f"lower stiffness or freq_ref_hz")
        self.baseline_params()  # raises on bad pitches/rates
        return self


def _field_default(f):
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return f.default


def _from_dict(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"expected object at '{path or 'root'}'")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{path}{key}'")
        default = _field_default(fields[key])
        if dataclasses.is_dataclass(default):
            kwargs[key] = _from_dict(type(default), value, path=f"{path}{key}.")
        elif isinstance(default, dict) and default:
            unknown = set(value) - set(default)
            if unknown:
                raise ConfigError(
                    f"unknown config key '{path}{key}.{sorted(unknown)[0]}'")
            kwargs[key] = {**default, **value}
        else:
            kwargs[key] = value
    return cls(**kwargs)


def parse_config(data: dict) -> SessionConfig:
    """Build a validated SessionConfig from a (possibly partial) dict."""
    cfg = _from_dict(SessionConfig, data)
    cfg.validate()
    return cfg


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def serialize(cfg: SessionConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load_config(path=None) -> SessionConfig:
    if path is None:
        return SessionConfig().validate()
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(json.load(f))


def save_config(cfg: SessionConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize(cfg))


def apply_overrides(cfg: SessionConfig, overrides) -> SessionConfig:
    """Apply dotted-path overrides like ``lattice.rows=16``.

    Values parse as JSON when possible, else stay strings.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise ConfigError(f"unknown config key '{key}'")
            target = getattr(target, part)
        leaf = parts[-1]
        if isinstance(target, dict):
            target[leaf] = value
        else:
            if not hasattr(target, leaf):
                raise ConfigError(f"unknown config key '{key}'")
            current = getattr(target, leaf)
            if isinstance(current, dict) and isinstance(value, dict):
                current.update(value)
            else:
                setattr(target, leaf, value)
    cfg.validate()
    return cfg
