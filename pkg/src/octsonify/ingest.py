"""Sequence input and the synthetic injection phantom.

Recorded data flows in as JSON Lines, one object per frame:

    {"t": float, "w": int,
     "ilm": [float|null, ...], "rpe": [float|null, ...],
     "cilm": [float, ...], "crpe": [float, ...],
     "needle": {"pts": [[x, y], ...], "tip": [x, y]|null, "conf": float},
     "img": "relative/path.pgm"|null}

All per-column arrays have length ``w``.  Missing layer values are ``null``
on disk and NaN in memory.  Optional intensity images are 8-bit binary PGM
files referenced relative to the sequence file.

The phantom produces the same frame types from a simulated injection scene:
smooth baseline layers, a straight needle shaft, a saturating subretinal
bleb, and a confidence shadow under the shaft.  Every step is a pure
function of (state, control, seed), so identical scripts replay bit-exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FrameValidationError, SequenceError, SequenceParseError

__all__ = [
    "BScanFrame",
    "SegFrame",
    "PhantomConfig",
    "PhantomControl",
    "PhantomState",
    "load_sequence",
    "write_sequence",
    "read_pgm",
    "write_pgm",
    "new_phantom",
    "phantom_step",
    "scripted_control",
    "bleb_height",
]


# ---------------------------------------------------------------------------
# Frame types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BScanFrame:
    """A single grayscale B-scan, intensities in [0, 1]."""

    t: float
    intensity: np.ndarray  # (H, W) float64

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]

    def validate(self, frame_index=None):
        h, w = self.intensity.shape
        if h < 32 or w < 32:
            raise FrameValidationError(
                f"image too small ({h}x{w}), minimum 32x32", frame=frame_index)
        lo = float(np.min(self.intensity))
        hi = float(np.max(self.intensity))
        if lo < 0.0 or hi > 1.0:
            raise FrameValidationError(
                f"intensity outside [0, 1] (range {lo:.4g}..{hi:.4g})",
                frame=frame_index)


@dataclass(frozen=True)
class SegFrame:
    """Per-frame layer curves with confidence, plus needle pixel evidence.

    ``ilm`` and ``rpe`` are per-column axial positions (row index, larger is
    deeper); NaN marks a missing column.  Confidences are in [0, 1].
    """

    t: float
    width: int
    ilm: np.ndarray        # (W,) float64, NaN = missing
    rpe: np.ndarray        # (W,) float64, NaN = missing
    conf_ilm: np.ndarray   # (W,) float64 in [0, 1]
    conf_rpe: np.ndarray   # (W,) float64 in [0, 1]
    needle_pixels: np.ndarray  # (N, 2) float64, columns (x, y)
    needle_tip: tuple[float, float] | None
    needle_conf: float
    height: int = 512

    def validate(self, frame_index=None):
        w = self.width
        for name, arr in (("ilm", self.ilm), ("rpe", self.rpe),
                          ("cilm", self.conf_ilm), ("crpe", self.conf_rpe)):
            if arr.shape != (w,):
                raise FrameValidationError(
                    f"array '{name}' has length {arr.shape[0]}, expected {w}",
                    frame=frame_index)
        for name, arr in (("cilm", self.conf_ilm), ("crpe", self.conf_rpe)):
            bad = np.nonzero((arr < 0.0) | (arr > 1.0))[0]
            if bad.size:
                raise FrameValidationError(
                    f"confidence '{name}' = {arr[bad[0]]:.4g} outside [0, 1]",
                    frame=frame_index, column=int(bad[0]))
        both = ~np.isnan(self.ilm) & ~np.isnan(self.rpe)
        inverted = np.nonzero(both & (self.rpe < self.ilm))[0]
        if inverted.size:
            c = int(inverted[0])
            raise FrameValidationError(
                f"rpe ({self.rpe[c]:.2f}) above ilm ({self.ilm[c]:.2f})",
                frame=frame_index, column=c)
        if not 0.0 <= self.needle_conf <= 1.0:
            raise FrameValidationError(
                f"needle confidence {self.needle_conf:.4g} outside [0, 1]",
                frame=frame_index)
        if self.needle_pixels.size:
            xs = self.needle_pixels[:, 0]
            ys = self.needle_pixels[:, 1]
            if xs.min() < 0 or xs.max() >= w or ys.min() < 0 or ys.max() >= self.height:
                raise FrameValidationError(
                    "needle pixel outside frame bounds", frame=frame_index)
        if self.needle_tip is not None:
            tx, ty = self.needle_tip
            if not (0 <= tx < w and 0 <= ty < self.height):
                raise FrameValidationError(
                    f"needle tip ({tx:.1f}, {ty:.1f}) outside frame bounds",
                    frame=frame_index)

    def defined_columns(self, layer: str) -> np.ndarray:
        arr = self.ilm if layer == "ilm" else self.rpe
        return np.nonzero(~np.isnan(arr))[0]


# ---------------------------------------------------------------------------
# PGM (binary, 8-bit) helpers
# ---------------------------------------------------------------------------

def write_pgm(path, intensity: np.ndarray):
    """Write a [0, 1] float image as binary 8-bit PGM."""
    h, w = intensity.shape
    data = np.clip(np.round(intensity * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into a [0, 1] float image."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise SequenceParseError(f"not a binary PGM file: {path}")
        dims = f.readline().split()
        while dims and dims[0].startswith(b"#"):
            dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline().strip())
        raw = f.read(w * h)
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / float(maxval)


# ---------------------------------------------------------------------------
# JSONL sequence I/O
# ---------------------------------------------------------------------------

def _column_list(arr: np.ndarray) -> list:
    return [None if math.isnan(v) else v for v in arr.tolist()]


def _column_array(values, width, name, line) -> np.ndarray:
    if len(values) != width:
        raise SequenceParseError(
            f"array '{name}' has length {len(values)}, expected {width}", line=line)
    return np.array([np.nan if v is None else float(v) for v in values])


def load_sequence(path, frame_height=512):
    """Yield (SegFrame, BScanFrame | None) pairs from a JSONL sequence file.

    Frames are validated and must carry strictly increasing timestamps.
    Missing per-column values stay missing (NaN); nothing is interpolated.
    """
    base = os.path.dirname(os.path.abspath(path))
    prev_t = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise SequenceParseError(f"malformed record: {e.msg}", line=lineno)
            try:
                seg, img_rel = _frame_from_obj(obj, lineno)
            except KeyError as e:
                raise SequenceParseError(f"missing field {e}", line=lineno)
            bscan = None
            if img_rel is not None:
                intensity = read_pgm(os.path.join(base, img_rel))
                bscan = BScanFrame(t=seg.t, intensity=intensity)
                bscan.validate(frame_index=lineno - 1)
                seg = replace(seg, height=bscan.height)
            else:
                seg = replace(seg, height=frame_height)
            seg.validate(frame_index=lineno - 1)
            if prev_t is not None and seg.t <= prev_t:
                raise SequenceError(
                    f"timestamps not strictly increasing at line {lineno}: "
                    f"{seg.t} after {prev_t}")
            prev_t = seg.t
            yield seg, bscan


def _frame_from_obj(obj, lineno):
    w = int(obj["w"])
    needle = obj["needle"]
    pts = np.array(needle["pts"], dtype=np.float64).reshape(-1, 2)
    tip = needle["tip"]
    seg = SegFrame(
        t=float(obj["t"]),
        width=w,
        ilm=_column_array(obj["ilm"], w, "ilm", lineno),
        rpe=_column_array(obj["rpe"], w, "rpe", lineno),
        conf_ilm=_column_array(obj["cilm"], w, "cilm", lineno),
        conf_rpe=_column_array(obj["crpe"], w, "crpe", lineno),
        needle_pixels=pts,
        needle_tip=None if tip is None else (float(tip[0]), float(tip[1])),
        needle_conf=float(needle["conf"]),
    )
    return seg, obj.get("img")


def write_sequence(frames, path, write_images=False):
    """Write frames to a JSONL sequence file.

    ``frames`` yields SegFrame or (SegFrame, BScanFrame | None).  Images are
    only written when ``write_images`` is set; they land next to the
    sequence file as frame_NNNNNN.pgm.  Loading the result reproduces every
    defined SegFrame field bit-exactly.
    """
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for item in frames:
            if isinstance(item, tuple):
                seg, bscan = item
            else:
                seg, bscan = item, None
            img_rel = None
            if write_images and bscan is not None:
                img_rel = f"frame_{count:06d}.pgm"
                write_pgm(os.path.join(base, img_rel), bscan.intensity)
            obj = {
                "t": seg.t,
                "w": seg.width,
                "ilm": _column_list(seg.ilm),
                "rpe": _column_list(seg.rpe),
                "cilm": seg.conf_ilm.tolist(),
                "crpe": seg.conf_rpe.tolist(),
                "needle": {
                    "pts": seg.needle_pixels.tolist(),
                    "tip": None if seg.needle_tip is None else list(seg.needle_tip),
                    "conf": seg.needle_conf,
                },
                "img": img_rel,
            }
            f.write(json.dumps(obj) + "\n")
            count += 1
    return count


# ---------------------------------------------------------------------------
# Injection phantom
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomConfig:
    width: int = 512
    height: int = 512
    retina_depth_frac: float = 0.45   # mean ILM depth as fraction of height
    retina_thickness: float = 90.0    # mean ILM->RPE separation, px
    bleb_a_max: float = 60.0          # saturation elevation, px
    bleb_v0: float = 2.0              # volume scale of the growth law
    bleb_sigma: float = 40.0          # lateral spread of the bleb, px
    inject_rate: float = 1.0          # volume units per second
    shadow_halfwidth: int = 6         # columns each side of the shaft
    shadow_conf_factor: float = 0.2
    shadow_drop_p: float = 0.5
    needle_conf: float = 1.0
    render_images: bool = True


@dataclass(frozen=True)
class PhantomControl:
    dx: float = 0.0
    dy: float = 0.0
    inject: bool = False
    dangle: float = 0.0


@dataclass(frozen=True)
class PhantomState:
    t: float
    tip: tuple[float, float]
    angle: float                 # shaft angle, degrees from horizontal
    tilt: float                  # retina tilt, degrees
    injected_volume: float
    bleb_center: float | None
    bleb_amplitude: float
    rng_seed: int
    step_index: int
    ilm_base: np.ndarray
    rpe_base: np.ndarray
    config: PhantomConfig = field(default_factory=PhantomConfig)
    inject_effective: bool = False
    inject_blocked: bool = False


def bleb_height(volume, a_max, v0):
    """Saturating elevation law: a_max * (1 - exp(-volume / v0))."""
    return a_max * (1.0 - math.exp(-volume / v0))


def new_phantom(seed=0, tilt=0.0, config: PhantomConfig | None = None,
                tip=None, angle=45.0) -> PhantomState:
    cfg = config or PhantomConfig()
    w, h = cfg.width, cfg.height
    x = np.arange(w, dtype=np.float64)
    center = (w - 1) / 2.0
    slope = math.tan(math.radians(tilt))
    # texture terms are even about the center so they stay uncorrelated
    # with the tilt slope and the ground-truth tilt remains recoverable
    ilm = (h * cfg.retina_depth_frac
           + 6.0 * np.cos(2.0 * np.pi * 2.0 * (x - center) / w)
           + slope * (x - center))
    rpe = ilm + cfg.retina_thickness + 4.0 * np.cos(2.0 * np.pi * (x - center) / w)
    if tip is None:
        tip = (w * 0.26, h * 0.21)
    return PhantomState(
        t=0.0, tip=(float(tip[0]), float(tip[1])), angle=float(angle),
        tilt=float(tilt), injected_volume=0.0, bleb_center=None,
        bleb_amplitude=0.0, rng_seed=int(seed), step_index=0,
        ilm_base=ilm, rpe_base=rpe, config=cfg)


def _deformed_curves(state: PhantomState):
    cfg = state.config
    ilm = state.ilm_base.copy()
    if state.bleb_center is not None and state.bleb_amplitude > 0.0:
        x = np.arange(cfg.width, dtype=np.float64)
        bump = state.bleb_amplitude * np.exp(
            -0.5 * ((x - state.bleb_center) / cfg.bleb_sigma) ** 2)
        ilm -= bump  # elevation: rows decrease, RPE stays put
    return ilm, state.rpe_base.copy()


def _shaft_points(state: PhantomState):
    """Needle pixels from the tip back along the shaft to the frame edge."""
    cfg = state.config
    a = math.radians(state.angle)
    dx, dy = math.cos(a), math.sin(a)
    tx, ty = state.tip
    # longest backward reach that stays inside the frame
    reach = cfg.width + cfg.height
    for delta, bound in ((dx, (tx, cfg.width - 1 - tx)),
                         (dy, (ty, cfg.height - 1 - ty))):
        if delta > 1e-12:
            reach = min(reach, bound[0] / delta)
        elif delta < -1e-12:
            reach = min(reach, -bound[1] / delta)
    if reach < 0:
        return np.zeros((0, 2))
    s = np.arange(0.0, reach + 1e-9, 1.0)
    pts = np.column_stack([tx - s * dx, ty - s * dy])
    keep = ((pts[:, 0] >= 0) & (pts[:, 0] < cfg.width)
            & (pts[:, 1] >= 0) & (pts[:, 1] < cfg.height))
    return pts[keep]


def _shaft_y_at(state: PhantomState, x):
    a = math.radians(state.angle)
    if abs(math.cos(a)) < 1e-9:
        return np.full_like(np.asarray(x, dtype=np.float64), -np.inf)
    slope = math.tan(a)
    return state.tip[1] + slope * (np.asarray(x, dtype=np.float64) - state.tip[0])


def phantom_step(state: PhantomState, control: PhantomControl, dt: float):
    """Advance the phantom one frame.

    Returns (new_state, SegFrame, BScanFrame).  Injection only takes effect
    while the tip sits between the ILM and the RPE at its column; an inject
    request outside that window is flagged on the returned state instead of
    raising.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = state.config
    step = state.step_index + 1
    rng = np.random.default_rng((state.rng_seed, step))

    tip = (min(max(state.tip[0] + control.dx, 0.0), cfg.width - 1.0),
           min(max(state.tip[1] + control.dy, 0.0), cfg.height - 1.0))
    angle = state.angle + control.dangle
    moved = replace(state, tip=tip, angle=angle)

    ilm_t, rpe_t = _deformed_curves(moved)
    xc = int(round(tip[0]))
    xc = min(max(xc, 0), cfg.width - 1)
    volume = state.injected_volume
    center = state.bleb_center
    effective = False
    blocked = False
    if control.inject:
        if ilm_t[xc] <= tip[1] <= rpe_t[xc]:
            volume += cfg.inject_rate * dt
            if center is None:
                center = tip[0]
            effective = True
        else:
            blocked = True
    amplitude = bleb_height(volume, cfg.bleb_a_max, cfg.bleb_v0)

    new_state = replace(
        moved, t=state.t + dt, injected_volume=volume, bleb_center=center,
        bleb_amplitude=amplitude, step_index=step,
        inject_effective=effective, inject_blocked=blocked)

    ilm, rpe = _deformed_curves(new_state)
    seg = _segment(new_state, ilm, rpe, rng)
    bscan = _render(new_state, ilm, rpe) if cfg.render_images else BScanFrame(
        t=new_state.t, intensity=np.zeros((32, 32)))
    return new_state, seg, bscan


def _segment(state: PhantomState, ilm, rpe, rng) -> SegFrame:
    cfg = state.config
    w = cfg.width
    conf_ilm = np.ones(w)
    conf_rpe = np.ones(w)
    ilm_obs = ilm.copy()
    rpe_obs = rpe.copy()

    pts = _shaft_points(state)
    if pts.size:
        cols = np.unique(np.round(pts[:, 0]).astype(int))
        lo = max(int(cols.min()) - cfg.shadow_halfwidth, 0)
        hi = min(int(cols.max()) + cfg.shadow_halfwidth, w - 1)
        band = np.arange(lo, hi + 1)
        shaft_y = _shaft_y_at(state, band)
        for arr, conf in ((ilm_obs, conf_ilm), (rpe_obs, conf_rpe)):
            below = arr[band] > shaft_y
            idx = band[below]
            conf[idx] *= cfg.shadow_conf_factor
            drop = rng.random(idx.size) < cfg.shadow_drop_p
            arr[idx[drop]] = np.nan
            conf[idx[drop]] = 0.0

    return SegFrame(
        t=state.t, width=w, ilm=ilm_obs, rpe=rpe_obs,
        conf_ilm=conf_ilm, conf_rpe=conf_rpe,
        needle_pixels=pts, needle_tip=state.tip,
        needle_conf=cfg.needle_conf, height=cfg.height)


def _render(state: PhantomState, ilm, rpe) -> BScanFrame:
    """Cosmetic B-scan: speckle background, bright layer bands, needle line."""
    cfg = state.config
    h, w = cfg.height, cfg.width
    rng = np.random.default_rng((state.rng_seed, state.step_index, 7))
    img = 0.08 + 0.05 * np.abs(rng.standard_normal((h, w)))
    rows = np.arange(h, dtype=np.float64)[:, None]
    img += 0.10 * ((rows >= ilm[None, :]) & (rows <= rpe[None, :]))
    img += 0.55 * np.exp(-0.5 * ((rows - ilm[None, :]) / 2.5) ** 2)
    img += 0.75 * np.exp(-0.5 * ((rows - rpe[None, :]) / 3.5) ** 2)
    pts = _shaft_points(state)
    for x, y in pts:
        xi, yi = int(round(x)), int(round(y))
        img[max(yi - 1, 0):yi + 2, xi] = 0.95
    return BScanFrame(t=state.t, intensity=np.clip(img, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Built-in control scripts
# ---------------------------------------------------------------------------

def scripted_control(script: str, t: float, fps: float) -> PhantomControl:
    """Deterministic per-frame control for the built-in scripts.

    ``bleb``  : advance along the shaft, pause intraretinally, inject, hold.
    ``sweep`` : slow lateral drift in the vitreous (no injection).
    ``idle``  : no motion.
    """
    if script == "idle":
        return PhantomControl()
    if script == "sweep":
        v = 20.0 / fps
        return PhantomControl(dx=v if (t % 8.0) < 4.0 else -v)
    if script == "bleb":
        # 45 degree shaft: equal x/y speed moves straight along it;
        # descend into the retina, settle, inject, settle again
        if t < 3.0:
            v = 50.0 / fps
            return PhantomControl(dx=v, dy=v)
        if t < 5.5:
            return PhantomControl()
        if t < 9.5:
            return PhantomControl(inject=True)
        return PhantomControl()
    raise ValueError(f"unknown phantom script '{script}'")
