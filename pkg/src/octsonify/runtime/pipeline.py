"""Per-frame analysis: segmentation evidence in, events and snapshots out.

The session owns the tissue-aligned frame of reference.  At the first frame
it estimates the rotation, fits the layer curves, fits the needle, places
the ROI, and builds the lattice.  Every later frame refits curves and the
needle (falling back to the previous frame on thin evidence), tracks the
tip, measures the deformation signal, and emits excitation events with
confidence-driven onset jitter.

Anchor geometry is not applied here: each result carries the fitted curves
as an immutable snapshot, and the audio side applies them at its next block
boundary.  The session only reads the model for labels and node positions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import anatomy, dynamics
from ..anatomy import TipTracker
from ..baseline import classify_zone, depth_fraction
from ..errors import DegenerateOrientationError, InsufficientEvidenceError
from ..ingest import SegFrame
from ..lattice import LABELS, build_lattice, update_anchors
from .config import SessionConfig

__all__ = ["AnalysisSession", "FrameResult"]


@dataclass
class FrameResult:
    frame: int
    t: float
    events: list                    # ExcitationEvent, onset = jitter offset
    curves: tuple | None            # (ilm, rpe) snapshot for anchor updates
    f_ilm: float
    zone: str | None
    u: float
    c_ilm: float
    c_rpe: float
    crossing: str | None            # "vitreous->ILM" style tag
    tip: tuple | None               # rotated frame
    tip_raw: tuple | None           # original frame
    provenance: str | None
    timings: dict = field(default_factory=dict)
    anchor_rejected: bool = False
    event_rows: list = field(default_factory=list)  # (source, label, value)


class AnalysisSession:
    def __init__(self, config: SessionConfig):
        self.cfg = config
        self.model = None
        self.roi = None
        self.theta = 0.0
        self.excite_params = config.excite_params()
        self.rng = np.random.default_rng(config.seed + 101)
        self.tracker = TipTracker(alpha=config.anatomy.tip_ema_alpha)
        self._ilm = None
        self._rpe = None
        self._prev_ilm = None
        self._prev_rpe = None
        self._needle = None
        self._prev_tip = None
        self._prev_t = None
        self._prev_label_code = None
        self._frame = 0

    # -- helpers -------------------------------------------------------------

    def _fit_curves(self, seg: SegFrame):
        a = self.cfg.anatomy
        domain = (0, seg.width - 1)
        curves = []
        for layer, prev in (("ilm", self._ilm), ("rpe", self._rpe)):
            samples = anatomy.rotated_segment_samples(seg, layer, self.theta)
            try:
                curve = anatomy.fit_layer_spline(
                    samples, lam=a.smoothing, domain=domain,
                    conf_threshold=a.conf_threshold,
                    knot_spacing=a.knot_spacing)
            except InsufficientEvidenceError:
                if prev is None:
                    raise
                curve = prev  # keep last good geometry
            curves.append(curve)
        return curves

    def _fit_needle(self, seg: SegFrame):
        a = self.cfg.anatomy
        if seg.needle_pixels.size:
            center = ((seg.width - 1) / 2.0, (seg.height - 1) / 2.0)
            pix = anatomy.rotate_points(seg.needle_pixels, self.theta, center)
            try:
                return anatomy.fit_needle_line(
                    pix, delta=a.huber_delta, max_iter=a.huber_max_iter,
                    tol=a.huber_tol)
            except (InsufficientEvidenceError, DegenerateOrientationError):
                pass
        return self._needle

    def _window_conf(self, seg: SegFrame, window):
        """Mean segmentation confidence near the tip, per layer."""
        lo, hi = window
        cols = np.arange(max(lo, 0), min(hi + 1, seg.width))
        if cols.size == 0:
            return 0.0, 0.0
        return (float(np.mean(seg.conf_ilm[cols])),
                float(np.mean(seg.conf_rpe[cols])))

    # -- main entry ------------------------------------------------------------

    def process(self, seg: SegFrame, bscan=None) -> FrameResult:
        cfg = self.cfg
        idx = self._frame
        self._frame += 1
        timings = {}
        clock = time.perf_counter

        t0 = clock()
        if idx == 0 or cfg.anatomy.recompute_rotation:
            try:
                self.theta = anatomy.estimate_tissue_rotation(
                    seg, conf_threshold=cfg.anatomy.conf_threshold,
                    delta=cfg.anatomy.huber_delta)
            except InsufficientEvidenceError:
                self.theta = 0.0
        ilm, rpe = self._fit_curves(seg)
        self._prev_ilm, self._prev_rpe = self._ilm, self._rpe
        self._ilm, self._rpe = ilm, rpe
        timings["spline"] = (clock() - t0) * 1e3

        t0 = clock()
        self._needle = self._fit_needle(seg)
        tip = self.tracker.update(self._needle) if self._needle else None
        if self.roi is None:
            self.roi = anatomy.extract_roi(
                seg, self.theta, self._needle, ilm,
                size=(cfg.anatomy.roi_width, cfg.anatomy.roi_height),
                vitreous_frac=cfg.anatomy.roi_vitreous_frac,
                search_radius=cfg.anatomy.roi_search_radius,
                direct_radius=cfg.anatomy.roi_direct_radius)
        timings["geometry"] = (clock() - t0) * 1e3

        t0 = clock()
        if self.model is None:
            self.model = build_lattice(
                self.roi, (cfg.lattice.rows, cfg.lattice.cols), ilm, rpe,
                intensity=bscan.intensity if bscan is not None else None,
                intensity_theta=self.theta,
                table=cfg.param_table(),
                neighborhood=cfg.lattice.neighborhood,
                band=cfg.lattice.layer_band_px,
                sub_rpe_delta=cfg.lattice.sub_rpe_delta,
                k_cal=cfg.k_cal(), d_cal=cfg.lattice.damping_scale,
                anchor_coeff=cfg.lattice.anchor_coeff,
                audio_rate=cfg.audio.rate)
        timings["lattice"] = (clock() - t0) * 1e3

        t0 = clock()
        events = []
        event_rows = []
        f_ilm = 0.0
        crossing_tag = None
        zone = None
        u = 0.0
        c_ilm = c_rpe = 0.0
        window = None
        if tip is not None:
            dt_frame = (seg.t - self._prev_t) if self._prev_t is not None else None
            vel = (0.0, 0.0)
            if dt_frame and dt_frame > 0 and self._prev_tip is not None:
                vel = ((tip[0] - self._prev_tip[0]) / dt_frame,
                       (tip[1] - self._prev_tip[1]) / dt_frame)

            node = self.model.nearest_node(tip[0], tip[1])
            code = int(self.model.label_code[node])
            crossing = (self._prev_label_code is not None
                        and code != self._prev_label_code)
            if crossing:
                crossing_tag = (f"{LABELS[self._prev_label_code]}->"
                                f"{LABELS[code]}")
            self._prev_label_code = code

            tool_events = dynamics.excite_tool(
                tip, vel, self.model, crossing=crossing,
                params=self.excite_params)
            for i, ev in enumerate(tool_events):
                impulse = crossing and i == len(tool_events) - 1
                event_rows.append(
                    ("tool", crossing_tag if impulse else LABELS[code],
                     ev.amplitude))
            events.extend(tool_events)

            try:
                d_now = dynamics.compute_separation(
                    ilm, rpe, tip[0], cfg.excite.window_w,
                    domain=self.roi.columns)
                window = (int(d_now.columns[0]), int(d_now.columns[-1]))
                if self._prev_ilm is not None:
                    d_before = dynamics.compute_separation(
                        self._prev_ilm, self._prev_rpe, tip[0],
                        cfg.excite.window_w, domain=self.roi.columns)
                    if d_before.columns.shape == d_now.columns.shape and \
                            np.array_equal(d_before.columns, d_now.columns):
                        signal, ev = dynamics.deformation_excitation(
                            d_now, d_before, self.model,
                            params=self.excite_params)
                        f_ilm = signal.f_ilm
                        if ev is not None:
                            events.append(ev)
                            event_rows.append(("deformation", "f_ilm", f_ilm))
            except (InsufficientEvidenceError, ValueError):
                pass

            zone = classify_zone(tip, ilm, rpe) \
                if ilm.domain[0] <= tip[0] <= ilm.domain[1] else None
            u = depth_fraction(tip, ilm, rpe)
            self._prev_tip = tip

        if window is not None:
            c_ilm, c_rpe = self._window_conf(seg, window)
        else:
            c_ilm = float(np.mean(seg.conf_ilm))
            c_rpe = float(np.mean(seg.conf_rpe))

        # confidence-driven onset jitter, one draw per event
        for ev in events:
            ev.onset = dynamics.jitter_schedule(
                c_ilm, c_rpe, self.rng,
                j_max=self.excite_params.jitter_max_samples)
        timings["excitation"] = (clock() - t0) * 1e3
        self._prev_t = seg.t

        tip_raw = None
        if tip is not None:
            center = ((seg.width - 1) / 2.0, (seg.height - 1) / 2.0)
            tr = anatomy.rotate_points([tip], self.theta, center, inverse=True)[0]
            tip_raw = (float(tr[0]), float(tr[1]))

        return FrameResult(
            frame=idx, t=seg.t, events=events, curves=(ilm, rpe),
            f_ilm=f_ilm, zone=zone, u=u, c_ilm=c_ilm, c_rpe=c_rpe,
            crossing=crossing_tag, tip=tip, tip_raw=tip_raw,
            provenance=self.roi.provenance if self.roi else None,
            timings=timings, event_rows=event_rows)

    def apply_anchors(self, curves) -> bool:
        """Apply a curve snapshot to the model (audio-side call)."""
        if self.model is None or curves is None:
            return False
        return update_anchors(self.model, curves[0], curves[1])
