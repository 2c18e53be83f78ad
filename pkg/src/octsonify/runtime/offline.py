"""Offline rendering: sequence file in, WAV plus logs out.

Runs the analysis session frame by frame and advances the audio clock to
each frame's next block boundary before applying that frame's anchor
snapshot and events, mirroring the live engine's ordering.  Single threaded
and seeded, so a (config, sequence) pair reproduces byte-identical output.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time

import numpy as np

from .. import dynamics
from ..baseline import BaselineSynth, ZONE_VITREOUS
from ..errors import SequenceError
from ..ingest import load_sequence
from ..lattice import LABELS
from ..render import (AudioBlock, Pickup, broadband_onset_metric,
                      save_spectrogram_csv, save_spectrogram_png, spectrogram,
                      write_wav)
from .config import SessionConfig
from .pipeline import AnalysisSession

__all__ = ["run_offline", "OfflineResult", "AudioEngine"]


class AudioEngine:
    """Block-clocked synthesis shared by the offline and live paths.

    For the proposed method it owns the lattice state, pending events, and
    pickup; for the baseline it owns the pulse synth and the latest
    (zone, u).  Time only moves in whole blocks.
    """

    def __init__(self, config: SessionConfig):
        self.cfg = config
        self.block = config.audio.block_size
        self.rate = config.audio.rate
        self.cursor = 0                    # samples rendered so far
        self.session = None
        self.state = None
        self.pickup = None
        self.pending = []
        self.events_applied = 0
        self._synth = BaselineSynth(config.baseline_params(), rate=self.rate)
        self._zone = ZONE_VITREOUS
        self._u = 0.0

    def bind(self, session: AnalysisSession):
        model = session.model
        weights = np.ones(len(model.nodes))
        for label, w in self.cfg.audio.label_weights.items():
            idx = model.nodes_with_label(label)
            weights[idx] = float(w)
        self.pickup = Pickup(weights, gain=self.cfg.audio.output_gain,
                             rate=self.rate)
        self.state = dynamics.LatticeState.at_rest(model)
        self.session = session  # set last: the audio thread polls this

    def apply_result(self, res):
        """Anchor snapshot and events take effect at the current boundary."""
        if self.cfg.method == "proposed":
            if res.anchor_rejected is False and res.curves is not None:
                before = self.session.model.anchors.copy()
                applied = self.session.apply_anchors(res.curves)
                res.anchor_rejected = not applied
                if applied:
                    # ride the anatomy: nodes translate with their anchors so
                    # tracking itself stays silent; only differential
                    # deformation and explicit events excite the lattice
                    delta = self.session.model.anchors - before
                    self.state.pos += delta
                    self.state.prev += delta
            for ev in res.events:
                ev.onset += self.cursor   # jitter offset becomes absolute
                self.pending.append(ev)
                self.events_applied += 1
        else:
            if res.zone is not None:
                self._zone = res.zone
            self._u = res.u

    def render_block(self) -> AudioBlock:
        if self.cfg.method == "proposed":
            _, vel = dynamics.step_block(self.state, self.session.model,
                                         self.pending, self.block)
            block = self.pickup.process(vel)
            self.pending = [e for e in self.pending
                            if e.onset + e.duration > self.state.step_count]
        else:
            samples = self._synth.block(self._zone, self._u, self.block)
            block = AudioBlock(samples=samples,
                               index=self.cursor // self.block, rate=self.rate)
        self.cursor += self.block
        return block

    def render_until(self, target_sample) -> list:
        out = []
        while self.cursor < target_sample:
            out.append(self.render_block())
        return out

    def boundary_for(self, t) -> int:
        """First block boundary at or after time t, never before the cursor."""
        s = int(math.ceil(t * self.rate / self.block)) * self.block
        return max(s, self.cursor)


class OfflineResult:
    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.wav_path = os.path.join(out_dir, "audio.wav")
        self.spectrogram_csv = os.path.join(out_dir, "spectrogram.csv")
        self.spectrogram_png = os.path.join(out_dir, "spectrogram.png")
        self.frame_report = os.path.join(out_dir, "frames.csv")
        self.event_log = os.path.join(out_dir, "events.csv")
        self.stats_path = os.path.join(out_dir, "stats.json")
        self.n_frames = 0
        self.n_events = 0
        self.duration_s = 0.0
        self.onset_metric = None


def run_offline(config: SessionConfig, seq_path, out_dir,
                spectrogram_split=None) -> OfflineResult:
    """Render a recorded sequence to audio and logs.

    ``spectrogram_split`` optionally computes the broadband onset metric at
    the given time; the result lands in stats.json.
    """
    dynamics.warmup()
    os.makedirs(out_dir, exist_ok=True)
    res = OfflineResult(out_dir)
    session = AnalysisSession(config)
    engine = AudioEngine(config)
    blocks = []
    frame_rows = []
    event_rows = []
    n_frames = 0

    stream = load_sequence(seq_path)
    while True:
        t0 = time.perf_counter()
        try:
            seg, bscan = next(stream)
        except StopIteration:
            break
        ingest_ms = (time.perf_counter() - t0) * 1e3

        if n_frames % config.runtime.analysis_stride == 0:
            fr = session.process(seg, bscan)
            if engine.session is None:
                engine.bind(session)
            blocks.extend(engine.render_until(engine.boundary_for(fr.t)))
            engine.apply_result(fr)
            total = ingest_ms + sum(fr.timings.values())
            frame_rows.append([fr.frame, f"{fr.t:.6f}",
                               f"{ingest_ms:.3f}",
                               f"{fr.timings['spline']:.3f}",
                               f"{fr.timings['geometry']:.3f}",
                               f"{fr.timings['lattice']:.3f}",
                               f"{fr.timings['excitation']:.3f}",
                               f"{total:.3f}", len(fr.events),
                               f"{fr.c_ilm:.4f}", f"{fr.c_rpe:.4f}"])
            for source, label, value in fr.event_rows:
                event_rows.append([fr.frame, f"{fr.t:.6f}", source, label,
                                   f"{value:.6f}"])
        n_frames += 1

    if n_frames == 0:
        raise SequenceError(f"sequence {seq_path} is empty")

    tail = engine.cursor + int(config.audio.tail_s * config.audio.rate)
    blocks.extend(engine.render_until(tail))

    write_wav(blocks, res.wav_path, rate=config.audio.rate)
    samples = np.concatenate([b.samples for b in blocks]) if blocks \
        else np.zeros(0)
    if samples.size >= 1024:
        spec = spectrogram(samples, rate=config.audio.rate)
        save_spectrogram_csv(spec, res.spectrogram_csv)
        save_spectrogram_png(spec, res.spectrogram_png)
        if spectrogram_split is not None:
            res.onset_metric = broadband_onset_metric(spec, spectrogram_split)

    with open(res.frame_report, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["frame", "t", "ms_ingest", "ms_spline", "ms_geometry",
                    "ms_lattice", "ms_excitation", "ms_total", "n_events",
                    "c_ilm", "c_rpe"])
        w.writerows(frame_rows)
    with open(res.event_log, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["frame", "t", "source", "label", "value"])
        w.writerows(event_rows)

    res.n_frames = n_frames
    res.n_events = engine.events_applied
    res.duration_s = samples.size / config.audio.rate
    stats = {
        "method": config.method,
        "seed": config.seed,
        "frames": n_frames,
        "events": engine.events_applied,
        "duration_s": res.duration_s,
        "onset_metric_db": res.onset_metric,
    }
    with open(res.stats_path, "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2)
    return res
