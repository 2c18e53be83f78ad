"""Phantom sequence generation to disk, with ground-truth metadata."""

from __future__ import annotations

import dataclasses
import json
import os

from ..ingest import (PhantomControl, new_phantom, phantom_step,
                      scripted_control, write_sequence)
from .config import SessionConfig

__all__ = ["generate_phantom_sequence"]


def generate_phantom_sequence(config: SessionConfig, out_dir,
                              write_images=False):
    """Run the configured phantom script and write seq.jsonl + meta.json.

    Metadata records the ground-truth bleb onset (first effective inject)
    for event-timing assertions.
    """
    os.makedirs(out_dir, exist_ok=True)
    p = config.phantom
    phantom_cfg = config.phantom_config()
    if not write_images:
        phantom_cfg = dataclasses.replace(phantom_cfg, render_images=False)
    state = new_phantom(seed=config.seed, tilt=p.tilt_deg,
                        config=phantom_cfg)
    dt = 1.0 / p.fps
    frames = []
    onset_t = None
    for i in range(p.frames):
        t = i / p.fps
        control = scripted_control(p.script, t, p.fps)
        state, seg, bscan = phantom_step(state, control, dt)
        if onset_t is None and state.inject_effective:
            onset_t = seg.t
        frames.append((seg, bscan if write_images else None))
    seq_path = os.path.join(out_dir, "seq.jsonl")
    write_sequence(frames, seq_path, write_images=write_images)
    meta = {
        "seed": config.seed,
        "script": p.script,
        "frames": p.frames,
        "fps": p.fps,
        "tilt_deg": p.tilt_deg,
        "bleb_onset_t": onset_t,
        "width": p.width,
        "height": p.height,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    return seq_path, meta
