"""Per-stage timing harness over recorded sequences."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

from ..dynamics import warmup
from ..errors import SequenceError
from ..ingest import load_sequence
from .config import SessionConfig
from .pipeline import AnalysisSession

__all__ = ["bench", "BenchResult"]

STAGES = ("ingest", "spline", "geometry", "lattice", "excitation")


@dataclass
class BenchResult:
    stage_ms: dict = field(default_factory=dict)   # stage -> list of ms
    frames: int = 0

    def mean(self, stage):
        return statistics.fmean(self.stage_ms[stage])

    def sd(self, stage):
        vals = self.stage_ms[stage]
        return statistics.stdev(vals) if len(vals) > 1 else 0.0

    def analysis_ms(self):
        """Per-frame analysis cost: everything except file ingest."""
        n = self.frames
        return [sum(self.stage_ms[s][i] for s in STAGES[1:]) for i in range(n)]

    def summary_rows(self):
        rows = []
        for stage in STAGES:
            rows.append([stage, f"{self.mean(stage):.4f}",
                         f"{self.sd(stage):.4f}"])
        analysis = self.analysis_ms()
        rows.append(["analysis_total", f"{statistics.fmean(analysis):.4f}",
                     f"{statistics.stdev(analysis):.4f}"
                     if len(analysis) > 1 else "0.0"])
        return rows

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["stage", "mean_ms", "sd_ms"])
            w.writerows(self.summary_rows())


def bench(config: SessionConfig, seq_paths, repeats=1) -> BenchResult:
    """Time every pipeline stage across sequences.

    Each sequence must hold at least 50 frames.  Timings pool across
    sequences and repeats; the analysis budget excludes file parsing.
    """
    warmup()
    result = BenchResult(stage_ms={s: [] for s in STAGES})
    for _ in range(repeats):
        for path in seq_paths:
            session = AnalysisSession(config)
            stream = load_sequence(path)
            count = 0
            while True:
                t0 = time.perf_counter()
                try:
                    seg, bscan = next(stream)
                except StopIteration:
                    break
                ingest_ms = (time.perf_counter() - t0) * 1e3
                fr = session.process(seg, bscan)
                result.stage_ms["ingest"].append(ingest_ms)
                for stage in STAGES[1:]:
                    result.stage_ms[stage].append(fr.timings[stage])
                count += 1
            if count < 50:
                raise SequenceError(
                    f"bench needs >= 50 frames per sequence, {path} has {count}")
            result.frames += count
    return result
