"""Audio output: pickup, WAV files, spectrograms.

The pickup is a normalized weighted sum of node velocities, DC-blocked with
a one-pole high-pass at 20 Hz and soft-limited by a tanh shaper at 0.95.
Files are 16-bit PCM mono at 44100 Hz so golden outputs compare bit-exactly
across runs.  Spectrograms are Hann-windowed STFT magnitudes in dB with a
-120 dB floor; the CSV export is the stable contract for analysis scripts,
PNG export is best-effort.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

__all__ = [
    "SAMPLE_RATE",
    "AudioBlock",
    "Spectrogram",
    "Pickup",
    "synthesize_block",
    "write_wav",
    "read_wav",
    "spectrogram",
    "spectrogram_csv",
    "save_spectrogram_csv",
    "save_spectrogram_png",
    "broadband_onset_metric",
]

SAMPLE_RATE = 44100
DC_BLOCK_HZ = 20.0
LIMIT = 0.95
DB_FLOOR = -120.0


@dataclass
class AudioBlock:
    samples: np.ndarray
    index: int = 0
    rate: int = SAMPLE_RATE

    def __len__(self):
        return self.samples.size


class Pickup:
    """Weighted velocity sum with stateful DC blocker and soft limiter."""

    def __init__(self, weights, gain=1.0, rate=SAMPLE_RATE):
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            raise ValueError("pickup weights must sum to a positive value")
        self.weights = w / total
        self.gain = float(gain)
        self.rate = int(rate)
        r = 1.0 - 2.0 * math.pi * DC_BLOCK_HZ / rate
        self._ba = (np.array([1.0, -1.0]), np.array([1.0, -r]))
        self._zi = np.zeros(1)
        self._index = 0

    def mix(self, velocities) -> np.ndarray:
        """Weighted velocity sum; linear in the velocities."""
        return (velocities @ self.weights) * self.gain

    def process(self, velocities) -> AudioBlock:
        raw = self.mix(velocities)
        out, self._zi = lfilter(self._ba[0], self._ba[1], raw, zi=self._zi)
        block = AudioBlock(samples=LIMIT * np.tanh(out / LIMIT),
                           index=self._index, rate=self.rate)
        self._index += 1
        return block


def synthesize_block(velocities, weights, gain=1.0) -> AudioBlock:
    """One-shot pickup for stateless use (fresh filter state)."""
    return Pickup(weights, gain=gain).process(np.asarray(velocities))


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM mono)
# ---------------------------------------------------------------------------

def write_wav(blocks, path, rate=SAMPLE_RATE):
    """Write sample blocks as RIFF/WAVE, PCM 16-bit little-endian mono."""
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        for block in blocks:
            samples = block.samples if isinstance(block, AudioBlock) else block
            pcm = np.clip(np.round(np.asarray(samples) * 32767.0),
                          -32768, 32767).astype("<i2")
            wf.writeframes(pcm.tobytes())


def read_wav(path):
    """Read a 16-bit mono WAV back to floats in [-1, 1]."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2 or wf.getnchannels() != 1:
            raise ValueError("expected 16-bit mono PCM")
        rate = wf.getframerate()
        data = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(data, dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, rate


# ---------------------------------------------------------------------------
# Spectrogram
# ---------------------------------------------------------------------------

@dataclass
class Spectrogram:
    db: np.ndarray        # (frames, bins)
    window: int
    hop: int
    rate: int

    @property
    def bins(self):
        return self.db.shape[1]

    @property
    def times(self):
        return (np.arange(self.db.shape[0]) * self.hop + self.window / 2) / self.rate

    @property
    def freqs(self):
        return np.fft.rfftfreq(self.window, d=1.0 / self.rate)


def spectrogram(samples, window=1024, hop=256, rate=SAMPLE_RATE) -> Spectrogram:
    """Hann-windowed STFT magnitude in dB (ref 1.0, floor -120 dB)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < window:
        raise ValueError(f"need at least {window} samples, got {x.size}")
    w = np.hanning(window)
    n_frames = 1 + (x.size - window) // hop
    mags = np.empty((n_frames, window // 2 + 1))
    for i in range(n_frames):
        seg = x[i * hop:i * hop + window] * w
        mags[i] = np.abs(np.fft.rfft(seg))
    db = 20.0 * np.log10(np.maximum(mags, 10.0 ** (DB_FLOOR / 20.0)))
    return Spectrogram(db=db, window=window, hop=hop, rate=rate)


def spectrogram_csv(spec: Spectrogram) -> str:
    """Stable CSV: frame index, time in seconds, then bins, 6 decimals."""
    lines = []
    times = spec.times
    for i in range(spec.db.shape[0]):
        cells = [str(i), f"{times[i]:.6f}"]
        cells.extend(f"{v:.6f}" for v in spec.db[i])
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def save_spectrogram_csv(spec: Spectrogram, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(spectrogram_csv(spec))


def save_spectrogram_png(spec: Spectrogram, path):
    """Best-effort PNG rendering; silently skipped without matplotlib."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    fig, ax = plt.subplots(figsize=(10, 4))
    extent = [0, spec.times[-1] if spec.db.shape[0] else 0,
              0, spec.freqs[-1]]
    ax.imshow(spec.db.T, origin="lower", aspect="auto", extent=extent,
              vmin=DB_FLOOR, vmax=spec.db.max(), cmap="magma")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("frequency [Hz]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def broadband_onset_metric(spec: Spectrogram, t_split, band=(200.0, 8000.0)):
    """dB change of band-averaged energy after vs. before a split time.

    Frames are assigned by their full extent; frames straddling the split
    belong to neither side.  Both segments must keep at least 10 frames.
    """
    n = spec.db.shape[0]
    starts = np.arange(n) * spec.hop / spec.rate
    ends = (np.arange(n) * spec.hop + spec.window) / spec.rate
    before = ends <= t_split
    after = starts >= t_split
    if np.count_nonzero(before) < 10 or np.count_nonzero(after) < 10:
        raise ValueError("need at least 10 STFT frames on each side")
    freqs = spec.freqs
    in_band = (freqs >= band[0]) & (freqs <= band[1])
    power = 10.0 ** (spec.db / 10.0)
    p_before = float(np.mean(power[np.ix_(before, in_band)]))
    p_after = float(np.mean(power[np.ix_(after, in_band)]))
    return 10.0 * math.log10(p_after / p_before)
