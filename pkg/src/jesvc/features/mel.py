"""Log-mel spectrograms with regression deltas for the emotion recognizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import FeatureError
from .types import MelSpectrogram


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 400
    hop_ms: float = 10.0
    n_mels: int = 40
    fmin: float = 0.0
    fmax: float | None = None
    delta_width: int = 2

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin=0.0, fmax=None) -> np.ndarray:
    """Triangular HTK-style filters, shape (n_mels, n_fft//2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def delta(x: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression delta along the last axis, edge frames replicated.

    d_t = sum_n n (x_{t+n} - x_{t-n}) / (2 sum_n n^2), n = 1..width.
    """
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 1) + [(width, width)]
    xp = np.pad(x, pad, mode="edge")
    num = np.zeros_like(x)
    for n in range(1, width + 1):
        num += n * (xp[..., width + n : width + n + t] - xp[..., width - n : width - n + t])
    return num / (2.0 * sum(n * n for n in range(1, width + 1)))


def compute_mel_spectrogram(waveform: np.ndarray, config: MelConfig = MelConfig()) -> MelSpectrogram:
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise FeatureError("waveform must be a non-empty 1-D array")
    if x.size < config.n_fft:
        raise FeatureError(
            f"waveform has {x.size} samples, shorter than one FFT window ({config.n_fft})"
        )
    half = config.n_fft // 2
    xp = np.pad(x, (half, half), mode="reflect")
    n_frames = 1 + x.size // config.hop
    idx = np.arange(n_frames)[:, None] * config.hop + np.arange(config.n_fft)[None, :]
    window = np.hanning(config.n_fft + 1)[:-1]
    power = np.abs(np.fft.rfft(xp[idx] * window, axis=1)) ** 2
    fb = mel_filterbank(config.sample_rate, config.n_fft, config.n_mels, config.fmin, config.fmax)
    static = np.log(power @ fb.T + 1e-10).T
    d1 = delta(static, config.delta_width)
    d2 = delta(d1, config.delta_width)
    return MelSpectrogram(np.stack([static, d1, d2]))
