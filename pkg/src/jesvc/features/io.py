"""WAV and per-utterance feature-file I/O.

Feature files are numpy ``.npz`` archives with the named arrays
``mceps`` (36, T) float32, ``f0`` (T,) float32, ``aps`` (A, T) float32,
``frame_shift_ms`` and ``sample_rate`` (0-d).  Mel files hold a single
``mel`` array of shape (3, M, T') float32.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from ..errors import FeatureError
from .types import AcousticFeatures, MelSpectrogram

FEATURE_KEYS = ("mceps", "f0", "aps", "frame_shift_ms", "sample_rate")


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono WAV as float64 in [-1, 1]."""
    try:
        sr, data = wavfile.read(str(path))
    except (ValueError, EOFError, OSError) as exc:
        raise FeatureError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.size == 0:
        raise FeatureError(f"WAV {path} holds no samples")
    return x, int(sr)


def write_wav(path, waveform: np.ndarray, sample_rate: int = 16000):
    """Write 16-bit PCM mono."""
    x = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sample_rate, np.round(x * 32768.0).astype(np.int16))


def _atomic_savez(path, **arrays):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def save_features(path, features: AcousticFeatures):
    _atomic_savez(
        path,
        mceps=features.mceps.astype(np.float32),
        f0=features.f0.astype(np.float32),
        aps=features.aps.astype(np.float32),
        frame_shift_ms=np.float64(features.frame_shift_ms),
        sample_rate=np.int64(features.sample_rate_hz),
    )


def load_features(path) -> AcousticFeatures:
    try:
        with np.load(str(path)) as z:
            missing = [k for k in FEATURE_KEYS if k not in z]
            if missing:
                raise FeatureError(f"feature file {path} lacks {missing}")
            return AcousticFeatures(
                z["mceps"], z["f0"], z["aps"], float(z["frame_shift_ms"]), int(z["sample_rate"])
            )
    except (OSError, ValueError) as exc:
        raise FeatureError(f"cannot read feature file {path}: {exc}") from exc


def save_mel(path, mel: MelSpectrogram):
    _atomic_savez(path, mel=mel.values.astype(np.float32))


def load_mel(path) -> MelSpectrogram:
    with np.load(str(path)) as z:
        return MelSpectrogram(z["mel"])
