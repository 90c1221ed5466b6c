"""Acoustic front end: vocoder analysis/synthesis, F0 statistics, mel features."""
from .backend import (
    BuiltinVocoder,
    WorldVocoder,
    analyze_waveform,
    make_backend,
    synthesize_waveform,
)
from .f0 import compute_f0_stats, lg_transform_f0
from .io import load_features, load_mel, read_wav, save_features, save_mel, write_wav
from .mel import MelConfig, compute_mel_spectrogram, delta
from .types import MCEP_DIM, AcousticFeatures, F0Stats, MelSpectrogram

__all__ = [
    "AcousticFeatures",
    "BuiltinVocoder",
    "F0Stats",
    "MCEP_DIM",
    "MelConfig",
    "MelSpectrogram",
    "WorldVocoder",
    "analyze_waveform",
    "compute_f0_stats",
    "compute_mel_spectrogram",
    "delta",
    "lg_transform_f0",
    "load_features",
    "load_mel",
    "make_backend",
    "read_wav",
    "save_features",
    "save_mel",
    "synthesize_waveform",
    "write_wav",
]
