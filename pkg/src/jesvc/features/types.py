from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import FeatureError, F0StatsError

MCEP_DIM = 36
STD_FLOOR = 1e-6


@dataclass
class AcousticFeatures:
    """Frame-level vocoder parameters of one utterance.

    ``mceps`` is (36, T), ``f0`` is (T,) in Hz with 0 marking unvoiced
    frames, ``aps`` is (A, T) band aperiodicity in [0, 1].
    """

    mceps: np.ndarray
    f0: np.ndarray
    aps: np.ndarray
    frame_shift_ms: float = 5.0
    sample_rate_hz: int = 16000

    def __post_init__(self):
        self.mceps = np.asarray(self.mceps)
        self.f0 = np.asarray(self.f0)
        self.aps = np.asarray(self.aps)
        if self.mceps.ndim != 2 or self.mceps.shape[0] != MCEP_DIM:
            raise FeatureError(f"mceps must have shape ({MCEP_DIM}, T), got {self.mceps.shape}")
        if self.f0.ndim != 1 or self.aps.ndim != 2:
            raise FeatureError("f0 must be 1-D and aps 2-D")
        t = self.mceps.shape[1]
        if self.f0.shape[0] != t or self.aps.shape[1] != t:
            raise FeatureError(
                f"frame counts differ: mceps {t}, f0 {self.f0.shape[0]}, aps {self.aps.shape[1]}"
            )
        if np.any(self.f0 < 0) or not np.all(np.isfinite(self.f0)):
            raise FeatureError("f0 must be finite and non-negative")
        if np.any(self.aps < 0) or np.any(self.aps > 1):
            raise FeatureError("aps must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.mceps.shape[1]

    @property
    def voiced(self) -> np.ndarray:
        return self.f0 > 0

    def replace(self, **changes) -> "AcousticFeatures":
        fields = dict(
            mceps=self.mceps,
            f0=self.f0,
            aps=self.aps,
            frame_shift_ms=self.frame_shift_ms,
            sample_rate_hz=self.sample_rate_hz,
        )
        fields.update(changes)
        return AcousticFeatures(**fields)


@dataclass(frozen=True)
class F0Stats:
    """Mean and standard deviation of natural-log F0 over voiced frames."""

    mean_log_f0: float
    std_log_f0: float

    def __post_init__(self):
        if not np.isfinite(self.mean_log_f0) or not np.isfinite(self.std_log_f0):
            raise F0StatsError("F0 statistics must be finite")
        if self.std_log_f0 <= 0:
            raise F0StatsError(f"std_log_f0 must be positive, got {self.std_log_f0}")


@dataclass
class MelSpectrogram:
    """Log-mel energies stacked as (static, delta, delta-delta) planes.

    ``values`` has shape (3, M, T').
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or self.values.shape[0] != 3:
            raise FeatureError(f"mel values must have shape (3, M, T'), got {self.values.shape}")

    @property
    def mel_bins(self) -> int:
        return self.values.shape[1]

    @property
    def n_frames(self) -> int:
        return self.values.shape[2]

    @property
    def static(self) -> np.ndarray:
        return self.values[0]
