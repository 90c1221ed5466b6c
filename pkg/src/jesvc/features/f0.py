"""Log-F0 statistics and the log-Gaussian normalized F0 transform."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from ..errors import F0StatsError
from .types import STD_FLOOR, F0Stats


def compute_f0_stats(contours: Iterable[np.ndarray], std_floor: float = STD_FLOOR) -> F0Stats:
    """Mean and (population) std of ln F0 pooled over the voiced frames of all contours."""
    voiced = [np.asarray(c, dtype=np.float64) for c in contours]
    voiced = [c[c > 0] for c in voiced]
    log_f0 = np.log(np.concatenate(voiced)) if voiced else np.zeros(0)
    if log_f0.size == 0:
        raise F0StatsError("no voiced frames: F0 statistics are undefined")
    std = float(log_f0.std())
    if std < std_floor:
        raise F0StatsError(
            f"log-F0 std {std:.3g} is below the floor {std_floor:g} (constant-pitch input)"
        )
    return F0Stats(float(log_f0.mean()), std)


def lg_transform_f0(
    f0: np.ndarray, src: F0Stats, tgt: F0Stats, std_floor: float = STD_FLOOR
) -> np.ndarray:
    """Map voiced frames so their log-F0 z-score under ``src`` holds under ``tgt``.

    Unvoiced frames (0 Hz) stay exactly 0.
    """
    if src.std_log_f0 < std_floor:
        raise F0StatsError(f"source log-F0 std {src.std_log_f0:g} below floor {std_floor:g}")
    f0 = np.asarray(f0, dtype=np.float64)
    out = np.zeros_like(f0)
    voiced = f0 > 0
    if src == tgt:
        # exact identity; exp(log(x)) would round
        out[voiced] = f0[voiced]
        return out
    z = (np.log(f0[voiced]) - src.mean_log_f0) / src.std_log_f0
    out[voiced] = np.exp(z * tgt.std_log_f0 + tgt.mean_log_f0)
    return out
