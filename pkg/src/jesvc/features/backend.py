"""Vocoder backends turning waveforms into MCEP/F0/AP frames and back.

Two backends share one interface: :class:`BuiltinVocoder`, a compact
numpy analyzer/synthesizer that keeps every test hermetic, and
:class:`WorldVocoder`, an adapter around the ``pyworld`` bindings when
they are installed.  Backends never substitute for one another: asking
for WORLD without ``pyworld`` raises :class:`BackendUnavailableError`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from ..errors import BackendUnavailableError, ConfigurationError, FeatureError
from .types import MCEP_DIM, AcousticFeatures

SUPPORTED_SAMPLE_RATES = (16000,)
AP_BAND_EDGES_HZ = (0.0, 1000.0, 2000.0, 4000.0, 6000.0, 8000.0)
POWER_FLOOR = 1e-12


class VocoderBackend(Protocol):
    sample_rate: int
    frame_shift_ms: float

    def analyze(self, waveform: np.ndarray) -> AcousticFeatures: ...

    def synthesize(self, features: AcousticFeatures) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Mel-cepstrum <-> spectral envelope via all-pass frequency warping


def warp_frequency(omega: np.ndarray, alpha: float) -> np.ndarray:
    """Phase response of the first-order all-pass ``(z^-1 - a) / (1 - a z^-1)``."""
    return omega + 2.0 * np.arctan(alpha * np.sin(omega) / (1.0 - alpha * np.cos(omega)))


def envelope_to_mcep(power: np.ndarray, order: int, alpha: float, n_grid: int = 512) -> np.ndarray:
    """Mel-cepstrum of power envelopes.

    ``power`` is (T, fft_size//2 + 1) on a linear frequency grid.  The log
    amplitude is resampled on a uniform warped-frequency grid and expanded
    in cosines, so ``log|H(w)| = sum_m c_m cos(m * warp(w))``.
    Returns (order + 1, T).
    """
    power = np.atleast_2d(power)
    n_bins = power.shape[1]
    lin = np.linspace(0.0, np.pi, n_bins)
    warped = np.pi * (np.arange(n_grid) + 0.5) / n_grid
    src = warp_frequency(warped, -alpha)
    log_amp = 0.5 * np.log(np.maximum(power, POWER_FLOOR))
    resampled = np.stack([np.interp(src, lin, row) for row in log_amp])
    basis = np.cos(np.outer(warped, np.arange(order + 1)))
    coef = resampled @ basis * (2.0 / n_grid)
    coef[:, 0] *= 0.5
    return coef.T


def mcep_to_envelope(mceps: np.ndarray, fft_size: int, alpha: float) -> np.ndarray:
    """Inverse of :func:`envelope_to_mcep`; returns (T, fft_size//2 + 1) power."""
    mceps = np.atleast_2d(mceps)
    lin = np.linspace(0.0, np.pi, fft_size // 2 + 1)
    basis = np.cos(np.outer(np.arange(mceps.shape[0]), warp_frequency(lin, alpha)))
    return np.exp(2.0 * (mceps.T @ basis))


# ---------------------------------------------------------------------------
# Analysis helpers


def _frame_count(n_samples: int, hop: int) -> int:
    return n_samples // hop + 1


def _frames(x: np.ndarray, centers: np.ndarray, before: int, after: int) -> np.ndarray:
    """Stack x[c - before : c + after] for every center, zero padded."""
    padded = np.pad(x, (before, after))
    idx = centers[:, None] + np.arange(before + after)[None, :]
    return padded[idx]


def estimate_f0(
    x: np.ndarray,
    sample_rate: int,
    hop: int,
    n_frames: int,
    f0_floor: float = 60.0,
    f0_ceil: float = 500.0,
    voicing_threshold: float = 0.45,
    window_ms: float = 25.0,
    silence_rms: float = 1e-5,
) -> tuple[np.ndarray, np.ndarray]:
    """Frame-wise F0 by normalized cross-correlation.

    Returns ``(f0, strength)`` where unvoiced frames have f0 == 0 and
    strength is the correlation at the selected lag.
    """
    min_lag = int(np.floor(sample_rate / f0_ceil))
    max_lag = int(np.ceil(sample_rate / f0_floor))
    win = int(round(window_ms * 1e-3 * sample_rate))
    centers = np.arange(n_frames) * hop
    seg = _frames(x, centers, win // 2, win - win // 2 + max_lag + 1)
    seg = seg - seg[:, :win].mean(axis=1, keepdims=True)
    head = seg[:, :win]

    nfft = 1 << int(np.ceil(np.log2(seg.shape[1] + win)))
    num = np.fft.irfft(np.conj(np.fft.rfft(head, nfft)) * np.fft.rfft(seg, nfft), nfft)
    num = num[:, : max_lag + 2]
    sq = np.concatenate([np.zeros((seg.shape[0], 1)), np.cumsum(seg**2, axis=1)], axis=1)
    lags = np.arange(max_lag + 2)
    energy_lag = sq[:, lags + win] - sq[:, lags]
    energy0 = energy_lag[:, :1]
    denom = np.sqrt(np.maximum(energy0 * energy_lag, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-20, num / np.maximum(denom, 1e-300), 0.0)

    f0 = np.zeros(n_frames)
    strength = np.zeros(n_frames)
    rms = np.sqrt(energy0[:, 0] / win)
    for t in range(n_frames):
        if rms[t] < silence_rms:
            continue
        rr = r[t]
        band = rr[min_lag : max_lag + 1]
        best = band.max()
        if best < voicing_threshold:
            continue
        # smallest-lag local maximum close to the global maximum (avoids sub-octaves)
        lag = None
        for k in range(min_lag, max_lag + 1):
            if rr[k] >= 0.9 * best and rr[k] >= rr[k - 1] and rr[k] >= rr[k + 1]:
                lag = k
                break
        if lag is None:
            lag = min_lag + int(np.argmax(band))
        a, b, c = rr[lag - 1], rr[lag], rr[lag + 1]
        den = a - 2 * b + c
        shift = 0.5 * (a - c) / den if abs(den) > 1e-12 else 0.0
        shift = float(np.clip(shift, -0.5, 0.5))
        f0[t] = sample_rate / (lag + shift)
        strength[t] = b
    f0[(f0 < f0_floor) | (f0 > f0_ceil)] = 0.0
    return f0, strength


def _smooth_rectangular(power: np.ndarray, width_bins: float) -> np.ndarray:
    """Moving average of width ``width_bins`` on a mirrored half spectrum."""
    n = power.shape[0]
    half = int(np.ceil(width_bins)) + 2
    ext = np.concatenate([power[1 : half + 1][::-1], power, power[-half - 1 : -1][::-1]])
    grid = np.arange(ext.shape[0]) - half
    # running integral of the piecewise-constant spectrum, bin j on [j - 0.5, j + 0.5)
    knots = np.concatenate([[grid[0] - 0.5], grid + 0.5])
    integral = np.concatenate([[0.0], np.cumsum(ext)])
    pos = np.arange(n, dtype=float)
    upper = np.interp(pos + width_bins / 2, knots, integral)
    lower = np.interp(pos - width_bins / 2, knots, integral)
    return (upper - lower) / width_bins


def estimate_envelope(
    x: np.ndarray,
    sample_rate: int,
    centers: np.ndarray,
    f0: np.ndarray,
    fft_size: int,
    default_f0: float = 500.0,
) -> np.ndarray:
    """Pitch-adaptive power envelope, (T, fft_size//2 + 1).

    A Hann window three pitch periods long, frequency smoothing over 2/3 F0,
    then a sinc smoothing lifter with a cosine compensation term.
    """
    n_bins = fft_size // 2 + 1
    out = np.empty((len(centers), n_bins))
    quef = np.arange(fft_size) / sample_rate
    quef = np.minimum(quef, (fft_size - np.arange(fft_size)) / sample_rate)
    for t, c in enumerate(centers):
        f = f0[t] if f0[t] > 0 else default_f0
        length = min(int(round(3 * sample_rate / f)) | 1, fft_size - 1)
        half = length // 2
        w = np.hanning(length + 2)[1:-1]
        w = w / np.sqrt(np.sum(w**2))
        seg = _frames(x, np.array([c]), half, length - half)[0]
        spec = np.abs(np.fft.rfft(seg * w, fft_size)) ** 2
        spec = _smooth_rectangular(spec, 2.0 * f / 3.0 * fft_size / sample_rate)
        ceps = np.fft.irfft(np.log(np.maximum(spec, POWER_FLOOR)), fft_size)
        arg = np.pi * f * quef
        smoothing = np.ones(fft_size)
        smoothing[1:] = np.sin(arg[1:]) / arg[1:]
        compensation = 1.3 - 0.3 * np.cos(2 * np.pi * f * quef)
        out[t] = np.exp(np.fft.rfft(ceps * smoothing * compensation).real)
    return out


def estimate_band_aperiodicity(
    x: np.ndarray,
    sample_rate: int,
    centers: np.ndarray,
    f0: np.ndarray,
    fft_size: int,
    band_edges: tuple[float, ...] = AP_BAND_EDGES_HZ,
) -> np.ndarray:
    """Per-band ratio of inter-harmonic to harmonic power, (A, T).

    Unvoiced frames are fully aperiodic (1.0).
    """
    n_bands = len(band_edges) - 1
    aps = np.ones((n_bands, len(centers)))
    w = np.hanning(fft_size + 2)[1:-1]
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    voiced = np.flatnonzero(f0 > 0)
    if voiced.size == 0:
        return aps
    seg = _frames(x, centers[voiced], fft_size // 2, fft_size - fft_size // 2)
    spec = np.abs(np.fft.rfft(seg * w, axis=1)) ** 2
    for row, t in enumerate(voiced):
        harm = np.arange(1, int(sample_rate / 2 / f0[t])) * f0[t]
        if harm.size == 0:
            continue
        peak = np.interp(harm, freqs, spec[row])
        valley = np.interp(harm + 0.5 * f0[t], freqs, spec[row])
        for b in range(n_bands):
            sel = (harm >= band_edges[b]) & (harm < band_edges[b + 1])
            if not np.any(sel):
                continue
            ratio = valley[sel].sum() / max(peak[sel].sum(), POWER_FLOOR)
            aps[b, t] = float(np.clip(ratio, 1e-3, 1.0))
    return aps


def _band_to_bins(aps: np.ndarray, fft_size: int, sample_rate: int, band_edges) -> np.ndarray:
    """Piecewise-linear interpolation of band values onto FFT bins, (T, bins)."""
    edges = np.asarray(band_edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    return np.stack([np.interp(freqs, centers, aps[:, t]) for t in range(aps.shape[1])])


# ---------------------------------------------------------------------------
# Synthesis


def synthesize_from_envelope(
    envelope: np.ndarray,
    f0: np.ndarray,
    ap_bins: np.ndarray,
    sample_rate: int,
    hop: int,
    fft_size: int,
    seed: int = 0,
) -> np.ndarray:
    """Source-filter overlap-add synthesis.

    ``envelope`` and ``ap_bins`` are (T, fft_size//2 + 1); ``ap_bins`` is the
    aperiodic share of the power per bin.  The excitation is a unit-power
    pulse train on voiced samples mixed with white noise; each 2*hop Hann
    slice is filtered by the zero-phase frame envelope.  Output length is
    ``(T - 1) * hop``.
    """
    n_frames = len(f0)
    n_out = max(n_frames - 1, 0) * hop
    if n_frames == 0:
        return np.zeros(0)
    rng = np.random.default_rng(seed)
    total = n_out + 2 * hop
    frame_of_sample = np.clip(np.round(np.arange(total) / hop).astype(int), 0, n_frames - 1)
    f0_samples = f0[frame_of_sample]

    pulses = np.zeros(total)
    phase = 0.0
    for n in range(total):
        fn = f0_samples[n]
        if fn <= 0:
            phase = 0.0
            continue
        phase += fn / sample_rate
        if phase >= 1.0:
            phase -= 1.0
            pulses[n] = np.sqrt(sample_rate / fn)
    noise = rng.standard_normal(total)

    win_len = 2 * hop
    window = np.hanning(win_len + 1)[:-1]
    offset = (fft_size - win_len) // 2
    centers = np.arange(n_frames) * hop
    # frame t covers [c - hop, c + hop)
    pul = _frames(pulses, centers, hop, hop) * window
    noi = _frames(noise, centers, hop, hop) * window
    pul_spec = np.fft.rfft(np.pad(pul, ((0, 0), (offset, fft_size - win_len - offset))), axis=1)
    noi_spec = np.fft.rfft(np.pad(noi, ((0, 0), (offset, fft_size - win_len - offset))), axis=1)

    amp = np.sqrt(envelope)
    voiced = (f0 > 0)[:, None]
    periodic = np.sqrt(np.clip(1.0 - ap_bins, 0.0, 1.0))
    aperiodic = np.where(voiced, np.sqrt(np.clip(ap_bins, 0.0, 1.0)), 1.0)
    spec = amp * (np.where(voiced, periodic, 0.0) * pul_spec + aperiodic * noi_spec)
    frames = np.fft.irfft(spec, fft_size, axis=1)

    lead = hop + offset + fft_size
    out = np.zeros(n_out + 2 * lead)
    for t in range(n_frames):
        start = lead + centers[t] - hop - offset
        out[start : start + fft_size] += frames[t]
    return out[lead : lead + n_out]


# ---------------------------------------------------------------------------
# Backends


def _check_rate(sample_rate: int):
    if sample_rate not in SUPPORTED_SAMPLE_RATES:
        raise ConfigurationError(
            f"unsupported sample rate {sample_rate} Hz; supported: {SUPPORTED_SAMPLE_RATES}"
        )


@dataclass
class BuiltinVocoder:
    """Simplified WORLD-like analyzer/synthesizer written against numpy."""

    sample_rate: int = 16000
    frame_shift_ms: float = 5.0
    fft_size: int = 1024
    mcep_alpha: float = 0.42
    f0_floor: float = 60.0
    f0_ceil: float = 500.0
    voicing_threshold: float = 0.45
    band_edges: tuple = field(default=AP_BAND_EDGES_HZ)
    seed: int = 0

    def __post_init__(self):
        _check_rate(self.sample_rate)

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000.0))

    def analyze(self, waveform: np.ndarray) -> AcousticFeatures:
        x = np.asarray(waveform, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise FeatureError("waveform must be a non-empty 1-D array")
        n_frames = _frame_count(x.size, self.hop)
        centers = np.arange(n_frames) * self.hop
        f0, _ = estimate_f0(
            x, self.sample_rate, self.hop, n_frames,
            self.f0_floor, self.f0_ceil, self.voicing_threshold,
        )
        env = estimate_envelope(x, self.sample_rate, centers, f0, self.fft_size)
        mceps = envelope_to_mcep(env, MCEP_DIM - 1, self.mcep_alpha)
        aps = estimate_band_aperiodicity(
            x, self.sample_rate, centers, f0, self.fft_size, self.band_edges
        )
        return AcousticFeatures(mceps, f0, aps, self.frame_shift_ms, self.sample_rate)

    def synthesize(self, features: AcousticFeatures) -> np.ndarray:
        _check_rate(features.sample_rate_hz)
        env = mcep_to_envelope(np.asarray(features.mceps, np.float64), self.fft_size, self.mcep_alpha)
        ap_bins = _band_to_bins(
            np.asarray(features.aps, np.float64), self.fft_size, self.sample_rate, self.band_edges
        )
        return synthesize_from_envelope(
            env, np.asarray(features.f0, np.float64), ap_bins,
            self.sample_rate, self.hop, self.fft_size, self.seed,
        )


@dataclass
class WorldVocoder:
    """Adapter for the ``pyworld`` bindings of the WORLD vocoder.

    F0 comes from Harvest, the envelope from CheapTrick and band
    aperiodicity from D4C (coded).  Envelopes are warped to MCEPs with the
    same transform as the built-in backend so features stay interchangeable.
    """

    sample_rate: int = 16000
    frame_shift_ms: float = 5.0
    fft_size: int = 1024
    mcep_alpha: float = 0.42
    f0_floor: float = 60.0
    f0_ceil: float = 500.0

    def __post_init__(self):
        _check_rate(self.sample_rate)

    @staticmethod
    def _world():
        try:
            import pyworld
        except ImportError as exc:
            raise BackendUnavailableError(
                "the 'world' backend needs the pyworld package; install it or select 'builtin'"
            ) from exc
        return pyworld

    def analyze(self, waveform: np.ndarray) -> AcousticFeatures:
        pw = self._world()
        x = np.ascontiguousarray(waveform, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise FeatureError("waveform must be a non-empty 1-D array")
        f0, t = pw.harvest(x, self.sample_rate, self.f0_floor, self.f0_ceil, self.frame_shift_ms)
        sp = pw.cheaptrick(x, f0, t, self.sample_rate, fft_size=self.fft_size)
        ap = pw.d4c(x, f0, t, self.sample_rate, fft_size=self.fft_size)
        coded = np.clip(pw.code_aperiodicity(ap, self.sample_rate), 0.0, 1.0)
        mceps = envelope_to_mcep(sp, MCEP_DIM - 1, self.mcep_alpha)
        return AcousticFeatures(mceps, f0, coded.T, self.frame_shift_ms, self.sample_rate)

    def synthesize(self, features: AcousticFeatures) -> np.ndarray:
        pw = self._world()
        sp = mcep_to_envelope(np.asarray(features.mceps, np.float64), self.fft_size, self.mcep_alpha)
        ap = pw.decode_aperiodicity(
            np.ascontiguousarray(features.aps.T, dtype=np.float64), self.sample_rate, self.fft_size
        )
        return pw.synthesize(
            np.ascontiguousarray(features.f0, dtype=np.float64),
            np.ascontiguousarray(sp), np.ascontiguousarray(ap),
            self.sample_rate, self.frame_shift_ms,
        )


BACKENDS = {"builtin": BuiltinVocoder, "world": WorldVocoder}


def make_backend(name: str = "builtin", **options) -> VocoderBackend:
    try:
        cls = BACKENDS[name]
    except KeyError:
        raise ConfigurationError(f"unknown vocoder backend {name!r}; choose from {sorted(BACKENDS)}")
    return cls(**options)


def analyze_waveform(
    waveform: np.ndarray,
    sample_rate: int = 16000,
    frame_shift: float = 5.0,
    backend: str | VocoderBackend = "builtin",
) -> AcousticFeatures:
    """Analyze ``waveform`` into MCEPs, F0 and APs every ``frame_shift`` ms."""
    if isinstance(backend, str):
        backend = make_backend(backend, sample_rate=sample_rate, frame_shift_ms=frame_shift)
    elif backend.sample_rate != sample_rate:
        raise ConfigurationError(
            f"backend runs at {backend.sample_rate} Hz but audio is {sample_rate} Hz"
        )
    return backend.analyze(waveform)


def synthesize_waveform(
    features: AcousticFeatures, backend: str | VocoderBackend = "builtin"
) -> np.ndarray:
    if isinstance(backend, str):
        backend = make_backend(
            backend, sample_rate=features.sample_rate_hz, frame_shift_ms=features.frame_shift_ms
        )
    return backend.synthesize(features)
