"""Deterministic multi-speaker, multi-emotion parallel corpus.

Speech is built frame by frame with a formant synthesizer and rendered
through the built-in vocoder's synthesis routine.  Speakers differ in
vocal-tract scale, pitch, spectral tilt and an extra fixed resonance;
each emotion is a prosodic/spectral profile perturbed separately for
every speaker, so emotional style is speaker dependent by construction.
Sentences are phone sequences shared by all speakers and emotions.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..features.backend import AP_BAND_EDGES_HZ, _band_to_bins, synthesize_from_envelope
from ..features.io import write_wav
from .manifest import KNOWN_EMOTIONS, PAPER_SPLIT, Manifest, ManifestEntry, save_manifest, split_corpus

SAMPLE_RATE = 16000
HOP = 80
FFT_SIZE = 1024

VOWELS = {
    "a": (730.0, 1090.0, 2440.0),
    "i": (270.0, 2290.0, 3010.0),
    "u": (300.0, 870.0, 2240.0),
    "e": (530.0, 1840.0, 2480.0),
    "o": (570.0, 840.0, 2410.0),
    "ae": (660.0, 1720.0, 2410.0),
}
FRICATIVES = {"s": 5500.0, "sh": 3200.0, "f": 4500.0}

# f0 factor, intonation range, speaking rate, tilt dB/oct, gain dB, F1 factor, breathiness
EMOTION_PROFILES = {
    "neutral": (1.00, 1.0, 1.00, 0.0, 0.0, 1.00, 1.0),
    "happy": (1.25, 1.6, 1.12, 2.5, 3.0, 1.06, 0.8),
    "sad": (0.88, 0.5, 0.82, -3.0, -3.0, 0.95, 2.5),
    "angry": (1.15, 1.3, 1.10, 4.0, 5.0, 1.08, 0.7),
    "surprise": (1.35, 2.0, 1.00, 1.0, 2.0, 1.03, 1.0),
}


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    gender: str
    formant_scale: float
    base_f0: float
    tilt: float
    extra_resonance: float
    dip: float
    bandwidth_scale: float


@dataclass(frozen=True)
class StyleProfile:
    f0_factor: float
    f0_range: float
    rate: float
    tilt: float
    gain_db: float
    f1_factor: float
    f2_factor: float
    breathiness: float
    coloring_hz: float
    coloring_db: float


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def make_speaker(index: int, seed: int) -> SpeakerProfile:
    rng = _rng(seed, 1, index)
    gender = "M" if index % 2 == 0 else "F"
    if gender == "M":
        scale, f0 = rng.uniform(0.92, 1.02), rng.uniform(100.0, 135.0)
    else:
        scale, f0 = rng.uniform(1.12, 1.22), rng.uniform(185.0, 235.0)
    return SpeakerProfile(
        speaker_id=f"S{index:02d}",
        gender=gender,
        formant_scale=float(scale),
        base_f0=float(f0),
        tilt=float(rng.uniform(-5.0, -1.0)),
        # spread deterministically so no two speakers share a signature
        extra_resonance=float(3000.0 + (index * 617) % 1900 + rng.uniform(-50.0, 50.0)),
        dip=float(1300.0 + (index * 523) % 1700 + rng.uniform(-50.0, 50.0)),
        bandwidth_scale=float(rng.uniform(0.8, 1.3)),
    )


def make_style(speaker_index: int, emotion: str, seed: int) -> StyleProfile:
    """Speaker-specific rendition of an emotion.

    Each speaker weights every cue's departure from neutral by its own
    factor (fixed across that speaker's emotions), so speakers express the
    same emotion through different cue mixtures.
    """
    base = EMOTION_PROFILES[emotion]
    neutral = EMOTION_PROFILES["neutral"]
    w = _rng(seed, 6, speaker_index).uniform(0.3, 1.7, size=len(base))
    cue = [n + (b - n) * wk for b, n, wk in zip(base, neutral, w)]
    rng = _rng(seed, 2, speaker_index, KNOWN_EMOTIONS.index(emotion))
    return StyleProfile(
        f0_factor=cue[0] * rng.uniform(0.92, 1.08),
        f0_range=cue[1] * rng.uniform(0.75, 1.3),
        rate=cue[2] * rng.uniform(0.92, 1.08),
        tilt=cue[3] + rng.uniform(-2.0, 2.0),
        gain_db=cue[4] + rng.uniform(-2.0, 2.0),
        f1_factor=cue[5] * rng.uniform(0.96, 1.04),
        f2_factor=rng.uniform(0.94, 1.06),
        breathiness=cue[6] * rng.uniform(0.75, 1.3),
        coloring_hz=rng.uniform(700.0, 6500.0),
        coloring_db=rng.choice([-1.0, 1.0]) * rng.uniform(5.0, 10.0),
    )


def make_sentence(index: int, seed: int) -> list[tuple[str, float]]:
    """Phone sequence with nominal durations in seconds.

    Every sentence shares one vowel frame (each vowel twice, in a fixed
    order drawn once per corpus seed); sentences differ in vowel timing
    and in where two or three fricatives are inserted.  Free vowel order
    made utterance-level style vectors track wording more than speaker.
    """
    frame_rng = _rng(seed, 7)
    vowels = [v for v in VOWELS for _ in range(2)]
    frame = [vowels[i] for i in frame_rng.permutation(len(vowels))]
    rng = _rng(seed, 3, index)
    phones = [(v, rng.uniform(0.07, 0.13)) for v in frame]
    frics = list(FRICATIVES)
    for _ in range(int(rng.integers(2, 4))):
        pos = int(rng.integers(1, len(phones)))
        phones.insert(pos, (frics[rng.integers(len(frics))], rng.uniform(0.06, 0.10)))
    return phones


def _resonance_db(freqs: np.ndarray, center: float, bandwidth: float) -> np.ndarray:
    """Magnitude (dB) of a unity-DC-gain two-pole resonator."""
    r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
    theta = 2 * np.pi * center / SAMPLE_RATE
    z = np.exp(-1j * 2 * np.pi * freqs / SAMPLE_RATE)
    den = 1 - 2 * r * np.cos(theta) * z + r * r * z * z
    dc = 1 - 2 * r * np.cos(theta) + r * r
    return 20 * np.log10(np.abs(dc) / np.abs(den))


def _smooth(track: np.ndarray, width: int) -> np.ndarray:
    kernel = np.hanning(width + 2)[1:-1]
    kernel /= kernel.sum()
    padded = np.pad(track, (width, width), mode="edge")
    return np.convolve(padded, kernel, mode="same")[width:-width]


def render_utterance(
    speaker: SpeakerProfile,
    style: StyleProfile,
    sentence: list[tuple[str, float]],
    utt_seed: int,
) -> np.ndarray:
    rng = _rng(utt_seed, 4)
    frame_s = HOP / SAMPLE_RATE
    lead = 8  # 40 ms of near-silence on each side
    durations = [max(3, int(round(d * rng.uniform(0.94, 1.06) / style.rate / frame_s))) for _, d in sentence]
    n_frames = sum(durations) + 2 * lead
    labels = ["sil"] * lead
    for (phone, _), d in zip(sentence, durations):
        labels += [phone] * d
    labels += ["sil"] * lead

    voiced = np.array([l in VOWELS for l in labels])
    fmt = np.zeros((3, n_frames))
    for t, l in enumerate(labels):
        if l in VOWELS:
            fmt[:, t] = VOWELS[l]
    # unvoiced frames inherit neighbouring vowel targets so tracks stay smooth
    idx = np.flatnonzero(voiced)
    for k in range(3):
        fmt[k] = np.interp(np.arange(n_frames), idx, fmt[k, idx])
        fmt[k] = _smooth(fmt[k], 7)
    fmt *= speaker.formant_scale
    fmt[0] *= style.f1_factor
    fmt[1] *= style.f2_factor

    pos = np.linspace(0.0, 1.0, n_frames)
    phase = rng.uniform(0, 2 * np.pi)
    contour = 1.0 + style.f0_range * (0.10 * np.sin(2 * np.pi * 1.3 * pos + phase) - 0.08 * pos)
    f0 = speaker.base_f0 * style.f0_factor * contour * rng.uniform(0.97, 1.03)
    f0 = np.where(voiced, f0, 0.0)

    freqs = np.arange(FFT_SIZE // 2 + 1) * SAMPLE_RATE / FFT_SIZE
    octaves = np.log2(np.maximum(freqs, 50.0) / 500.0)
    gain = style.gain_db + rng.uniform(-1.0, 1.0)
    bw = np.array([80.0, 110.0, 160.0]) * speaker.bandwidth_scale
    fixed = (
        2.0 * _resonance_db(freqs, speaker.extra_resonance, 400.0)
        - 1.0 * _resonance_db(freqs, speaker.dip, 300.0)
        + (speaker.tilt + style.tilt) * octaves
        + style.coloring_db * np.exp(-0.5 * ((freqs - style.coloring_hz) / 600.0) ** 2)
    )
    log_env = np.empty((n_frames, freqs.size))
    for t, l in enumerate(labels):
        if l == "sil":
            log_env[t] = -45.0
        elif l in FRICATIVES:
            log_env[t] = _resonance_db(freqs, FRICATIVES[l] * min(speaker.formant_scale, 1.1), 1200.0) + 0.5 * fixed - 12.0 + gain
        else:
            db = sum(_resonance_db(freqs, fmt[k, t], bw[k]) for k in range(3))
            log_env[t] = db + fixed + gain
    envelope = 10.0 ** ((log_env - 48.0) / 10.0)

    base_ap = np.array([0.01, 0.02, 0.05, 0.12, 0.25]) * style.breathiness
    aps = np.where(voiced[None, :], np.clip(base_ap, 0.0, 1.0)[:, None], 1.0)
    ap_bins = _band_to_bins(aps, FFT_SIZE, SAMPLE_RATE, AP_BAND_EDGES_HZ)
    wav = synthesize_from_envelope(envelope, f0, ap_bins, SAMPLE_RATE, HOP, FFT_SIZE, seed=utt_seed % (2**32))
    peak = np.max(np.abs(wav))
    if peak > 0.95:
        wav *= 0.95 / peak
    return wav


def generate_synthetic_corpus(
    n_speakers: int = 4,
    n_emotions: int = 3,
    utterances_per_cell: int = 10,
    seed: int = 0,
    out_dir=None,
    split_sizes=PAPER_SPLIT,
    split_seed: int | None = None,
) -> tuple[dict[str, np.ndarray], Manifest]:
    """Render the corpus; optionally write WAVs and ``manifest.tsv`` under ``out_dir``.

    Returns ``(waveforms by utterance id, manifest)``; the manifest is split
    with proportionally scaled sizes.
    """
    if n_speakers < 2 or n_emotions < 2:
        raise ValueError("need at least 2 speakers and 2 emotions")
    if n_emotions > len(KNOWN_EMOTIONS):
        raise ValueError(f"at most {len(KNOWN_EMOTIONS)} emotions are available")
    emotions = KNOWN_EMOTIONS[:n_emotions]
    speakers = [make_speaker(i, seed) for i in range(n_speakers)]
    sentences = [make_sentence(j, seed) for j in range(utterances_per_cell)]
    waves: dict[str, np.ndarray] = {}
    entries = []
    for si, spk in enumerate(speakers):
        for emotion in emotions:
            style = make_style(si, emotion, seed)
            ei = KNOWN_EMOTIONS.index(emotion)
            for j, sentence in enumerate(sentences):
                uid = f"{spk.speaker_id}_{emotion}_{j:03d}"
                utt_seed = int(np.random.SeedSequence([seed, 5, si, ei, j]).generate_state(1)[0])
                waves[uid] = render_utterance(spk, style, sentence, utt_seed)
                entries.append(
                    ManifestEntry(uid, f"wav/{uid}.wav", spk.speaker_id, spk.gender, emotion, None, f"{j:03d}")
                )
    manifest = split_corpus(entries, split_sizes, seed=seed if split_seed is None else split_seed, scale=True)
    if out_dir is not None:
        out = Path(out_dir)
        for uid, wav in waves.items():
            write_wav(out / "wav" / f"{uid}.wav", wav, SAMPLE_RATE)
        save_manifest(manifest, out / "manifest.tsv")
        manifest.root = out
    return waves, manifest
