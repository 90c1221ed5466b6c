"""Run-time conversion of a source utterance to a target speaker and style.

Cepstra go through the generator over overlapping windows; F0 is mapped
with the log-Gaussian transform; aperiodicities are copied untouched.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, ConversionError, F0StatsError, InvariantViolation, JesError
from .features import AcousticFeatures, F0Stats, compute_f0_stats, lg_transform_f0
from .features.backend import analyze_waveform, make_backend, synthesize_waveform
from .features.io import read_wav, save_features, write_wav

log = logging.getLogger(__name__)

F0_MODES = ("speaker_emotion", "speaker")


class ReferenceRegistry:
    """Mean style vector per (speaker, emotion) cell, computed once."""

    def __init__(self, means: Mapping[tuple[str, str], np.ndarray], set_id: str = "reference"):
        self.means = {k: np.asarray(v, dtype=np.float32) for k, v in means.items()}
        self.set_id = set_id

    @classmethod
    def from_styles(cls, styles: Mapping[str, np.ndarray], cells: Mapping[tuple[str, str], Sequence[str]],
                    set_id: str = "reference") -> "ReferenceRegistry":
        means = {}
        for cell, ids in cells.items():
            vecs = [styles[u] for u in ids if u in styles]
            if vecs:
                means[cell] = np.mean(np.stack(vecs).astype(np.float64), axis=0)
        return cls(means, set_id)

    def get(self, speaker: str, emotion: str) -> np.ndarray:
        try:
            return self.means[(speaker, emotion)]
        except KeyError:
            raise ConversionError(
                f"no reference style for ({speaker}, {emotion}) in reference set {self.set_id!r}"
            ) from None

    def cells(self):
        return sorted(self.means)

    def to_json(self) -> str:
        return json.dumps(
            {"set_id": self.set_id,
             "cells": [{"speaker": s, "emotion": e, "style": [float(x) for x in self.means[(s, e)]]}
                       for s, e in self.cells()]},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "ReferenceRegistry":
        d = json.loads(text)
        return cls({(c["speaker"], c["emotion"]): np.array(c["style"], dtype=np.float32) for c in d["cells"]},
                   d["set_id"])


class F0Registry:
    """Log-F0 statistics keyed per (speaker, emotion) cell, or per speaker."""

    def __init__(self, stats: Mapping[tuple, F0Stats], mode: str = "speaker_emotion"):
        if mode not in F0_MODES:
            raise ConfigurationError(f"unknown F0 statistics mode {mode!r}; choose from {F0_MODES}")
        self.stats = dict(stats)
        self.mode = mode

    def _key(self, speaker, emotion):
        return (speaker, emotion) if self.mode == "speaker_emotion" else (speaker, None)

    @classmethod
    def from_contours(cls, contours: Mapping[tuple[str, str], Sequence[np.ndarray]], mode: str = "speaker_emotion"):
        if mode not in F0_MODES:
            raise ConfigurationError(f"unknown F0 statistics mode {mode!r}; choose from {F0_MODES}")
        grouped: dict[tuple, list] = {}
        for (spk, emo), items in contours.items():
            key = (spk, emo) if mode == "speaker_emotion" else (spk, None)
            grouped.setdefault(key, []).extend(items)
        stats = {}
        for key, items in sorted(grouped.items(), key=lambda kv: (kv[0][0], kv[0][1] or "")):
            try:
                stats[key] = compute_f0_stats(items)
            except F0StatsError as exc:
                log.warning("no F0 statistics for %s: %s", key, exc)
        return cls(stats, mode)

    def get(self, speaker: str, emotion: str) -> F0Stats:
        try:
            return self.stats[self._key(speaker, emotion)]
        except KeyError:
            raise ConversionError(f"no F0 statistics for {self._key(speaker, emotion)}") from None

    def to_json(self) -> str:
        return json.dumps(
            {"mode": self.mode,
             "stats": [{"speaker": k[0], "emotion": k[1], "mean_log_f0": v.mean_log_f0, "std_log_f0": v.std_log_f0}
                       for k, v in self.stats.items()]},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "F0Registry":
        d = json.loads(text)
        return cls({(s["speaker"], s["emotion"]): F0Stats(s["mean_log_f0"], s["std_log_f0"]) for s in d["stats"]}, d["mode"])


def window_starts(n_frames: int, window: int, hop: int) -> list[int]:
    if n_frames <= window:
        return [0]
    starts = list(range(0, n_frames - window + 1, hop))
    if starts[-1] != n_frames - window:
        starts.append(n_frames - window)
    return starts


def triangular_weights(window: int) -> np.ndarray:
    n = np.arange(window)
    return np.minimum(n + 1, window - n).astype(np.float64)


def generate_windowed(x: np.ndarray, fn: Callable[[np.ndarray], np.ndarray], window: int, hop: int) -> np.ndarray:
    """Apply ``fn`` ([W x C x window] -> same) over overlapping windows and blend.

    Short inputs are edge padded to one window and trimmed back.
    """
    c, t = x.shape
    if t < window:
        padded = np.pad(x, ((0, 0), (0, window - t)), mode="edge")
        return np.asarray(fn(padded[None]))[0][:, :t]
    starts = window_starts(t, window, hop)
    out = np.asarray(fn(np.stack([x[:, s : s + window] for s in starts])), dtype=np.float64)
    w = triangular_weights(window)
    acc = np.zeros((c, t))
    norm = np.zeros(t)
    for seg, s in zip(out, starts):
        acc[:, s : s + window] += seg * w
        norm[s : s + window] += w
    return acc / norm


@dataclass
class ConversionRequest:
    source: object  # AcousticFeatures, waveform array, or path to a wav file
    source_speaker: str
    source_emotion: str
    target_speaker: str
    target_emotion: str | None = None
    output_path: str | None = None
    reference_set: str = "reference"
    request_id: str = ""
    allow_emotion_change: bool = False
    save_features: bool = False


@dataclass
class ConversionResult:
    request_id: str
    features: AcousticFeatures
    waveform: np.ndarray | None
    output_path: str | None = None


def _source_features(source, backend) -> AcousticFeatures:
    if isinstance(source, AcousticFeatures):
        return source
    if isinstance(source, (str, Path)):
        wav, sr = read_wav(source)
        return analyze_waveform(wav, sr, backend=backend)
    if isinstance(source, np.ndarray):
        return analyze_waveform(source, 16000, backend=backend)
    raise ConversionError(f"unsupported source type {type(source).__name__}")


def convert_features(
    features: AcousticFeatures,
    source_speaker: str,
    source_emotion: str,
    target_speaker: str,
    target_emotion: str,
    bundle,
    references: ReferenceRegistry,
    f0_registry: F0Registry,
    window: int = 128,
    hop: int | None = None,
) -> AcousticFeatures:
    """Feature-domain conversion; APs and the unvoiced mask are carried over unchanged."""
    hop = hop or window // 2
    bundle.speaker_index(source_speaker)
    bundle.speaker_index(target_speaker)
    style = references.get(target_speaker, target_emotion)
    src_stats = f0_registry.get(source_speaker, source_emotion)
    tgt_stats = f0_registry.get(target_speaker, target_emotion)
    label = bundle.one_hot([target_speaker])
    x = bundle.normalize(features.mceps.astype(np.float64), source_speaker)

    bundle.eval()

    def run(segs: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            xs = torch.as_tensor(segs, dtype=bundle.norm_mean.dtype)
            n = xs.shape[0]
            st = torch.as_tensor(style, dtype=xs.dtype).expand(n, -1)
            return bundle.generate(xs, st, label.expand(n, -1)).double().numpy()

    y = generate_windowed(x, run, window, hop)
    mceps = bundle.denormalize(y, target_speaker)
    f0 = lg_transform_f0(features.f0, src_stats, tgt_stats)
    if mceps.shape != features.mceps.shape or f0.shape != features.f0.shape:
        raise InvariantViolation(
            f"frame count changed during conversion: {features.mceps.shape} -> {mceps.shape}, f0 {f0.shape}"
        )
    if not np.array_equal(f0 > 0, features.f0 > 0):
        raise InvariantViolation("unvoiced mask changed during F0 conversion")
    return features.replace(mceps=mceps, f0=f0, aps=features.aps.copy())


def convert_utterance(request: ConversionRequest, bundle, references: ReferenceRegistry, f0_registry: F0Registry,
                      backend=None, window: int = 128, synthesize: bool = True) -> ConversionResult:
    target_emotion = request.target_emotion or request.source_emotion
    if target_emotion != request.source_emotion and not request.allow_emotion_change:
        raise ConversionError(
            f"target emotion {target_emotion!r} differs from source emotion {request.source_emotion!r}; "
            "emotion category changes are disabled (use the override flag to allow)"
        )
    if request.reference_set != references.set_id:
        raise ConversionError(f"reference set {request.reference_set!r} is not loaded (have {references.set_id!r})")
    backend = backend or make_backend("builtin")
    src = _source_features(request.source, backend)
    conv = convert_features(src, request.source_speaker, request.source_emotion, request.target_speaker,
                            target_emotion, bundle, references, f0_registry, window)
    wav = synthesize_waveform(conv, backend) if synthesize else None
    out = None
    if request.output_path:
        out = Path(request.output_path)
        if wav is not None:
            write_wav(out, wav, conv.sample_rate_hz)
        if request.save_features or wav is None:
            save_features(out.with_suffix(".npz"), conv)
    return ConversionResult(request.request_id, conv, wav, str(out) if out else None)


@dataclass
class BatchSummary:
    results: list
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> dict:
        return {
            "requested": len(self.results) + len(self.failures),
            "succeeded": len(self.results),
            "failed": len(self.failures),
            "failures": self.failures,
        }


def batch_convert(requests: Sequence[ConversionRequest], bundle, references, f0_registry, backend=None,
                  window: int = 128, synthesize: bool = True) -> BatchSummary:
    """Convert every request independently; errors are collected, not raised."""
    out = BatchSummary([])
    for i, req in enumerate(requests):
        rid = req.request_id or str(i)
        try:
            out.results.append(convert_utterance(req, bundle, references, f0_registry, backend, window, synthesize))
        except InvariantViolation:
            raise
        except (JesError, ValueError, OSError) as exc:
            log.warning("request %s failed: %s", rid, exc)
            out.failures.append({"request_id": rid, "error": type(exc).__name__, "message": str(exc)})
    return out
