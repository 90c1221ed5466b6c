"""Distances between emotional style vectors and embedding export.

RMSE here is the per-coordinate root mean square of the difference,
i.e. the Euclidean distance divided by sqrt(dim).
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ser import STYLE_DIM

log = logging.getLogger(__name__)

EMBEDDING_COLUMNS = ("utterance_id", "speaker", "emotion") + tuple(f"e{i:02d}" for i in range(STYLE_DIM))


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"style vectors must be 1-D with equal length, got {a.shape} and {b.shape}")
    return a, b


def euclidean_distance(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.linalg.norm(a - b))


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.linalg.norm(a - b) / np.sqrt(a.size))


@dataclass
class PairRecord:
    speaker_a: str
    speaker_b: str
    emotion: str
    euclidean_mean: float
    rmse_mean: float
    n_pairs: int


@dataclass
class DistanceReport:
    anchor: str
    emotion: str
    records: list[PairRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def within(self) -> PairRecord | None:
        return next((r for r in self.records if r.speaker_b == self.anchor), None)

    @property
    def cross(self) -> list[PairRecord]:
        return [r for r in self.records if r.speaker_b != self.anchor]

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor,
            "emotion": self.emotion,
            "records": [asdict(r) for r in self.records],
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DistanceReport":
        return cls(d["anchor"], d["emotion"], [PairRecord(**r) for r in d["records"]], d.get("metadata", {}))


def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, Mapping):
        vectors = [vectors[k] for k in sorted(vectors)]
    m = np.asarray(list(vectors) if not isinstance(vectors, np.ndarray) else vectors, dtype=np.float64)
    return m.reshape(-1, m.shape[-1]) if m.size else np.zeros((0, STYLE_DIM))


def _mean_pairwise(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return float(d.mean()), d.size


def speaker_pair_distances(style_sets: Mapping, anchor: str, emotion: str) -> DistanceReport:
    """Mean distances from the anchor cell to every other speaker in one emotion.

    ``style_sets`` maps (speaker, emotion) to a sequence, array, or
    id-keyed mapping of style vectors.  Cross-speaker means run over all
    bipartite pairs; the within-speaker mean runs over unordered distinct
    pairs of the anchor cell and is omitted when the cell has one vector.
    """
    anchor_set = _as_matrix(style_sets.get((anchor, emotion), []))
    if anchor_set.shape[0] == 0:
        raise ValueError(f"anchor cell ({anchor}, {emotion}) is empty")
    dim = anchor_set.shape[1]
    report = DistanceReport(anchor, emotion, metadata={"dim": dim, "skipped": []})
    if anchor_set.shape[0] > 1:
        i, j = np.triu_indices(anchor_set.shape[0], k=1)
        d = np.linalg.norm(anchor_set[i] - anchor_set[j], axis=-1)
        report.records.append(
            PairRecord(anchor, anchor, emotion, float(d.mean()), float(d.mean() / np.sqrt(dim)), int(d.size))
        )
    others = sorted({spk for spk, emo in style_sets if emo == emotion and spk != anchor})
    if not others:
        raise ValueError(f"no other speaker has emotion {emotion!r}")
    for spk in others:
        other = _as_matrix(style_sets[(spk, emotion)])
        if other.shape[0] == 0:
            log.warning("cell (%s, %s) is empty; skipped", spk, emotion)
            report.metadata["skipped"].append(spk)
            continue
        mean, n = _mean_pairwise(anchor_set, other)
        report.records.append(PairRecord(anchor, spk, emotion, mean, mean / np.sqrt(dim), n))
    return report


def _float32_text(v) -> str:
    return repr(float(np.float32(v)))


def export_embeddings(style_sets: Mapping[tuple[str, str], Mapping[str, np.ndarray]], path) -> Path:
    """Write one CSV row per utterance: id, speaker, emotion, 64 feature columns.

    Rows are ordered by (speaker, emotion, utterance id); values are written
    at float32 precision so re-reading reproduces float32 vectors exactly.
    """
    if not style_sets or not any(len(v) for v in style_sets.values()):
        raise ValueError("nothing to export")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EMBEDDING_COLUMNS)
    for (spk, emo) in sorted(style_sets):
        cell = style_sets[(spk, emo)]
        for uid in sorted(cell):
            vec = np.asarray(cell[uid]).ravel()
            if vec.size != STYLE_DIM:
                raise ValueError(f"{uid}: expected {STYLE_DIM} values, got {vec.size}")
            writer.writerow([uid, spk, emo, *(_float32_text(v) for v in vec)])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_embeddings(path) -> dict[tuple[str, str], dict[str, np.ndarray]]:
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != EMBEDDING_COLUMNS:
            raise ValueError(f"{path}: unexpected header")
        for row in reader:
            out.setdefault((row[1], row[2]), {})[row[0]] = np.array(row[3:], dtype=np.float32)
    return out


def within_vs_cross(style_sets: Mapping, emotions: Sequence[str] | None = None) -> list[dict]:
    """For every (anchor, emotion) cell: within mean, smallest cross mean, and whether within < cross."""
    emotions = emotions or sorted({e for _, e in style_sets})
    rows = []
    for emotion in emotions:
        for spk in sorted({s for s, e in style_sets if e == emotion}):
            rep = speaker_pair_distances(style_sets, spk, emotion)
            if rep.within is None or not rep.cross:
                continue
            nearest = min(r.euclidean_mean for r in rep.cross)
            rows.append(
                {
                    "speaker": spk,
                    "emotion": emotion,
                    "within": rep.within.euclidean_mean,
                    "nearest_cross": nearest,
                    "holds": rep.within.euclidean_mean < nearest,
                }
            )
    return rows
