"""DTW alignment, mel-cepstral distortion and the per-cell MCD table."""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

MCD_CONST = 10.0 / math.log(10.0)
INTRA = ("M-M", "F-F")
INTER = ("M-F", "F-M")


def _included(x: np.ndarray, include_c0: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"expected a (D, T) matrix with T >= 1, got {x.shape}")
    return x if include_c0 else x[1:]


def dtw_align(a: np.ndarray, b: np.ndarray, include_c0: bool = False) -> list[tuple[int, int]]:
    """Minimum-cost monotonic path from (0, 0) to (Ta-1, Tb-1).

    Local cost is the Euclidean frame distance; steps are (1,0), (0,1)
    and (1,1).  Ties prefer the diagonal, then the vertical (a advances).
    """
    a, b = _included(a, include_c0).T, _included(b, include_c0).T
    ta, tb = len(a), len(b)
    if a.shape[1] == 0 or b.shape[1] != a.shape[1]:
        raise ValueError("frames must share a non-empty coefficient dimension")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    acc = np.full((ta + 1, tb + 1), np.inf)
    acc[0, 0] = 0.0
    move = np.zeros((ta + 1, tb + 1), dtype=np.int8)
    for i in range(1, ta + 1):
        row, prev = acc[i], acc[i - 1]
        c = cost[i - 1]
        for j in range(1, tb + 1):
            d, v, h = prev[j - 1], prev[j], row[j - 1]
            if d <= v and d <= h:
                best, m = d, 0
            elif v <= h:
                best, m = v, 1
            else:
                best, m = h, 2
            row[j] = best + c[j - 1]
            move[i, j] = m
    path = []
    i, j = ta, tb
    while i > 0 and j > 0:
        path.append((i - 1, j - 1))
        m = move[i, j]
        if m == 0:
            i, j = i - 1, j - 1
        elif m == 1:
            i -= 1
        else:
            j -= 1
    if i or j:
        raise AssertionError("DTW backtrack did not reach the origin")
    return path[::-1]


def path_cost(a: np.ndarray, b: np.ndarray, path, include_c0: bool = False) -> float:
    a, b = _included(a, include_c0), _included(b, include_c0)
    return float(sum(np.linalg.norm(a[:, i] - b[:, j]) for i, j in path))


def frame_mcd(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-frame MCD in dB for already-aligned (D, T) matrices."""
    return MCD_CONST * np.sqrt(2.0 * ((x - y) ** 2).sum(axis=0))


def mcd(converted: np.ndarray, target: np.ndarray, use_dtw: bool = True, include_c0: bool = False) -> float:
    x, y = _included(converted, include_c0), _included(target, include_c0)
    if x.shape[0] == 0:
        raise ValueError("no cepstral coefficients left after exclusion")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"coefficient counts differ: {x.shape[0]} vs {y.shape[0]}")
    if use_dtw:
        path = dtw_align(converted, target, include_c0)
        ia, ib = np.array(path).T
        x, y = x[:, ia], y[:, ib]
    elif x.shape[1] != y.shape[1]:
        raise ValueError(f"frame counts differ ({x.shape[1]} vs {y.shape[1]}); enable DTW")
    return float(frame_mcd(x, y).mean())


def gender_pairing(src_gender: str, tgt_gender: str) -> str:
    pair = f"{src_gender}-{tgt_gender}"
    if pair not in INTRA + INTER:
        raise ValueError(f"bad gender pairing {pair!r}")
    return pair


@dataclass
class McdRecord:
    source_speaker: str
    target_speaker: str
    emotion: str
    gender_pairing: str
    mcd_db: float
    n_utterances: int
    source_mcd_db: float | None = None  # unconverted source vs target, same alignment rule

    def __post_init__(self):
        if self.mcd_db < 0 or self.n_utterances <= 0:
            raise ValueError("mcd_db must be >= 0 and n_utterances > 0")


@dataclass
class McdTable:
    records: list[McdRecord] = field(default_factory=list)

    def intra(self) -> list[McdRecord]:
        return [r for r in self.records if r.gender_pairing in INTRA]

    def inter(self) -> list[McdRecord]:
        return [r for r in self.records if r.gender_pairing in INTER]

    def to_json(self) -> str:
        return json.dumps({"records": [asdict(r) for r in self.records]}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "McdTable":
        return cls([McdRecord(**r) for r in json.loads(text)["records"]])

    def grouped(self) -> dict[tuple[str, str], tuple[float, float | None, int]]:
        """(emotion, pairing) -> (mean converted MCD, mean source MCD, cell count)."""
        acc: dict = defaultdict(list)
        for r in self.records:
            acc[(r.emotion, r.gender_pairing)].append(r)
        out = {}
        for key, rs in acc.items():
            src = [r.source_mcd_db for r in rs if r.source_mcd_db is not None]
            out[key] = (float(np.mean([r.mcd_db for r in rs])), float(np.mean(src)) if src else None, len(rs))
        return out

    def render(self) -> str:
        g = self.grouped()
        emotions = sorted({e for e, _ in g})
        lines = []
        for title, pairs in (("Intra-gender", INTRA), ("Inter-gender", INTER)):
            lines.append(f"Average MCD [dB], {title.lower()}")
            lines.append(f"{'emotion':<10} {'pair':<5} {'source':>8} {'converted':>10} {'cells':>6}")
            for emo in emotions:
                for p in pairs:
                    if (emo, p) not in g:
                        continue
                    conv, src, n = g[(emo, p)]
                    src_txt = f"{src:8.3f}" if src is not None else f"{'-':>8}"
                    lines.append(f"{emo:<10} {p:<5} {src_txt} {conv:10.3f} {n:6d}")
            lines.append("")
        lines.append("Per cell")
        lines.append(f"{'source':<8} {'target':<8} {'emotion':<10} {'pair':<5} {'source':>8} {'converted':>10} {'n':>4}")
        for r in self.records:
            src_txt = f"{r.source_mcd_db:8.3f}" if r.source_mcd_db is not None else f"{'-':>8}"
            lines.append(
                f"{r.source_speaker:<8} {r.target_speaker:<8} {r.emotion:<10} {r.gender_pairing:<5} "
                f"{src_txt} {r.mcd_db:10.3f} {r.n_utterances:4d}"
            )
        return "\n".join(lines) + "\n"


def evaluate_system(
    eval_entries: Sequence,
    converted: Mapping[tuple[str, str], np.ndarray],
    reference_mceps: Mapping[str, np.ndarray],
    genders: Mapping[str, str],
    use_dtw: bool = True,
    include_c0: bool = False,
) -> McdTable:
    """Per-cell mean MCD of converted utterances against parallel target utterances.

    ``eval_entries`` are manifest entries of the evaluation split;
    ``converted`` maps (source utterance id, target speaker) to converted
    MCEPs; ``reference_mceps`` maps utterance id to analyzed MCEPs (used
    both as targets and for the unconverted-source baseline).
    """
    by_key = {(e.speaker_id, e.emotion, e.sentence_id): e for e in eval_entries}
    src_of = {e.utterance_id: e for e in eval_entries}
    cells: dict = defaultdict(lambda: ([], []))
    for (uid, tgt_spk), mc in sorted(converted.items()):
        if uid not in src_of:
            log.warning("converted utterance %s is not in the evaluation split; skipped", uid)
            continue
        e = src_of[uid]
        tgt = by_key.get((tgt_spk, e.emotion, e.sentence_id))
        if tgt is None or tgt.utterance_id not in reference_mceps:
            log.warning("no parallel target for %s -> %s; skipped", uid, tgt_spk)
            continue
        target = reference_mceps[tgt.utterance_id]
        conv_list, src_list = cells[(e.speaker_id, tgt_spk, e.emotion)]
        conv_list.append(mcd(mc, target, use_dtw, include_c0))
        if uid in reference_mceps:
            src_list.append(mcd(reference_mceps[uid], target, use_dtw, include_c0))
    table = McdTable()
    for (s, t, emo), (conv_list, src_list) in sorted(cells.items()):
        table.records.append(
            McdRecord(
                s, t, emo, gender_pairing(genders[s], genders[t]), float(np.mean(conv_list)), len(conv_list),
                float(np.mean(src_list)) if src_list else None,
            )
        )
    return table
