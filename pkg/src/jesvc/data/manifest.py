"""Corpus manifests and the train/eval/reference split protocol.

File layout (tab separated, UTF-8)::

    #jesvc-manifest<TAB>v1
    utterance_id  path  speaker_id  gender  emotion  split  sentence_id
    ...

Column order is fixed.  ``path`` is relative to the manifest's directory
unless absolute.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ManifestError

log = logging.getLogger(__name__)

MANIFEST_VERSION = "v1"
MAGIC = "#jesvc-manifest"
COLUMNS = ("utterance_id", "path", "speaker_id", "gender", "emotion", "split", "sentence_id")
SPLITS = ("train", "eval", "reference")
GENDERS = ("M", "F")
KNOWN_EMOTIONS = ("neutral", "happy", "sad", "angry", "surprise")
PAPER_SPLIT = (300, 20, 30)


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    path: str
    speaker_id: str
    gender: str
    emotion: str
    split: str | None
    sentence_id: str

    @property
    def cell(self) -> tuple[str, str]:
        return (self.speaker_id, self.emotion)


def _sentence_key(sentence_id: str):
    return (0, int(sentence_id), "") if sentence_id.isdigit() else (1, 0, sentence_id)


class Manifest:
    """Ordered, id-unique collection of :class:`ManifestEntry`."""

    def __init__(self, entries: Iterable[ManifestEntry] = (), root: Path | None = None):
        self.entries = list(entries)
        self.root = Path(root) if root is not None else None
        seen = set()
        for e in self.entries:
            if e.utterance_id in seen:
                raise ManifestError(f"duplicate utterance_id {e.utterance_id!r}")
            seen.add(e.utterance_id)
        self._by_id = {e.utterance_id: e for e in self.entries}

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.entries == other.entries

    def __getitem__(self, utterance_id: str) -> ManifestEntry:
        return self._by_id[utterance_id]

    def __contains__(self, utterance_id) -> bool:
        return utterance_id in self._by_id

    def speakers(self) -> list[str]:
        return sorted({e.speaker_id for e in self.entries})

    def emotions(self) -> list[str]:
        return sorted({e.emotion for e in self.entries})

    def genders(self) -> dict[str, str]:
        return {e.speaker_id: e.gender for e in self.entries}

    def select(self, split=None, speaker=None, emotion=None) -> list[ManifestEntry]:
        return [
            e
            for e in self.entries
            if (split is None or e.split == split)
            and (speaker is None or e.speaker_id == speaker)
            and (emotion is None or e.emotion == emotion)
        ]

    def cells(self, split=None) -> dict[tuple[str, str], list[ManifestEntry]]:
        out: dict[tuple[str, str], list[ManifestEntry]] = defaultdict(list)
        for e in self.entries:
            if split is None or e.split == split:
                out[e.cell].append(e)
        return dict(sorted(out.items()))

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{MAGIC}\t{MANIFEST_VERSION}", "\t".join(COLUMNS)]
    for e in manifest.entries:
        if e.split not in SPLITS:
            raise ManifestError(f"{e.utterance_id}: cannot save entry without a split tag")
        lines.append("\t".join(getattr(e, c) for c in COLUMNS))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, emotions: Sequence[str] = KNOWN_EMOTIONS) -> Manifest:
    """Parse and validate a manifest file; every problem is reported at once."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not any(l.strip() for l in lines):
        return Manifest([], root=path.parent)
    problems = []
    if not lines[0].startswith(MAGIC):
        raise ManifestError(f"{path}: missing '{MAGIC}' version line")
    version = lines[0].split("\t")[-1].strip()
    if version != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {version!r}")
    if len(lines) < 2 or tuple(lines[1].split("\t")) != COLUMNS:
        raise ManifestError(f"{path}: header must be {' '.join(COLUMNS)}")
    entries, seen = [], {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(COLUMNS):
            problems.append(f"line {lineno}: expected {len(COLUMNS)} fields, got {len(fields)}")
            continue
        e = ManifestEntry(*fields)
        if e.utterance_id in seen:
            problems.append(
                f"line {lineno}: duplicate utterance_id {e.utterance_id!r} (first on line {seen[e.utterance_id]})"
            )
        seen.setdefault(e.utterance_id, lineno)
        if e.emotion not in emotions:
            problems.append(f"line {lineno}: unknown emotion {e.emotion!r}")
        if e.split not in SPLITS:
            problems.append(f"line {lineno}: bad split tag {e.split!r}")
        if e.gender not in GENDERS:
            problems.append(f"line {lineno}: bad gender {e.gender!r}")
        entries.append(e)
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems))
    return Manifest(entries, root=path.parent)


def scaled_split_sizes(n: int, sizes: Sequence[int] = PAPER_SPLIT) -> tuple[int, int, int]:
    """Shrink (train, eval, reference) proportionally to a cell of ``n`` utterances."""
    total = sum(sizes)
    n_eval = max(1, math.floor(sizes[1] * n / total + 0.5))
    n_ref = max(1, math.floor(sizes[2] * n / total + 0.5))
    n_train = n - n_eval - n_ref
    if n_train < 1:
        raise ManifestError(f"a cell of {n} utterances is too small to split")
    return n_train, n_eval, n_ref


def split_corpus(
    entries: Iterable[ManifestEntry],
    sizes: Sequence[int] = PAPER_SPLIT,
    seed: int = 0,
    scale: bool = False,
    mode: str = "random",
) -> Manifest:
    """Assign train/eval/reference tags per (speaker, emotion) cell.

    Sentences are ordered once per emotion (seeded permutation in
    ``random`` mode, ascending sentence id in ``index`` mode) and every
    cell of that emotion follows the same order, so evaluation sentences
    are parallel across speakers.  Eval takes the first sentences, then
    train, and reference keeps the rest.  Assignment is per sentence, so a
    sentence never straddles train and eval within a cell.
    """
    if mode not in ("random", "index"):
        raise ManifestError(f"unknown split mode {mode!r}")
    entries = list(entries)
    n_train, n_eval, n_ref = sizes
    rng = np.random.default_rng(seed)

    by_emotion: dict[str, set[str]] = defaultdict(set)
    cells: dict[tuple[str, str], list[ManifestEntry]] = defaultdict(list)
    for e in entries:
        by_emotion[e.emotion].add(e.sentence_id)
        cells[e.cell].append(e)

    rank: dict[str, dict[str, int]] = {}
    for emotion in sorted(by_emotion):
        order = sorted(by_emotion[emotion], key=_sentence_key)
        if mode == "random":
            order = [order[i] for i in rng.permutation(len(order))]
        rank[emotion] = {s: i for i, s in enumerate(order)}

    tagged: dict[str, str] = {}
    for cell in sorted(cells):
        items = cells[cell]
        n = len(items)
        if n < sum(sizes):
            if not scale:
                raise ManifestError(
                    f"cell {cell} has {n} utterances, fewer than the {sum(sizes)} required"
                )
            cell_train, cell_eval, cell_ref = scaled_split_sizes(n, sizes)
            log.warning("cell %s: %d utterances, scaled split %d/%d/%d", cell, n, cell_train, cell_eval, cell_ref)
        else:
            cell_train, cell_eval, cell_ref = n_train, n_eval, n - n_train - n_eval
        groups: dict[str, list[ManifestEntry]] = defaultdict(list)
        for e in items:
            groups[e.sentence_id].append(e)
        ordered = sorted(groups, key=lambda s: rank[cell[1]][s])
        filled = {"eval": 0, "train": 0}
        for sentence in ordered:
            group = sorted(groups[sentence], key=lambda e: e.utterance_id)
            if filled["eval"] < cell_eval:
                split = "eval"
            elif filled["train"] < cell_train:
                split = "train"
            else:
                split = "reference"
            if split in filled:
                filled[split] += len(group)
            for e in group:
                tagged[e.utterance_id] = split
    return Manifest(replace(e, split=tagged[e.utterance_id]) for e in entries)
