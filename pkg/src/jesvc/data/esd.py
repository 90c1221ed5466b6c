"""Manifest builder for the public ESD corpus directory layout.

Expected layout (English speakers 0011-0020)::

    <root>/<speaker>/<Emotion>/<speaker>_<index>.wav

where ``<Emotion>`` is one of Neutral, Happy, Sad, Angry, Surprise
(case-insensitive) and ``<index>`` is the six-digit ESD utterance number.
ESD numbers utterances 1-350 per emotion block (neutral 1-350, angry
351-700, ...), and the same block offset holds for every speaker, so the
parallel sentence id is ``(index - 1) % 350 + 1``.  Optional
``train/``, ``evaluation/`` and ``test/`` sub-folders under an emotion are
searched too; their split is recomputed by :func:`split_corpus`.
"""
from __future__ import annotations

import re
from pathlib import Path
from typing import Mapping

from ..errors import ManifestError
from .manifest import KNOWN_EMOTIONS, Manifest, ManifestEntry, split_corpus

SENTENCES_PER_EMOTION = 350
# genders stated for the four speakers analysed in the reference experiments
DEFAULT_GENDERS = {"0013": "M", "0016": "F", "0018": "F", "0020": "M"}
_NAME = re.compile(r"^(\d{4})_(\d{6})$")


def scan_esd(
    root,
    speakers=None,
    emotions=("neutral", "happy", "sad"),
    genders: Mapping[str, str] | None = None,
) -> list[ManifestEntry]:
    root = Path(root)
    genders = {**DEFAULT_GENDERS, **(genders or {})}
    wanted = {e.lower() for e in emotions}
    unknown = wanted - set(KNOWN_EMOTIONS)
    if unknown:
        raise ManifestError(f"unknown emotions {sorted(unknown)}")
    entries = []
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        spk = spk_dir.name
        if speakers is not None and spk not in speakers:
            continue
        for emo_dir in sorted(p for p in spk_dir.iterdir() if p.is_dir()):
            emotion = emo_dir.name.lower()
            if emotion not in wanted:
                continue
            if spk not in genders:
                raise ManifestError(f"no gender known for ESD speaker {spk}; pass a gender map")
            for wav in sorted(emo_dir.rglob("*.wav")):
                m = _NAME.match(wav.stem)
                if not m or m.group(1) != spk:
                    continue
                index = int(m.group(2))
                sentence = (index - 1) % SENTENCES_PER_EMOTION + 1
                entries.append(
                    ManifestEntry(
                        wav.stem, str(wav.resolve()), spk, genders[spk], emotion, None, f"{sentence:04d}"
                    )
                )
    return entries


def esd_manifest(root, seed: int = 0, mode: str = "random", scale: bool = False, **scan_options) -> Manifest:
    """Scan ``root`` and apply the 300/20/30 split per (speaker, emotion) cell.

    ``scale`` shrinks the split proportionally for partial downloads.
    """
    return split_corpus(scan_esd(root, **scan_options), seed=seed, mode=mode, scale=scale)
