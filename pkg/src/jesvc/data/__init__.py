"""Corpus manifests, split protocol, synthetic corpus and the ESD adapter."""
from .esd import esd_manifest, scan_esd
from .manifest import (
    KNOWN_EMOTIONS,
    PAPER_SPLIT,
    Manifest,
    ManifestEntry,
    load_manifest,
    save_manifest,
    scaled_split_sizes,
    split_corpus,
)
from .synthetic import generate_synthetic_corpus

__all__ = [
    "KNOWN_EMOTIONS",
    "PAPER_SPLIT",
    "Manifest",
    "ManifestEntry",
    "esd_manifest",
    "generate_synthetic_corpus",
    "load_manifest",
    "save_manifest",
    "scaled_split_sizes",
    "scan_esd",
    "split_corpus",
]
