"""Run configuration: a YAML document with sections data/features/ser/gan/train.

Every field has a default; unknown keys at any level are rejected.
Example::

    seed: 0
    data:
      manifest: corpus/manifest.tsv
      workdir: work
    train:
      iterations: 2000
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .features.mel import MelConfig
from .ser import SERConfig, SERTrainConfig
from .stargan.networks import GANConfig
from .stargan.training import TrainConfig

CACHE_ENV = "JES_CACHE_DIR"


@dataclass
class DataSection:
    manifest: str | None = None
    workdir: str = "work"
    f0_stats: str = "speaker_emotion"  # or "speaker"
    reference_split: str = "reference"


@dataclass
class FeaturesSection:
    backend: str = "builtin"
    sample_rate: int = 16000
    frame_shift_ms: float = 5.0
    n_mels: int = 40
    mel_n_fft: int = 400
    mel_hop_ms: float = 10.0

    def mel_config(self) -> MelConfig:
        return MelConfig(sample_rate=self.sample_rate, n_fft=self.mel_n_fft, hop_ms=self.mel_hop_ms,
                         n_mels=self.n_mels)


@dataclass
class SerSection:
    conv_channels: tuple = (16, 32)
    kernel_size: int = 3
    freq_pool: int = 2
    lstm_hidden: int = 64
    attention_dim: int = 64
    dropout: float = 0.1
    steps: int = 300
    batch_size: int = 16
    crop_frames: int = 64
    learning_rate: float = 1e-3
    val_fraction: float = 0.0
    eval_every: int = 25
    patience: int | None = None

    def model_config(self, emotions, n_mels: int) -> SERConfig:
        return SERConfig(n_mels=n_mels, emotions=tuple(emotions), conv_channels=tuple(self.conv_channels),
                         kernel_size=self.kernel_size, freq_pool=self.freq_pool, lstm_hidden=self.lstm_hidden,
                         attention_dim=self.attention_dim, dropout=self.dropout)

    def train_config(self, seed: int) -> SERTrainConfig:
        return SERTrainConfig(steps=self.steps, batch_size=self.batch_size, crop_frames=self.crop_frames,
                              learning_rate=self.learning_rate, seed=seed, val_fraction=self.val_fraction,
                              eval_every=self.eval_every, patience=self.patience)


def _gan_defaults() -> dict:
    d = GANConfig().to_dict()
    d.pop("speakers")
    return d


@dataclass
class TrainSection:
    iterations: int = 2000
    batch_size: int = 4
    crop: int = 128
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_dom: float = 2.0
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    checkpoint_every: int = 500
    log_every: int = 100

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **asdict(self))


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    ser: SerSection = field(default_factory=SerSection)
    gan: dict = field(default_factory=_gan_defaults)
    train: TrainSection = field(default_factory=TrainSection)

    # resolved locations -------------------------------------------------
    @property
    def workdir(self) -> Path:
        return Path(self.data.workdir)

    @property
    def cache_dir(self) -> Path:
        env = os.environ.get(CACHE_ENV)
        return Path(env) if env else self.workdir / "cache"

    @property
    def checkpoint_dir(self) -> Path:
        return self.workdir / "checkpoints"

    @property
    def converted_dir(self) -> Path:
        return self.workdir / "converted"

    @property
    def reports_dir(self) -> Path:
        return self.workdir / "reports"

    def gan_config(self, speakers) -> GANConfig:
        return GANConfig.from_dict({**self.gan, "speakers": list(speakers)})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ser"]["conv_channels"] = list(self.ser.conv_channels)
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


SECTIONS = {"data": DataSection, "features": FeaturesSection, "ser": SerSection, "train": TrainSection}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigurationError(f"section {where!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"bad values in {where}: {exc}") from exc


def config_from_dict(doc: dict | None) -> RunConfig:
    doc = dict(doc or {})
    unknown = sorted(set(doc) - {"seed", "gan", *SECTIONS})
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = RunConfig(seed=int(doc.get("seed", 0)))
    for name, cls in SECTIONS.items():
        if name in doc and doc[name] is not None:
            setattr(cfg, name, _build(cls, doc[name], name))
    if doc.get("gan"):
        gan = doc["gan"]
        if not isinstance(gan, dict):
            raise ConfigurationError("section 'gan' must be a mapping")
        if "speakers" in gan:
            raise ConfigurationError("gan.speakers is derived from the manifest and cannot be set")
        unknown = sorted(set(gan) - set(_gan_defaults()))
        if unknown:
            raise ConfigurationError(f"unknown key(s) in gan: {', '.join(unknown)}")
        cfg.gan = {**_gan_defaults(), **gan}
        GANConfig.from_dict({**cfg.gan, "speakers": []})  # validate now
    if cfg.data.f0_stats not in ("speaker_emotion", "speaker"):
        raise ConfigurationError(f"data.f0_stats must be 'speaker_emotion' or 'speaker', got {cfg.data.f0_stats!r}")
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return config_from_dict(doc)
