"""Speech emotion recognizer used as the emotional style descriptor.

The network is conv3d (over delta-order x mel x time) -> BLSTM ->
additive attention -> FC(64) -> FC(K).  The 64-dim FC output feeding the
emotion classifier is the utterance-level style vector.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, FeatureError, TrainingError
from .features.mel import MelConfig, compute_mel_spectrogram
from .features.types import MelSpectrogram

log = logging.getLogger(__name__)

STYLE_DIM = 64
CHECKPOINT_FORMAT = "jesvc-ser"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SERConfig:
    n_mels: int = 40
    emotions: tuple = ("neutral", "happy", "sad")
    conv_channels: tuple = (16, 32)
    kernel_size: int = 3
    freq_pool: int = 2
    lstm_hidden: int = 64
    attention_dim: int = 64
    style_dim: int = STYLE_DIM
    dropout: float = 0.1

    @property
    def n_emotions(self) -> int:
        return len(self.emotions)

    @property
    def min_frames(self) -> int:
        return self.kernel_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["emotions"] = list(self.emotions)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SERConfig":
        d = dict(d)
        d["emotions"] = tuple(d["emotions"])
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class SEROutput(NamedTuple):
    style: torch.Tensor  # (B, 64)
    logits: torch.Tensor  # (B, K)
    weights: torch.Tensor  # (B, T) attention weights
    frames: torch.Tensor  # (B, T, 2H) recurrent outputs


class SERModel(nn.Module):
    def __init__(self, config: SERConfig = SERConfig()):
        super().__init__()
        self.config = config
        layers = []
        in_ch = 1
        for ch in config.conv_channels:
            layers += [
                nn.Conv3d(in_ch, ch, config.kernel_size, padding=config.kernel_size // 2),
                nn.ReLU(),
                nn.MaxPool3d((1, config.freq_pool, 1)),
            ]
            in_ch = ch
        self.conv = nn.Sequential(*layers)
        freq = config.n_mels // config.freq_pool ** len(config.conv_channels)
        if freq < 1:
            raise ValueError("too few mel bins for the pooling schedule")
        self.lstm = nn.LSTM(in_ch * 3 * freq, config.lstm_hidden, batch_first=True, bidirectional=True)
        self.attn_proj = nn.Linear(2 * config.lstm_hidden, config.attention_dim)
        self.attn_query = nn.Parameter(torch.randn(config.attention_dim) / config.attention_dim**0.5)
        self.style_fc = nn.Linear(2 * config.lstm_hidden, config.style_dim)
        self.dropout = nn.Dropout(config.dropout)
        self.classifier = nn.Linear(config.style_dim, config.n_emotions)
        self.register_buffer("input_mean", torch.zeros(3, config.n_mels, 1))
        self.register_buffer("input_std", torch.ones(3, config.n_mels, 1))

    def encode_frames(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, 3, M, T) log-mel planes -> (B, T, 2H) BLSTM outputs."""
        if mel.dim() != 4 or mel.shape[1] != 3 or mel.shape[2] != self.config.n_mels:
            raise FeatureError(f"expected (B, 3, {self.config.n_mels}, T) input, got {tuple(mel.shape)}")
        if mel.shape[3] < self.config.min_frames:
            raise FeatureError(
                f"input has {mel.shape[3]} frames; the recognizer needs at least {self.config.min_frames}"
            )
        x = (mel - self.input_mean) / self.input_std
        h = self.conv(x.unsqueeze(1))  # (B, C, 3, M', T)
        b, c, d, m, t = h.shape
        h = h.permute(0, 4, 1, 2, 3).reshape(b, t, c * d * m)
        out, _ = self.lstm(h)
        return out

    def attention(self, frames: torch.Tensor) -> torch.Tensor:
        scores = torch.tanh(self.attn_proj(frames)) @ self.attn_query
        return torch.softmax(scores, dim=1)

    def forward(self, mel: torch.Tensor, weights: torch.Tensor | None = None) -> SEROutput:
        """Run the recognizer; ``weights`` (B, T) overrides the learned attention."""
        frames = self.encode_frames(mel)
        if weights is None:
            weights = self.attention(frames)
        pooled = torch.einsum("bt,btd->bd", weights, frames)
        style = F.leaky_relu(self.style_fc(pooled), 0.01)
        logits = self.classifier(self.dropout(style))
        return SEROutput(style, logits, weights, frames)


def _as_tensor(mel: MelSpectrogram | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    return torch.as_tensor(np.ascontiguousarray(values), dtype=dtype).unsqueeze(0)


def ser_forward(mel: MelSpectrogram, model: SERModel) -> tuple[np.ndarray, np.ndarray]:
    """Style vector and emotion posterior of one utterance (inference mode)."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            out = model(_as_tensor(mel, dtype))
            probs = torch.softmax(out.logits.double(), dim=-1)
    finally:
        model.train(was_training)
    return out.style[0].double().numpy(), probs[0].numpy()


def extract_style(
    utterance: MelSpectrogram | np.ndarray,
    model: SERModel,
    mel_config: MelConfig | None = None,
) -> np.ndarray:
    """64-dim style vector of a mel spectrogram or a raw 1-D waveform."""
    if not isinstance(utterance, MelSpectrogram):
        arr = np.asarray(utterance)
        if arr.ndim == 1:
            utterance = compute_mel_spectrogram(arr, mel_config or MelConfig(n_mels=model.config.n_mels))
        else:
            utterance = MelSpectrogram(arr)
    style, _ = ser_forward(utterance, model)
    return style


def reference_style(reference_utterances: Sequence, model: SERModel, mel_config=None) -> np.ndarray:
    """Element-wise mean style over the reference utterances of one (speaker, emotion) cell."""
    if len(reference_utterances) == 0:
        raise ValueError("reference list is empty")
    styles = np.stack([extract_style(u, model, mel_config) for u in reference_utterances])
    return styles.mean(axis=0)


# ---------------------------------------------------------------------------
# Training


@dataclass
class SERTrainConfig:
    steps: int = 300
    batch_size: int = 16
    crop_frames: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.0
    eval_every: int = 25
    patience: int | None = None


@dataclass
class SERTrainResult:
    model: SERModel
    history: list = field(default_factory=list)
    best_step: int | None = None


def _crop(values: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    t = values.shape[-1]
    if t >= length:
        start = int(rng.integers(0, t - length + 1))
        return values[..., start : start + length]
    return np.pad(values, [(0, 0)] * (values.ndim - 1) + [(0, length - t)], mode="edge")


def predict_emotions(model: SERModel, mels: Sequence[MelSpectrogram]) -> np.ndarray:
    return np.array([int(np.argmax(ser_forward(m, model)[1])) for m in mels])


def accuracy(model: SERModel, data: Sequence[tuple[MelSpectrogram, int]]) -> float:
    if not data:
        return float("nan")
    pred = predict_emotions(model, [m for m, _ in data])
    return float(np.mean(pred == np.array([y for _, y in data])))


def _normalization(mels: Sequence[MelSpectrogram]) -> tuple[torch.Tensor, torch.Tensor]:
    stacked = np.concatenate([m.values for m in mels], axis=2)
    mean = stacked.mean(axis=2, keepdims=True)
    std = np.maximum(stacked.std(axis=2, keepdims=True), 1e-3)
    return torch.as_tensor(mean, dtype=torch.float32), torch.as_tensor(std, dtype=torch.float32)


def train_ser(
    train_set: Sequence[tuple[MelSpectrogram, int]],
    config: SERConfig = SERConfig(),
    train_config: SERTrainConfig = SERTrainConfig(),
    init: SERModel | None = None,
) -> SERTrainResult:
    """Minimize emotion cross-entropy on random fixed-length crops.

    With ``init`` the run fine-tunes a copy of that model (its input
    normalization is kept).  With ``val_fraction > 0`` and ``patience``
    set, training stops once held-out accuracy has not improved for
    ``patience`` evaluations and the best state is restored.
    """
    labels = sorted({y for _, y in train_set})
    if len(labels) < 2:
        raise TrainingError("SER training needs at least two emotion classes")
    tc = train_config
    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)

    if init is not None:
        model = copy.deepcopy(init)
        config = model.config
    else:
        model = SERModel(config)
    if max(labels) >= config.n_emotions:
        raise TrainingError(f"label {max(labels)} out of range for {config.n_emotions} emotions")

    data = list(train_set)
    val: list = []
    if tc.val_fraction > 0:
        order = rng.permutation(len(data))
        n_val = max(1, int(round(tc.val_fraction * len(data))))
        val = [data[i] for i in order[:n_val]]
        data = [data[i] for i in order[n_val:]]
    if init is None:
        mean, std = _normalization([m for m, _ in data])
        model.input_mean.copy_(mean)
        model.input_std.copy_(std)

    result = SERTrainResult(model)
    if tc.steps <= 0:
        return result
    opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate)
    early_stopping = bool(val) and tc.patience is not None
    best_acc, best_state, stale = -1.0, None, 0
    if early_stopping:
        best_acc, best_state, result.best_step = accuracy(model, val), copy.deepcopy(model.state_dict()), 0

    for step in range(1, tc.steps + 1):
        model.train()
        idx = rng.integers(0, len(data), size=tc.batch_size)
        x = np.stack([_crop(data[i][0].values, tc.crop_frames, rng) for i in idx])
        y = torch.as_tensor([data[i][1] for i in idx])
        out = model(torch.as_tensor(x, dtype=torch.float32))
        loss = F.cross_entropy(out.logits, y)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite SER loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        record = {"step": step, "loss": loss.item()}
        if early_stopping and step % tc.eval_every == 0:
            acc = accuracy(model, val)
            record["val_accuracy"] = acc
            if acc > best_acc:
                best_acc, best_state, stale, result.best_step = acc, copy.deepcopy(model.state_dict()), 0, step
            else:
                stale += 1
                if stale >= tc.patience:
                    log.info("early stop at step %d (best %d)", step, result.best_step)
                    result.history.append(record)
                    break
        result.history.append(record)
    if early_stopping:
        model.load_state_dict(best_state)
    model.eval()
    return result


# ---------------------------------------------------------------------------
# Persistence


def save_ser(model: SERModel, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": model.config.to_dict(),
            "config_hash": model.config.digest(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_ser(path) -> SERModel:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read SER checkpoint {path}: {exc}") from exc
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version-{CHECKPOINT_VERSION} SER checkpoint")
    config = SERConfig.from_dict(blob["config"])
    if config.digest() != blob["config_hash"]:
        raise CheckpointError(f"{path}: architecture config does not match its hash")
    model = SERModel(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def save_style_cache(path, styles: dict[str, np.ndarray], model_hash: str = "") -> None:
    """Store per-utterance style vectors (float32) keyed by utterance id."""
    ids = sorted(styles)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.stack([np.asarray(styles[i], dtype=np.float32) for i in ids]) if ids else np.zeros((0, STYLE_DIM), np.float32)
    with open(path, "wb") as fh:
        np.savez(fh, utterance_ids=np.array(ids, dtype=str), styles=matrix, ser_hash=np.array(model_hash))


def load_style_cache(path) -> tuple[dict[str, np.ndarray], str]:
    with np.load(Path(path)) as z:
        ids = [str(i) for i in z["utterance_ids"]]
        return dict(zip(ids, z["styles"])), str(z["ser_hash"])
