"""Generator, discriminator and speaker classifier.

All three are 1-D gated convolution stacks over time with the cepstral
coefficients as input channels.  A gated block is conv -> batch norm ->
GLU, so a block's conv produces twice its nominal output width.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError
from ..features.types import MCEP_DIM
from ..ser import STYLE_DIM

LOG_EPS = 1e-7


@dataclass
class GANConfig:
    speakers: tuple = ()
    mcep_dim: int = MCEP_DIM
    style_dim: int = STYLE_DIM
    merge_channels: int = MCEP_DIM
    enc_channels: tuple = (64, 128, 256, 128, 10)
    enc_strides: tuple = (1, 2, 2, 1, 1)
    dec_channels: tuple = (64, 128, 64, 32)
    g_kernel: int = 9
    d_channels: tuple = (32, 32, 32, 32)
    d_strides: tuple = (1, 2, 2, 2)
    c_channels: tuple = (8, 16, 32, 16)
    c_strides: tuple = (1, 2, 2, 2)
    dc_kernel: int = 3
    c_slice: int = 8

    def __post_init__(self):
        self.speakers = tuple(self.speakers)
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        if len(self.enc_channels) != len(self.enc_strides):
            raise ConfigurationError("enc_channels and enc_strides differ in length")
        if len(self.d_channels) != len(self.d_strides) or len(self.c_channels) != len(self.c_strides):
            raise ConfigurationError("discriminator/classifier channels and strides differ in length")
        if not 1 <= self.c_slice <= self.mcep_dim:
            raise ConfigurationError(f"c_slice must be in [1, {self.mcep_dim}]")
        if self.g_kernel % 2 == 0 or self.dc_kernel % 2 == 0:
            raise ConfigurationError("kernel sizes must be odd")

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    @property
    def time_multiple(self) -> int:
        return int(np.prod(self.enc_strides))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GANConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown gan config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class GatedBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1):
        super().__init__()
        self.out_channels = out_ch
        self.stride = stride
        self.conv = nn.Conv1d(in_ch, 2 * out_ch, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.BatchNorm1d(2 * out_ch)

    def forward(self, x):
        return F.glu(self.norm(self.conv(x)), dim=1)


def broadcast_condition(style: torch.Tensor, label: torch.Tensor, length: int) -> torch.Tensor:
    cond = torch.cat([style, label.to(style.dtype)], dim=1)
    return cond.unsqueeze(-1).expand(-1, -1, length)


class ConditionMerge(nn.Module):
    """Per-frame affine projection of [mceps; style; label] to the generator input width."""

    def __init__(self, mcep_dim: int, style_dim: int, n_speakers: int, out_channels: int):
        super().__init__()
        self.mcep_dim, self.style_dim, self.n_speakers = mcep_dim, style_dim, n_speakers
        self.fc = nn.Linear(mcep_dim + style_dim + n_speakers, out_channels)

    def forward(self, mceps, style, label):
        if mceps.dim() != 3 or mceps.shape[1] != self.mcep_dim:
            raise ValueError(f"mceps must be [B x {self.mcep_dim} x L], got {tuple(mceps.shape)}")
        b = mceps.shape[0]
        if style.shape != (b, self.style_dim):
            raise ValueError(f"style must be [{b} x {self.style_dim}], got {tuple(style.shape)}")
        if label.shape != (b, self.n_speakers):
            raise ValueError(f"label must be [{b} x {self.n_speakers}], got {tuple(label.shape)}")
        h = torch.cat([mceps, broadcast_condition(style, label, mceps.shape[-1])], dim=1)
        return self.fc(h.transpose(1, 2)).transpose(1, 2)


def condition_merge(mceps, style, label, merge: ConditionMerge):
    return merge(mceps, style, label)


class Generator(nn.Module):
    """Encoder (5 gated blocks) -> decoder (4 gated blocks, re-conditioned) -> transposed conv.

    There are no skip connections; the decoder sees only the encoder's
    10-channel code plus the broadcast style and speaker condition.
    """

    def __init__(self, cfg: GANConfig):
        super().__init__()
        self.cfg = cfg
        self.merge = ConditionMerge(cfg.mcep_dim, cfg.style_dim, cfg.n_speakers, cfg.merge_channels)
        enc, ch = [], cfg.merge_channels
        for out, stride in zip(cfg.enc_channels, cfg.enc_strides):
            enc.append(GatedBlock(ch, out, cfg.g_kernel, stride))
            ch = out
        self.encoder = nn.ModuleList(enc)
        cond = cfg.style_dim + cfg.n_speakers
        dec = []
        for out in cfg.dec_channels:
            dec.append(GatedBlock(ch + cond, out, cfg.g_kernel, 1))
            ch = out
        self.decoder = nn.ModuleList(dec)
        up = cfg.time_multiple
        if up == 1:
            k, p = cfg.g_kernel, cfg.g_kernel // 2
        elif up % 2 == 0:
            # kernel 2*up, padding up/2 gives out = in*up exactly
            k, p = 2 * up, up // 2
        else:
            raise ConfigurationError(f"total encoder stride {up} must be 1 or even")
        self.out = nn.ConvTranspose1d(ch + cond, cfg.mcep_dim, k, stride=up, padding=p)

    def forward(self, x, style, label):
        m = self.cfg.time_multiple
        if x.shape[-1] % m:
            raise ValueError(f"generator input length {x.shape[-1]} must be a multiple of {m}")
        h = self.merge(x, style, label)
        for block in self.encoder:
            h = block(h)
        for block in self.decoder:
            h = block(torch.cat([h, broadcast_condition(style, label, h.shape[-1])], dim=1))
        return self.out(torch.cat([h, broadcast_condition(style, label, h.shape[-1])], dim=1))


class Discriminator(nn.Module):
    """Conditional real/fake score, geometric-mean pooled over time patches."""

    def __init__(self, cfg: GANConfig):
        super().__init__()
        ch, blocks = cfg.mcep_dim + cfg.n_speakers, []
        for out, stride in zip(cfg.d_channels, cfg.d_strides):
            blocks.append(GatedBlock(ch, out, cfg.dc_kernel, stride))
            ch = out
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Conv1d(ch, 1, cfg.dc_kernel, padding=cfg.dc_kernel // 2)

    def patch_logits(self, x, label):
        h = torch.cat([x, label.to(x.dtype).unsqueeze(-1).expand(-1, -1, x.shape[-1])], dim=1)
        return self.out(self.blocks(h)).squeeze(1)

    def forward(self, x, label):
        return product_pool_sigmoid(self.patch_logits(x, label))


class Classifier(nn.Module):
    """Speaker posterior from the lowest cepstral rows, pooled over patches."""

    def __init__(self, cfg: GANConfig):
        super().__init__()
        self.c_slice = cfg.c_slice
        ch, blocks = cfg.c_slice, []
        for out, stride in zip(cfg.c_channels, cfg.c_strides):
            blocks.append(GatedBlock(ch, out, cfg.dc_kernel, stride))
            ch = out
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Conv1d(ch, max(cfg.n_speakers, 1), cfg.dc_kernel, padding=cfg.dc_kernel // 2)

    def forward(self, x):
        logits = self.out(self.blocks(x[:, : self.c_slice]))
        return product_pool_softmax(logits)


def product_pool_sigmoid(logits: torch.Tensor) -> torch.Tensor:
    """[B x P] patch logits -> [B] geometric mean of patch probabilities."""
    return torch.exp(F.logsigmoid(logits).mean(dim=-1))


def product_pool_softmax(logits: torch.Tensor) -> torch.Tensor:
    """[B x N x P] patch logits -> [B x N]: geometric mean over patches, renormalized."""
    return torch.softmax(F.log_softmax(logits, dim=1).mean(dim=-1), dim=1)


class ModelBundle(nn.Module):
    """G, D and C together with per-speaker cepstral normalization statistics."""

    def __init__(self, cfg: GANConfig):
        super().__init__()
        if cfg.n_speakers < 1:
            raise ConfigurationError("at least one speaker is required")
        self.cfg = cfg
        self.generator = Generator(cfg)
        self.discriminator = Discriminator(cfg)
        self.classifier = Classifier(cfg)
        self.register_buffer("norm_mean", torch.zeros(cfg.n_speakers, cfg.mcep_dim))
        self.register_buffer("norm_std", torch.ones(cfg.n_speakers, cfg.mcep_dim))

    @property
    def speakers(self) -> tuple:
        return self.cfg.speakers

    def speaker_index(self, speaker: str) -> int:
        try:
            return self.cfg.speakers.index(speaker)
        except ValueError:
            raise ConfigurationError(
                f"unknown speaker {speaker!r}; known speakers: {', '.join(self.cfg.speakers)}"
            ) from None

    def one_hot(self, speakers) -> torch.Tensor:
        idx = [self.speaker_index(s) for s in speakers]
        return F.one_hot(torch.tensor(idx), self.cfg.n_speakers).to(self.norm_mean.dtype)

    def set_normalization(self, stats: dict[str, tuple[np.ndarray, np.ndarray]]):
        for spk, (mean, std) in stats.items():
            i = self.speaker_index(spk)
            self.norm_mean[i] = torch.as_tensor(mean, dtype=self.norm_mean.dtype)
            self.norm_std[i] = torch.as_tensor(std, dtype=self.norm_std.dtype)

    def normalize(self, mceps: np.ndarray, speaker: str) -> np.ndarray:
        i = self.speaker_index(speaker)
        return (mceps - self.norm_mean[i].numpy()[:, None]) / self.norm_std[i].numpy()[:, None]

    def denormalize(self, mceps: np.ndarray, speaker: str) -> np.ndarray:
        i = self.speaker_index(speaker)
        return mceps * self.norm_std[i].numpy()[:, None] + self.norm_mean[i].numpy()[:, None]

    def generate(self, x, style, label):
        return self.generator(x, style, label)

    def discriminate(self, x, label):
        return self.discriminator(x, label)

    def classify(self, x):
        return self.classifier(x)


def speaker_normalization(mceps_by_speaker: dict[str, list[np.ndarray]], floor: float = 1e-6):
    """Per-speaker, per-coefficient mean/std over all frames."""
    out = {}
    for spk, items in mceps_by_speaker.items():
        frames = np.concatenate([np.asarray(m, dtype=np.float64) for m in items], axis=1)
        out[spk] = (frames.mean(axis=1), np.maximum(frames.std(axis=1), floor))
    return out
