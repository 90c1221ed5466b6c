"""Stage II training: batching, target sampling, the D/C/G update step and the loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..errors import CheckpointError, ConfigurationError, TrainingError
from .losses import (
    LossBreakdown,
    LossWeights,
    adv_loss_d,
    adv_loss_g,
    cycle_loss,
    dom_loss_c,
    dom_loss_g,
    generator_objective,
    identity_loss,
)
from .networks import GANConfig, ModelBundle, speaker_normalization

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "jesvc-stargan"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    crop: int = 128
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_dom: float = 2.0
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.crop < 1:
            raise ConfigurationError("iterations >= 0, batch_size >= 1 and crop >= 1 are required")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_dom, self.lambda_cyc, self.lambda_id)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Utterance:
    utterance_id: str
    speaker: str
    emotion: str
    mceps: np.ndarray  # (36, T), not normalized
    style: np.ndarray  # (64,)


@dataclass
class SegmentBatch:
    mceps: torch.Tensor  # B x 36 x L
    styles: torch.Tensor  # B x 64
    labels: torch.Tensor  # B x N one-hot
    mask: torch.Tensor | None = None  # B x L
    ids: list = field(default_factory=list)

    def __post_init__(self):
        b = self.mceps.shape[0]
        if b < 1 or self.styles.shape[0] != b or self.labels.shape[0] != b:
            raise ValueError("batch members disagree on B")
        if not torch.all(self.labels.sum(dim=1) == 1) or not torch.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("label rows must be one-hot")


@dataclass
class TargetBatch:
    styles: torch.Tensor
    labels: torch.Tensor
    ids: list = field(default_factory=list)


class TrainingSet:
    """Normalized training utterances indexed by (speaker, emotion) cell."""

    def __init__(self, utterances: Sequence[Utterance], speakers: Sequence[str] | None = None):
        self.utterances = sorted(utterances, key=lambda u: u.utterance_id)
        if not self.utterances:
            raise TrainingError("training set is empty")
        self.speakers = tuple(speakers) if speakers else tuple(sorted({u.speaker for u in self.utterances}))
        missing = {u.speaker for u in self.utterances} - set(self.speakers)
        if missing:
            raise TrainingError(f"utterances from speakers outside the label set: {sorted(missing)}")
        if len(self.speakers) < 2:
            raise TrainingError("at least 2 speakers are required for training")
        for u in self.utterances:
            if u.mceps.ndim != 2 or u.style.ndim != 1:
                raise TrainingError(f"{u.utterance_id}: bad feature shapes")
        self.cells: dict[tuple[str, str], list[int]] = {}
        for i, u in enumerate(self.utterances):
            self.cells.setdefault((u.speaker, u.emotion), []).append(i)
        self.cell_keys = sorted(self.cells)
        if len(self.cell_keys) < 2:
            raise TrainingError("need at least two (speaker, emotion) cells")
        self.stats = speaker_normalization(
            {s: [u.mceps for u in self.utterances if u.speaker == s] for s in self.speakers}
        )
        self._normed = [
            ((u.mceps - self.stats[u.speaker][0][:, None]) / self.stats[u.speaker][1][:, None]).astype(np.float32)
            for u in self.utterances
        ]
        self._index = {s: i for i, s in enumerate(self.speakers)}

    def __len__(self):
        return len(self.utterances)

    def normalized(self, i: int) -> np.ndarray:
        return self._normed[i]

    def _one_hot(self, speakers) -> torch.Tensor:
        out = torch.zeros(len(speakers), len(self.speakers))
        for r, s in enumerate(speakers):
            out[r, self._index[s]] = 1.0
        return out

    def sample(self, rng: np.random.Generator, batch_size: int, crop: int) -> tuple[SegmentBatch, TargetBatch]:
        picks = rng.integers(0, len(self.utterances), size=batch_size)
        segs, masks = [], []
        for i in picks:
            x = self._normed[i]
            t = x.shape[1]
            if t >= crop:
                off = int(rng.integers(0, t - crop + 1))
                segs.append(x[:, off : off + crop])
                masks.append(np.ones(crop, dtype=np.float32))
            else:
                segs.append(np.pad(x, ((0, 0), (0, crop - t)), mode="edge"))
                masks.append((np.arange(crop) < t).astype(np.float32))
        src = [self.utterances[i] for i in picks]
        batch = SegmentBatch(
            torch.from_numpy(np.stack(segs)),
            torch.from_numpy(np.stack([u.style for u in src]).astype(np.float32)),
            self._one_hot([u.speaker for u in src]),
            torch.from_numpy(np.stack(masks)) if any(m.min() == 0 for m in masks) else None,
            [u.utterance_id for u in src],
        )
        # target cell uniform over the other cells, then a real utterance's style from it
        tgt = []
        for u in src:
            choices = [c for c in self.cell_keys if c != (u.speaker, u.emotion)]
            cell = choices[int(rng.integers(0, len(choices)))]
            members = self.cells[cell]
            tgt.append(self.utterances[members[int(rng.integers(0, len(members)))]])
        targets = TargetBatch(
            torch.from_numpy(np.stack([u.style for u in tgt]).astype(np.float32)),
            self._one_hot([u.speaker for u in tgt]),
            [u.utterance_id for u in tgt],
        )
        return batch, targets


@dataclass
class Optimizers:
    g: torch.optim.Optimizer
    d: torch.optim.Optimizer
    c: torch.optim.Optimizer

    def state_dict(self):
        return {"g": self.g.state_dict(), "d": self.d.state_dict(), "c": self.c.state_dict()}

    def load_state_dict(self, state):
        self.g.load_state_dict(state["g"])
        self.d.load_state_dict(state["d"])
        self.c.load_state_dict(state["c"])


def make_optimizers(bundle: ModelBundle, cfg: TrainConfig) -> Optimizers:
    betas = (cfg.beta1, cfg.beta2)
    return Optimizers(
        torch.optim.Adam(bundle.generator.parameters(), lr=cfg.lr, betas=betas),
        torch.optim.Adam(bundle.discriminator.parameters(), lr=cfg.lr, betas=betas),
        torch.optim.Adam(bundle.classifier.parameters(), lr=cfg.lr, betas=betas),
    )


def _check_finite(name: str, value: torch.Tensor, batch: SegmentBatch, targets: TargetBatch):
    if not torch.isfinite(value):
        raise TrainingError(
            f"non-finite {name} ({value.item()}); source ids {batch.ids}, target ids {targets.ids}"
        )


def train_step(batch: SegmentBatch, targets: TargetBatch, bundle: ModelBundle, opt: Optimizers,
               weights: LossWeights) -> LossBreakdown:
    """One D update, one C update, then one G update on the same batch."""
    bundle.train()
    x, sx, cx = batch.mceps, batch.styles, batch.labels
    sy, cy = targets.styles, targets.labels

    fake = bundle.generate(x, sy, cy)

    opt.d.zero_grad(set_to_none=True)
    l_d = adv_loss_d(x, cx, fake, cy, bundle)
    _check_finite("L_D", l_d, batch, targets)
    l_d.backward()
    opt.d.step()

    opt.c.zero_grad(set_to_none=True)
    l_c = dom_loss_c(x, cx, bundle)
    _check_finite("L_C", l_c, batch, targets)
    l_c.backward()
    opt.c.step()

    opt.g.zero_grad(set_to_none=True)
    a = adv_loss_g(fake, cy, bundle)
    d = dom_loss_g(fake, cy, bundle)
    cyc = cycle_loss(x, sx, cx, sy, cy, bundle, fake=fake, mask=batch.mask)
    idt = identity_loss(x, sx, cx, bundle, mask=batch.mask)
    l_g = generator_objective(a, d, cyc, idt, weights)
    _check_finite("L_G", l_g, batch, targets)
    l_g.backward()
    opt.g.step()

    return LossBreakdown(l_d.item(), l_c.item(), a.item(), d.item(), cyc.item(), idt.item(), weights)


def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state()}


def _restore_rng(rng: np.random.Generator, state: dict):
    rng.bit_generator.state = state["numpy"]
    torch.set_rng_state(state["torch"])


def save_checkpoint(path, bundle: ModelBundle, opt: Optimizers | None, step: int, rng: np.random.Generator | None,
                    train_config: TrainConfig | None = None, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "gan_config": bundle.cfg.to_dict(),
        "train_config": asdict(train_config) if train_config else None,
        "state": bundle.state_dict(),
        "optimizers": opt.state_dict() if opt else None,
        "step": step,
        "rng": _rng_state(rng) if rng is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a generator checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_bundle(path) -> ModelBundle:
    payload = load_checkpoint(path)
    bundle = ModelBundle(GANConfig.from_dict(payload["gan_config"]))
    bundle.load_state_dict(payload["state"])
    bundle.eval()
    return bundle


def build_bundle(data: TrainingSet, gan_config: GANConfig | None, seed: int) -> ModelBundle:
    cfg = gan_config or GANConfig()
    if cfg.speakers and tuple(cfg.speakers) != data.speakers:
        raise ConfigurationError(f"config speakers {cfg.speakers} differ from data speakers {data.speakers}")
    cfg = GANConfig.from_dict({**cfg.to_dict(), "speakers": list(data.speakers)})
    torch.manual_seed(seed)
    bundle = ModelBundle(cfg)
    bundle.set_normalization(data.stats)
    return bundle


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[dict]
    step: int


def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            if rec["step"] <= upto:
                out.append(rec)
    return out


def train(
    data: TrainingSet,
    train_config: TrainConfig = TrainConfig(),
    gan_config: GANConfig | None = None,
    checkpoint_dir=None,
    log_path=None,
    resume: bool = False,
) -> TrainResult:
    """Run ``iterations`` update steps; checkpoints and the JSONL log are optional.

    With ``resume`` the latest checkpoint in ``checkpoint_dir`` restores
    parameters, optimizer moments, the step counter and both RNG streams,
    and the log is truncated back to that step, so an interrupted run
    continues along the same trajectory as an uninterrupted one.
    """
    cfg = train_config
    bundle = build_bundle(data, gan_config, cfg.seed)
    opt = make_optimizers(bundle, cfg)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    latest = ckpt_dir / "latest.pt" if ckpt_dir else None
    history: list[dict] = []
    log_path = Path(log_path) if log_path else None

    if resume:
        if latest is None or not latest.exists():
            raise CheckpointError(f"nothing to resume: {latest} does not exist")
        payload = load_checkpoint(latest)
        if GANConfig.from_dict(payload["gan_config"]) != bundle.cfg:
            raise CheckpointError("checkpoint architecture differs from the requested configuration")
        bundle.load_state_dict(payload["state"])
        opt.load_state_dict(payload["optimizers"])
        _restore_rng(rng, payload["rng"])
        step = int(payload["step"])
        log.info("resumed from %s at step %d", latest, step)
        if log_path:
            history = _read_log(log_path, step)
    if log_path:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("".join(json.dumps(r) + "\n" for r in history))

    weights = cfg.weights
    t0 = time.perf_counter()
    fh = open(log_path, "a") if log_path else None
    try:
        while step < cfg.iterations:
            batch, targets = data.sample(rng, cfg.batch_size, cfg.crop)
            losses = train_step(batch, targets, bundle, opt, weights)
            step += 1
            rec = {"step": step, **losses.record()}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d  L_D %.4f  L_C %.4f  L_G %.4f  (%.1fs)", step, rec["L_D"], rec["L_C"],
                         rec["L_G"], time.perf_counter() - t0)
            if ckpt_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                if fh:
                    fh.flush()
                save_checkpoint(latest, bundle, opt, step, rng, cfg)
    finally:
        if fh:
            fh.close()
    if ckpt_dir:
        save_checkpoint(latest, bundle, opt, step, rng, cfg)
        save_checkpoint(ckpt_dir / "final.pt", bundle, opt, step, rng, cfg)
    bundle.eval()
    return TrainResult(bundle, history, step)


def classifier_accuracy(bundle: ModelBundle, utterances: Sequence[Utterance], min_len: int = 16) -> float:
    """Fraction of utterances whose pooled classifier posterior peaks at the true speaker."""
    if not utterances:
        raise ValueError("no utterances to score")
    bundle.eval()
    hits = 0
    with torch.no_grad():
        for u in utterances:
            x = bundle.normalize(u.mceps, u.speaker).astype(np.float32)
            if x.shape[1] < min_len:
                x = np.pad(x, ((0, 0), (0, min_len - x.shape[1])), mode="edge")
            probs = bundle.classify(torch.from_numpy(x)[None])[0]
            hits += int(bundle.cfg.speakers[int(probs.argmax())] == u.speaker)
    return hits / len(utterances)


def loss_progress(history: Sequence[dict], window: int = 100, key: str = "L_G") -> tuple[float, float]:
    if len(history) < 2 * window:
        raise ValueError(f"need at least {2 * window} records, got {len(history)}")
    first = float(np.mean([r[key] for r in history[:window]]))
    last = float(np.mean([r[key] for r in history[-window:]]))
    return first, last
