"""Adversarial, domain-classification, cycle and identity losses.

Every function takes a ``bundle`` exposing ``generate(x, style, label)``,
``discriminate(x, label)`` -> [B] probabilities and ``classify(x)`` ->
[B x N] probabilities, so tests can substitute simple stubs.
Expectations are minibatch means; logs are clamped to [eps, 1 - eps].
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass

import torch

from .networks import LOG_EPS

REFERENCE_WEIGHTS = (2.0, 10.0, 5.0)


@dataclass(frozen=True)
class LossWeights:
    lambda_dom: float = REFERENCE_WEIGHTS[0]
    lambda_cyc: float = REFERENCE_WEIGHTS[1]
    lambda_id: float = REFERENCE_WEIGHTS[2]

    def __post_init__(self):
        if min(self.lambda_dom, self.lambda_cyc, self.lambda_id) < 0:
            raise ValueError("loss weights must be non-negative")


def safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(LOG_EPS, 1.0 - LOG_EPS))


@contextmanager
def frozen(module):
    """Temporarily stop gradients from reaching ``module``'s parameters."""
    params = [p for p in module.parameters()] if isinstance(module, torch.nn.Module) else []
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad_(flag)


def masked_l1(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute difference; ``mask`` is [B x L] with 1 on valid frames."""
    diff = (a - b).abs()
    if mask is None:
        return diff.mean()
    m = mask.to(diff.dtype).unsqueeze(1).expand_as(diff)
    return (diff * m).sum() / m.sum().clamp_min(1.0)


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of -log p(true class) for one-hot ``labels``."""
    return -safe_log((probs * labels.to(probs.dtype)).sum(dim=1)).mean()


def adv_loss_d(real_x, real_labels, fake, fake_labels, bundle) -> torch.Tensor:
    real_term = -safe_log(bundle.discriminate(real_x, real_labels)).mean()
    fake_term = -safe_log(1.0 - bundle.discriminate(fake.detach(), fake_labels)).mean()
    return real_term + fake_term


def adv_loss_g(fake, fake_labels, bundle) -> torch.Tensor:
    with frozen(getattr(bundle, "discriminator", None)):
        return -safe_log(bundle.discriminate(fake, fake_labels)).mean()


def dom_loss_c(real_x, real_labels, bundle) -> torch.Tensor:
    return cross_entropy(bundle.classify(real_x), real_labels)


def dom_loss_g(fake, target_labels, bundle) -> torch.Tensor:
    with frozen(getattr(bundle, "classifier", None)):
        return cross_entropy(bundle.classify(fake), target_labels)


def cycle_loss(x, style_x, label_x, style_y, label_y, bundle, fake=None, mask=None) -> torch.Tensor:
    # the back-translation is conditioned on the source style, not the target's
    if fake is None:
        fake = bundle.generate(x, style_y, label_y)
    return masked_l1(bundle.generate(fake, style_x, label_x), x, mask)


def identity_loss(x, style_x, label_x, bundle, mask=None) -> torch.Tensor:
    return masked_l1(bundle.generate(x, style_x, label_x), x, mask)


@dataclass
class LossBreakdown:
    adv_d: float
    dom_c: float
    adv_g: float
    dom_g: float
    cyc: float
    id: float
    weights: LossWeights

    @property
    def L_D(self) -> float:
        return self.adv_d

    @property
    def L_C(self) -> float:
        return self.dom_c

    @property
    def L_G(self) -> float:
        w = self.weights
        return self.adv_g + w.lambda_dom * self.dom_g + w.lambda_cyc * self.cyc + w.lambda_id * self.id

    def record(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "weights"}
        return {"L_D": self.L_D, "L_C": self.L_C, "L_G": self.L_G, **d}


def generator_objective(adv_g, dom_g, cyc, idt, weights: LossWeights):
    return adv_g + weights.lambda_dom * dom_g + weights.lambda_cyc * cyc + weights.lambda_id * idt


def total_losses(batch, targets, bundle, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """All six terms on one batch with one generated sample (no parameter updates)."""
    with torch.no_grad():
        fake = bundle.generate(batch.mceps, targets.styles, targets.labels)
        terms = dict(
            adv_d=adv_loss_d(batch.mceps, batch.labels, fake, targets.labels, bundle),
            dom_c=dom_loss_c(batch.mceps, batch.labels, bundle),
            adv_g=adv_loss_g(fake, targets.labels, bundle),
            dom_g=dom_loss_g(fake, targets.labels, bundle),
            cyc=cycle_loss(batch.mceps, batch.styles, batch.labels, targets.styles, targets.labels, bundle,
                           fake=fake, mask=batch.mask),
            id=identity_loss(batch.mceps, batch.styles, batch.labels, bundle, mask=batch.mask),
        )
    return LossBreakdown(**{k: float(v) for k, v in terms.items()}, weights=weights)
