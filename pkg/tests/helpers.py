"""Shared oracles for the test-suite."""
import math

import numpy as np
import torch

from jesvc.stargan import GANConfig

TINY_GAN = dict(
    enc_channels=(4, 6, 8, 6, 3),
    dec_channels=(4, 6, 4, 3),
    d_channels=(3, 3, 3, 3),
    c_channels=(2, 3, 4, 3),
    c_slice=4,
    style_dim=64,
)


def tiny_gan_config(n_speakers=3) -> GANConfig:
    return GANConfig(speakers=tuple(f"s{i}" for i in range(n_speakers)), **TINY_GAN)


def sampled_gradcheck(params, loss_fn, fraction=0.01, minimum=24, h=1e-6, seed=0):
    """Compare autograd with central differences on a random subset of entries.

    Returns (n_checked, n_total, worst relative error, list of failures);
    an entry passes when |a - n| <= 1e-3 * max(|a|, |n|, 1e-6).
    """
    params = [p for p in params if p.requires_grad]
    total = sum(p.numel() for p in params)
    n = max(minimum, math.ceil(fraction * total))
    rng = np.random.default_rng(seed)
    flat = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    picks = [flat[i] for i in rng.choice(len(flat), size=min(n, len(flat)), replace=False)]

    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {(pi, j): params[pi].grad.reshape(-1)[j].item() for pi, j in picks}

    failures, worst = [], 0.0
    with torch.no_grad():
        for pi, j in picks:
            view = params[pi].data.view(-1)
            orig = view[j].item()
            view[j] = orig + h
            up = loss_fn().item()
            view[j] = orig - h
            down = loss_fn().item()
            view[j] = orig
            num = (up - down) / (2 * h)
            a = analytic[(pi, j)]
            scale = max(abs(a), abs(num), 1e-6)
            rel = abs(a - num) / scale
            worst = max(worst, rel)
            if abs(a - num) > 1e-3 * scale:
                failures.append((pi, j, a, num))
    return len(picks), total, worst, failures


class StubBundle:
    """Generator adds ``delta``; D and C return fixed probabilities."""

    def __init__(self, delta=0.0, d_prob=0.5, n_speakers=4, c_probs=None):
        self.delta = delta
        self.d_prob = d_prob
        self.n_speakers = n_speakers
        self.c_probs = c_probs

    def generate(self, x, style, label):
        return x + self.delta

    def discriminate(self, x, label):
        p = self.d_prob(x) if callable(self.d_prob) else torch.full((x.shape[0],), float(self.d_prob), dtype=x.dtype)
        return p

    def classify(self, x):
        if self.c_probs is not None:
            return self.c_probs(x) if callable(self.c_probs) else self.c_probs
        return torch.full((x.shape[0], self.n_speakers), 1.0 / self.n_speakers, dtype=x.dtype)


def one_hot(idx, n, dtype=torch.float32):
    return torch.nn.functional.one_hot(torch.as_tensor(idx), n).to(dtype)


# acceptance-suite result lines, echoed in the terminal summary
ACCEPTANCE: list = []
