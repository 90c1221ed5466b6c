import copy
import json
import math

import numpy as np
import pytest
import torch

from helpers import StubBundle, one_hot, sampled_gradcheck, tiny_gan_config
from jesvc.errors import TrainingError
from jesvc.stargan import (
    ConditionMerge,
    GANConfig,
    LossWeights,
    ModelBundle,
    SegmentBatch,
    TargetBatch,
    TrainConfig,
    TrainingSet,
    Utterance,
    adv_loss_d,
    adv_loss_g,
    cycle_loss,
    dom_loss_c,
    dom_loss_g,
    identity_loss,
    product_pool_sigmoid,
    product_pool_softmax,
    total_losses,
    train,
    train_step,
)
from jesvc.stargan.losses import LOG_EPS, LossBreakdown
from jesvc.stargan.training import load_checkpoint, make_optimizers


def rand_batch(b=4, n=3, L=16, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, 36, L, generator=g, dtype=dtype)
    s = torch.randn(b, 64, generator=g, dtype=dtype)
    lab = one_hot(torch.randint(0, n, (b,), generator=g), n, dtype)
    ys = torch.randn(b, 64, generator=g, dtype=dtype)
    yl = one_hot(torch.randint(0, n, (b,), generator=g), n, dtype)
    return SegmentBatch(x, s, lab), TargetBatch(ys, yl)


# -- architecture -----------------------------------------------------------------


def test_reference_channels():
    b = ModelBundle(GANConfig(speakers=("a", "b", "c", "d")))
    assert [m.out_channels for m in b.generator.encoder] == [64, 128, 256, 128, 10]
    assert [m.out_channels for m in b.generator.decoder] == [64, 128, 64, 32]
    assert [m.out_channels for m in b.discriminator.blocks] + [b.discriminator.out.out_channels] == [32] * 4 + [1]
    assert [m.out_channels for m in b.classifier.blocks] == [8, 16, 32, 16]
    assert b.generator.out.out_channels == 36


@pytest.mark.parametrize("L", [4, 8, 64, 128, 132, 200])
def test_generator_preserves_shape(L):
    b = ModelBundle(GANConfig(speakers=("a", "b")))
    x = torch.randn(2, 36, L)
    assert b.generate(x, torch.randn(2, 64), one_hot([0, 1], 2)).shape == (2, 36, L)


def test_generator_rejects_bad_length():
    b = ModelBundle(tiny_gan_config())
    with pytest.raises(ValueError, match="multiple of 4"):
        b.generate(torch.randn(1, 36, 10), torch.randn(1, 64), one_hot([0], 3))


def test_condition_merge_contract(torch_seed):
    m = ConditionMerge(36, 64, 2, 36)
    x, lab = torch.randn(4, 36, 128), one_hot([0, 1, 0, 1], 2)
    s = torch.randn(4, 64)
    assert m(x, s, lab).shape == (4, 36, 128)
    s2 = s.clone()
    s2[1] += 1.0
    x2 = x.clone()
    x2[1] = x2[0]
    s3 = s2.clone()
    s3[1] = s3[0] + 1.0
    out = m(x2, s3, one_hot([0, 0, 0, 0], 2))
    assert not torch.allclose(out[0], out[1])
    torch.nn.init.zeros_(m.fc.weight)
    torch.nn.init.zeros_(m.fc.bias)
    assert torch.count_nonzero(m(x, s, lab)) == 0
    with pytest.raises(ValueError):
        m(x, s[:3], lab)


def test_per_item_independence(torch_seed):
    b = ModelBundle(tiny_gan_config()).eval()
    x, s = torch.randn(3, 36, 16), torch.randn(3, 64)
    base = b.generate(x, s, one_hot([0, 1, 2], 3))
    alt = b.generate(x, s, one_hot([0, 2, 2], 3))
    assert torch.equal(base[0], alt[0]) and torch.equal(base[2], alt[2])
    assert not torch.allclose(base[1], alt[1])


def test_discriminator_range_and_pooling(torch_seed):
    b = ModelBundle(tiny_gan_config())
    p = b.discriminate(torch.randn(5, 36, 32) * 10, one_hot([0, 1, 2, 0, 1], 3))
    assert torch.all((p > 0) & (p < 1))
    z = torch.tensor([[0.3]])
    assert product_pool_sigmoid(z).item() == pytest.approx(torch.sigmoid(z).item(), abs=1e-7)
    z = torch.tensor([[0.4, -1.2]], dtype=torch.float64)
    pp, qq = 1 / (1 + math.exp(-0.4)), 1 / (1 + math.exp(1.2))
    assert product_pool_sigmoid(z).item() == pytest.approx(math.sqrt(pp * qq), abs=1e-12)


def test_classifier_distribution(torch_seed):
    b = ModelBundle(tiny_gan_config(4))
    probs = b.classify(torch.randn(6, 36, 32))
    assert probs.shape == (6, 4)
    assert torch.allclose(probs.sum(1), torch.ones(6), atol=1e-6)
    one = ModelBundle(GANConfig(speakers=("solo",), **{k: v for k, v in tiny_gan_config().to_dict().items()
                                                       if k != "speakers"}))
    assert torch.all(one.classify(torch.randn(3, 36, 16)) == 1.0)
    # pooling oracle: softmax of the mean per-patch log-softmax
    z = torch.randn(2, 3, 5, dtype=torch.float64)
    manual = torch.exp(torch.log_softmax(z, 1).mean(-1))
    assert torch.allclose(product_pool_softmax(z), manual / manual.sum(1, keepdim=True))


# -- losses -----------------------------------------------------------------------


def test_adversarial_losses():
    batch, tg = rand_batch(n=4, dtype=torch.float64)
    assert adv_loss_d(batch.mceps, batch.labels, batch.mceps, tg.labels, StubBundle()).item() == pytest.approx(
        2 * math.log(2), abs=1e-12)
    perfect = StubBundle(d_prob=lambda x: (x[:, 0, 0] > -1e9).to(x.dtype) * (1.0 if x is batch.mceps else 0.0))
    fake = batch.mceps + 1
    val = adv_loss_d(batch.mceps, batch.labels, fake, tg.labels, perfect).item()
    assert val == pytest.approx(-2 * math.log(1 - LOG_EPS), rel=1e-6)
    assert adv_loss_g(fake, tg.labels, StubBundle()).item() == pytest.approx(math.log(2), abs=1e-12)
    assert adv_loss_g(fake, tg.labels, StubBundle(d_prob=1.0)).item() == pytest.approx(0.0, abs=1e-6)
    assert adv_loss_g(fake, tg.labels, StubBundle(d_prob=0.9)).item() < adv_loss_g(
        fake, tg.labels, StubBundle(d_prob=0.1)).item()


def test_losses_permutation_invariant(torch_seed):
    b = ModelBundle(tiny_gan_config()).eval()
    batch, tg = rand_batch()
    perm = torch.tensor([2, 0, 3, 1])
    fake = torch.randn(4, 36, 16)
    a = adv_loss_d(batch.mceps, batch.labels, fake, tg.labels, b)
    c = adv_loss_d(batch.mceps[perm], batch.labels[perm], fake[perm], tg.labels[perm], b)
    assert a.item() == pytest.approx(c.item(), rel=1e-6)
    assert dom_loss_c(batch.mceps, batch.labels, b).item() == pytest.approx(
        dom_loss_c(batch.mceps[perm], batch.labels[perm], b).item(), rel=1e-6)


def test_domain_losses():
    batch, tg = rand_batch(n=4, dtype=torch.float64)
    assert dom_loss_c(batch.mceps, batch.labels, StubBundle(n_speakers=4)).item() == pytest.approx(
        math.log(4), abs=1e-12)
    assert dom_loss_g(batch.mceps, tg.labels, StubBundle(n_speakers=4)).item() == pytest.approx(
        math.log(4), abs=1e-12)
    perfect = StubBundle(c_probs=lambda x: batch.labels)
    assert dom_loss_c(batch.mceps, batch.labels, perfect).item() == pytest.approx(0.0, abs=1e-6)
    b = ModelBundle(tiny_gan_config(4)).eval()
    fake = torch.randn(4, 36, 16)
    assert dom_loss_g(fake, tg.labels.float(), b).item() == pytest.approx(
        dom_loss_c(fake, tg.labels.float(), b).item(), abs=1e-7)


def test_cycle_and_identity_with_stubs():
    batch, tg = rand_batch(dtype=torch.float64)
    args = (batch.mceps, batch.styles, batch.labels, tg.styles, tg.labels)
    assert cycle_loss(*args, StubBundle(0.0)).item() == 0.0
    assert cycle_loss(*args, StubBundle(0.25)).item() == pytest.approx(0.5, abs=1e-12)
    assert identity_loss(batch.mceps, batch.styles, batch.labels, StubBundle(0.0)).item() == 0.0
    assert identity_loss(batch.mceps, batch.styles, batch.labels, StubBundle(-0.3)).item() == pytest.approx(
        0.3, abs=1e-12)
    mask = torch.ones(4, 16)
    mask[:, 10:] = 0
    assert identity_loss(batch.mceps, batch.styles, batch.labels, StubBundle(0.3), mask).item() == pytest.approx(
        0.3, abs=1e-12)


def test_cycle_uses_source_style():
    seen = []

    class Recorder(StubBundle):
        def generate(self, x, style, label):
            seen.append((style, label))
            return x

    batch, tg = rand_batch()
    cycle_loss(batch.mceps, batch.styles, batch.labels, tg.styles, tg.labels, Recorder())
    assert seen[0][0] is tg.styles and seen[1][0] is batch.styles and seen[1][1] is batch.labels


def test_gradient_isolation(torch_seed):
    b = ModelBundle(tiny_gan_config())
    batch, tg = rand_batch()
    fake = b.generate(batch.mceps, tg.styles, tg.labels)
    dom_loss_g(fake, tg.labels, b).backward()
    assert all(p.grad is None for p in b.classifier.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in b.generator.parameters())
    b.zero_grad(set_to_none=True)
    fake = b.generate(batch.mceps, tg.styles, tg.labels)
    adv_loss_d(batch.mceps, batch.labels, fake, tg.labels, b).backward()
    assert all(p.grad is None for p in b.generator.parameters())
    b.zero_grad(set_to_none=True)
    fake = b.generate(batch.mceps, tg.styles, tg.labels)
    adv_loss_g(fake, tg.labels, b).backward()
    assert all(p.grad is None for p in b.discriminator.parameters())
    assert all(p.requires_grad for p in b.parameters())


def test_losses_finite_nonnegative(torch_seed):
    b = ModelBundle(tiny_gan_config())
    for scale in (1e-3, 1.0, 1e3):
        batch, tg = rand_batch(seed=int(scale * 10))
        batch.mceps *= scale
        r = total_losses(batch, tg, b).record()
        assert all(np.isfinite(v) and v >= 0 for v in r.values())


def test_total_losses_composition(torch_seed):
    b = ModelBundle(tiny_gan_config())
    batch, tg = rand_batch()
    r = total_losses(batch, tg, b, LossWeights(0, 0, 0))
    assert r.L_G == r.adv_g
    r = total_losses(batch, tg, b, LossWeights())
    assert r.L_G == pytest.approx(r.adv_g + 2 * r.dom_g + 10 * r.cyc + 5 * r.id, abs=1e-6)
    br = LossBreakdown(0.1, 0.2, 1.0, 2.0, 3.0, 4.0, LossWeights())
    assert br.L_G == pytest.approx(1 + 2 * 2 + 10 * 3 + 5 * 4)
    # linear in each weight
    for k in ("lambda_dom", "lambda_cyc", "lambda_id"):
        vals = [LossBreakdown(0.1, 0.2, 1.0, 2.0, 3.0, 4.0, LossWeights(**{k: w})).L_G for w in (0.0, 1.0, 2.0)]
        assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0])


def test_total_losses_match_independent_recomputation(torch_seed):
    b = ModelBundle(tiny_gan_config()).eval()
    batch, tg = rand_batch()
    r = total_losses(batch, tg, b)
    with torch.no_grad():
        fake = b.generator(batch.mceps, tg.styles, tg.labels)
        d_real = b.discriminator(batch.mceps, batch.labels).clamp(LOG_EPS, 1 - LOG_EPS)
        d_fake = b.discriminator(fake, tg.labels).clamp(LOG_EPS, 1 - LOG_EPS)
        adv_d = -(torch.log(d_real).mean() + torch.log(1 - d_fake).mean())
        adv_g = -torch.log(d_fake).mean()
        pc = (b.classifier(fake) * tg.labels).sum(1).clamp(LOG_EPS, 1 - LOG_EPS)
        dom_g = -torch.log(pc).mean()
        back = b.generator(fake, batch.styles, batch.labels)
        cyc = (back - batch.mceps).abs().mean()
        idt = (b.generator(batch.mceps, batch.styles, batch.labels) - batch.mceps).abs().mean()
    for got, want in ((r.adv_d, adv_d), (r.adv_g, adv_g), (r.dom_g, dom_g), (r.cyc, cyc), (r.id, idt)):
        assert got == pytest.approx(want.item(), rel=1e-5)


# -- gradient checks (float64) -------------------------------------------------------


def test_gradcheck_generator_discriminator_classifier():
    torch.manual_seed(0)
    b = ModelBundle(tiny_gan_config()).double()
    batch, tg = rand_batch(b=3, L=8, dtype=torch.float64)
    r = torch.randn(3, 36, 8, dtype=torch.float64)
    checks = {
        "G": (b.generator.parameters(), lambda: (b.generate(batch.mceps, tg.styles, tg.labels) * r).sum()),
        "D": (b.discriminator.parameters(),
              lambda: adv_loss_d(batch.mceps, batch.labels, batch.mceps.flip(0) * 0.5, tg.labels, b)),
        "C": (b.classifier.parameters(), lambda: dom_loss_c(batch.mceps, batch.labels, b)),
    }
    for name, (params, fn) in checks.items():
        n, total, worst, fails = sampled_gradcheck(list(params), fn)
        assert n >= 0.01 * total
        assert not fails, f"{name}: {fails[:3]}"


# -- training -----------------------------------------------------------------------


def random_training_set(n_spk=2, emotions=("neutral", "happy"), per_cell=3, seed=0):
    rng = np.random.default_rng(seed)
    utts = []
    for s in range(n_spk):
        for e in emotions:
            for j in range(per_cell):
                t = int(rng.integers(20, 60))
                mc = rng.standard_normal((36, t)) + s
                utts.append(Utterance(f"s{s}_{e}_{j}", f"s{s}", e, mc, rng.standard_normal(64).astype(np.float32)))
    return TrainingSet(utts)


def test_train_step_updates_all_nets():
    data = random_training_set()
    torch.manual_seed(0)
    cfg = GANConfig.from_dict({**tiny_gan_config().to_dict(), "speakers": list(data.speakers)})
    b = ModelBundle(cfg)
    before = copy.deepcopy(b.state_dict())
    opt = make_optimizers(b, TrainConfig())
    batch, tg = data.sample(np.random.default_rng(0), 4, 32)
    rec = train_step(batch, tg, b, opt, LossWeights())
    assert all(np.isfinite(v) for v in rec.record().values())
    for net in ("generator", "discriminator", "classifier"):
        assert any(not torch.equal(v, before[k]) for k, v in b.state_dict().items() if k.startswith(net))


def test_target_sampling_avoids_source_cell():
    data = random_training_set(n_spk=3)
    rng = np.random.default_rng(0)
    for _ in range(20):
        batch, tg = data.sample(rng, 4, 16)
        for src, tgt in zip(batch.ids, tg.ids):
            assert src.rsplit("_", 1)[0] != tgt.rsplit("_", 1)[0]


def test_short_utterances_are_padded_and_masked():
    data = random_training_set()
    batch, _ = data.sample(np.random.default_rng(0), 4, 128)
    assert batch.mceps.shape == (4, 36, 128)
    assert batch.mask is not None and batch.mask.sum() < 4 * 128


def test_non_finite_loss_aborts_with_ids():
    data = random_training_set()
    b = ModelBundle(GANConfig.from_dict({**tiny_gan_config().to_dict(), "speakers": list(data.speakers)}))
    opt = make_optimizers(b, TrainConfig())
    batch, tg = data.sample(np.random.default_rng(0), 2, 16)
    batch.mceps[0, 0, 0] = float("nan")
    with pytest.raises(TrainingError) as exc:
        train_step(batch, tg, b, opt, LossWeights())
    assert batch.ids[0] in str(exc.value)


def tiny_train(tmp_path, iterations, resume=False, name="run"):
    data = random_training_set()
    cfg = TrainConfig(iterations=iterations, crop=16, checkpoint_every=3, log_every=0, seed=5)
    return train(data, cfg, tiny_gan_config(2), checkpoint_dir=tmp_path / name, log_path=tmp_path / name / "log.jsonl",
                 resume=resume)


def test_training_determinism_and_resume(tmp_path):
    a = tiny_train(tmp_path, 8, name="a")
    b = tiny_train(tmp_path, 8, name="b")
    assert (tmp_path / "a" / "log.jsonl").read_bytes() == (tmp_path / "b" / "log.jsonl").read_bytes()
    # interrupted at 6 (last checkpoint), continued to 8
    tiny_train(tmp_path, 6, name="c")
    c = tiny_train(tmp_path, 8, resume=True, name="c")
    assert (tmp_path / "c" / "log.jsonl").read_bytes() == (tmp_path / "a" / "log.jsonl").read_bytes()
    for k, v in a.bundle.state_dict().items():
        assert torch.equal(v, c.bundle.state_dict()[k]), k
    assert [r["step"] for r in map(json.loads, (tmp_path / "a" / "log.jsonl").read_text().splitlines())] == list(
        range(1, 9))


def test_zero_iterations_returns_initial_bundle(tmp_path):
    r = tiny_train(tmp_path, 0)
    assert r.step == 0 and r.history == []
    torch.manual_seed(5)
    ref = ModelBundle(r.bundle.cfg)
    init = {k: v for k, v in r.bundle.state_dict().items() if not k.startswith("norm_")}
    for k, v in init.items():
        assert torch.equal(v, ref.state_dict()[k]), k
    payload = load_checkpoint(tmp_path / "run" / "final.pt")
    assert payload["step"] == 0 and payload["gan_config"]["speakers"] == ["s0", "s1"]


def test_training_needs_two_speakers():
    with pytest.raises(TrainingError):
        random_training_set(n_spk=1)
