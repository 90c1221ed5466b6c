import numpy as np
import pytest
import torch

from helpers import sampled_gradcheck
from jesvc.errors import CheckpointError, FeatureError, TrainingError
from jesvc.features import MelSpectrogram, delta
from jesvc.ser import (
    SERConfig,
    SERModel,
    SERTrainConfig,
    accuracy,
    extract_style,
    load_ser,
    load_style_cache,
    reference_style,
    save_ser,
    save_style_cache,
    ser_forward,
    train_ser,
)

EMOS = ("neutral", "happy", "sad")


def mel_from_static(static):
    return MelSpectrogram(np.stack([static, delta(static), delta(delta(static))]))


def signature_corpus(n_per=40, n_mels=40, seed=0):
    """Noise log-mels with an emotion-specific spectral bump and modulation rate."""
    rng = np.random.default_rng(seed)
    bins = np.arange(n_mels)
    out = []
    for k in range(len(EMOS)):
        bump = 2.0 * np.exp(-0.5 * ((bins - (8 + 12 * k)) / 3.0) ** 2)
        for _ in range(n_per):
            t = int(rng.integers(70, 110))
            mod = np.sin(2 * np.pi * (0.03 + 0.04 * k) * np.arange(t) + rng.uniform(0, 6))
            static = rng.standard_normal((n_mels, t)) * 0.6 + bump[:, None] * (1 + 0.3 * mod)
            out.append((mel_from_static(static), k))
    return out


@pytest.fixture(scope="module")
def corpus():
    return signature_corpus()


@pytest.fixture(scope="module")
def trained(corpus):
    return train_ser(corpus, SERConfig(emotions=EMOS), SERTrainConfig(steps=300, seed=0))


def test_corpus_is_linearly_separable(corpus):
    from sklearn.linear_model import LogisticRegression

    X = np.array([m.values[0].mean(axis=1) for m, _ in corpus])
    y = np.array([k for _, k in corpus])
    assert LogisticRegression(max_iter=2000).fit(X, y).score(X, y) == 1.0


def test_training_reaches_accuracy(trained, corpus):
    assert accuracy(trained.model, corpus) >= 0.95
    assert len(trained.history) == 300


def test_forward_contract(rng, torch_seed):
    model = SERModel(SERConfig(emotions=EMOS)).eval()
    for t in (3, 17, 200):
        style, probs = ser_forward(mel_from_static(rng.standard_normal((40, t))), model)
        assert style.shape == (64,) and np.all(np.isfinite(style))
        assert probs.shape == (3,) and abs(probs.sum() - 1) <= 1e-6
    mel = mel_from_static(rng.standard_normal((40, 50)))
    assert np.array_equal(extract_style(mel, model), extract_style(mel, model))


def test_too_short_input_names_minimum(torch_seed):
    model = SERModel()
    with pytest.raises(FeatureError, match="at least 3"):
        ser_forward(MelSpectrogram(np.zeros((3, 40, 2))), model)
    with pytest.raises(FeatureError):
        ser_forward(MelSpectrogram(np.zeros((3, 20, 30))), model)


def test_uniform_attention_oracle(rng, torch_seed):
    model = SERModel().eval()
    mel = torch.as_tensor(rng.standard_normal((1, 3, 40, 25)), dtype=torch.float32)
    with torch.no_grad():
        frames = model.encode_frames(mel)
        out = model(mel, weights=torch.full((1, 25), 1 / 25))
        manual = torch.nn.functional.leaky_relu(model.style_fc(frames[0].mean(0)), 0.01)
    assert torch.allclose(out.style[0], manual, atol=1e-6)


def test_waveform_input(rng, torch_seed):
    model = SERModel().eval()
    style = extract_style(0.1 * rng.standard_normal(8000), model)
    assert style.shape == (64,)


def test_single_class_rejected(corpus):
    with pytest.raises(TrainingError):
        train_ser([c for c in corpus if c[1] == 0][:5])


def test_zero_step_fine_tune_is_identity(trained, corpus):
    tuned = train_ser(corpus[:10] + corpus[-10:], train_config=SERTrainConfig(steps=0), init=trained.model).model
    for k, v in trained.model.state_dict().items():
        assert torch.equal(v, tuned.state_dict()[k])
    assert tuned is not trained.model


def test_shuffled_labels_stay_near_chance(corpus):
    rng = np.random.default_rng(3)
    labels = rng.permutation([k for _, k in corpus])
    shuffled = [(m, int(k)) for (m, _), k in zip(corpus, labels)]
    r = train_ser(shuffled, SERConfig(emotions=EMOS),
                  SERTrainConfig(steps=300, seed=0, val_fraction=0.25, eval_every=10, patience=3))
    assert accuracy(r.model, shuffled) <= 1 / 3 + 0.15


def test_reference_style_means(trained, corpus):
    model = trained.model
    mels = [m for m, _ in corpus[:30]]
    styles = [extract_style(m, model) for m in mels]
    assert np.array_equal(reference_style(mels[:1], model), styles[0])
    assert np.allclose(reference_style(mels[:2], model), (styles[0] + styles[1]) / 2)
    acc = np.zeros(64)
    for s in styles:
        acc += s
    assert np.allclose(reference_style(mels, model), acc / 30, atol=1e-6)
    a, b = mels[:7], mels[7:]
    union = (7 * reference_style(a, model) + 23 * reference_style(b, model)) / 30
    assert np.allclose(reference_style(a + b, model), union, atol=1e-6)
    with pytest.raises(ValueError):
        reference_style([], model)


def test_styles_cluster_by_emotion(trained, corpus):
    styles = np.array([extract_style(m, trained.model) for m, _ in corpus])
    y = np.array([k for _, k in corpus])
    d = np.linalg.norm(styles[:, None] - styles[None], axis=-1)
    iu = np.triu_indices(len(y), 1)
    same = (y[:, None] == y[None])[iu]
    assert d[iu][same].mean() < d[iu][~same].mean()


def test_checkpoint_round_trip(tmp_path, trained, corpus):
    save_ser(trained.model, tmp_path / "ser.pt")
    loaded = load_ser(tmp_path / "ser.pt")
    m = corpus[0][0]
    assert np.array_equal(extract_style(m, loaded), extract_style(m, trained.model))
    blob = torch.load(tmp_path / "ser.pt", weights_only=False)
    blob["config"]["lstm_hidden"] = 32
    torch.save(blob, tmp_path / "bad.pt")
    with pytest.raises(CheckpointError, match="hash"):
        load_ser(tmp_path / "bad.pt")
    (tmp_path / "junk.pt").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_ser(tmp_path / "junk.pt")


def test_style_cache_round_trip(tmp_path, rng):
    styles = {f"u{i}": rng.standard_normal(64) for i in range(5)}
    save_style_cache(tmp_path / "s.npz", styles, "abc")
    back, h = load_style_cache(tmp_path / "s.npz")
    assert h == "abc" and set(back) == set(styles)
    for k in styles:
        assert np.array_equal(back[k], styles[k].astype(np.float32))


def test_gradcheck_tiny_ser():
    torch.manual_seed(0)
    cfg = SERConfig(n_mels=8, emotions=EMOS, conv_channels=(2, 2), lstm_hidden=4, attention_dim=4,
                    style_dim=64, dropout=0.0)
    model = SERModel(cfg).double()
    x = torch.randn(2, 3, 8, 6, dtype=torch.float64)
    y = torch.tensor([0, 2])

    def loss():
        return torch.nn.functional.cross_entropy(model(x).logits, y)

    n, total, worst, fails = sampled_gradcheck(list(model.parameters()), loss)
    assert n >= 0.01 * total and not fails, fails[:3]
