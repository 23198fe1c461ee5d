import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from taggants.audio_dsp import AudioClip, MelMatrix, SpectroConfig
from taggants.model import (
    CheckpointMismatchError,
    TopKOracle,
    TrainConfig,
    TrainingError,
    init_model,
    load_checkpoint,
    logits,
    loss_value,
    mixup_batch,
    per_sample_gradient,
    predict_topk,
    save_checkpoint,
    set_flat,
    spec_masks,
    topk_from_logits,
    train,
    waveform_gradient,
)

from conftest import small_descriptor

QUICK = TrainConfig(epochs=2, batch_size=16, lr=3e-3)


def central_difference(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)


def rel_err(a, b):
    den = max(abs(a), abs(b))
    return 0.0 if den == 0 else abs(a - b) / den


# ---------------------------------------------------------------- config and training


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(mixup_alpha=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_param_count_in_desk_range():
    from taggants.model import default_descriptor

    n = init_model(default_descriptor(10), 0).n_params
    assert 100_000 <= n <= 500_000


def test_zero_epochs_returns_init(tiny_ds):
    desc = small_descriptor()
    res = train(tiny_ds, TrainConfig(epochs=0, seed=5), desc)
    assert np.array_equal(res.params.flat(), init_model(desc, 5).flat())


def test_training_deterministic(tiny_ds):
    desc = small_descriptor()
    a = train(tiny_ds, QUICK, desc)
    b = train(tiny_ds, QUICK, desc)
    assert abs(a.val_accuracy - b.val_accuracy) <= 0.005
    assert np.array_equal(a.params.flat(), b.params.flat())


def test_training_divergence_raises(tiny_ds, monkeypatch):
    from taggants import model as model_mod

    real = model_mod.SpectroCNN.classify
    monkeypatch.setattr(model_mod.SpectroCNN, "classify", lambda self, f: real(self, f) * float("nan"))
    with pytest.raises(TrainingError):
        train(tiny_ds, QUICK, small_descriptor())


def test_augmentations_do_not_touch_eval(tiny_ds):
    desc = small_descriptor()
    clips = [it.clip for it in tiny_ds.validation]
    outs = []
    for cfg in (
        TrainConfig(epochs=0, mixup_alpha=0.0, time_mask=0, freq_mask=0, seed=2),
        TrainConfig(epochs=0, mixup_alpha=1.0, time_mask=10, freq_mask=10, seed=2),
    ):
        params = train(tiny_ds, cfg, desc).params
        outs.append(logits(params, clips))
        outs.append(logits(params, clips))
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])


# ---------------------------------------------------------------- augmentations


def test_mixup_lambda_one_is_identity(rng):
    x = torch.rand(6, 100) * 2 - 1
    y = torch.eye(4)[torch.tensor([0, 1, 2, 3, 0, 1])]
    xm, ym, lam, _ = mixup_batch(x, y, 0.4, rng, lam=1.0)
    assert lam == 1.0 and torch.equal(xm, x) and torch.equal(ym, y)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 5.0), st.integers(0, 10_000), st.integers(2, 12))
def test_mixup_convexity(alpha, seed, n):
    r = np.random.default_rng(seed)
    x = torch.as_tensor(r.uniform(-1, 1, (n, 50)))
    y = torch.eye(5, dtype=torch.float64)[torch.as_tensor(r.integers(0, 5, n))]
    xm, ym, lam, perm = mixup_batch(x, y, alpha, r)
    assert 0 <= lam <= 1
    assert torch.allclose(ym.sum(1), torch.ones(n, dtype=torch.float64))
    assert xm.abs().max() <= 1.0
    assert torch.allclose(xm, lam * x + (1 - lam) * x[perm])


def test_mixup_needs_two(rng):
    with pytest.raises(ValueError):
        mixup_batch(torch.zeros(1, 10), torch.zeros(1, 3), 0.2, rng)


def test_spec_masks_zero_width_unchanged(rng):
    m = MelMatrix(rng.uniform(0.1, 1, (32, 20)), SpectroConfig(n_mels=32))
    out = spec_masks(m, 0, 0, rng)
    assert isinstance(out, MelMatrix) and np.array_equal(out.values, m.values)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 20), st.integers(0, 32), st.integers(0, 10_000))
def test_spec_masks_counts(t, f, seed):
    r = np.random.default_rng(seed)
    vals = r.uniform(0.1, 1, (32, 20))
    out = spec_masks(vals, t, f, r)
    masked = out == 0
    assert masked.sum() == t * 32 + f * 20 - t * f
    assert np.array_equal(out[~masked], vals[~masked])
    cols = np.flatnonzero(masked.all(axis=0)) if t else []
    rows = np.flatnonzero(masked.all(axis=1)) if f else []
    if t and t < 20:
        assert len(cols) >= t and np.all(np.diff(cols[:t]) == 1)
    if f and f < 32:
        assert len(rows) >= f


def test_spec_masks_rejects_wide(rng):
    with pytest.raises(ValueError):
        spec_masks(np.ones((4, 4)), 5, 0, rng)


# ---------------------------------------------------------------- gradients


def test_gradient_length_and_determinism(tiny_model, tiny_ds):
    it = tiny_ds.train[0]
    g1 = per_sample_gradient(tiny_model, it.clip, it.label)
    g2 = per_sample_gradient(tiny_model, it.clip, it.label)
    assert g1.shape == (tiny_model.n_params,)
    assert np.array_equal(g1, g2)


def test_parameter_gradient_finite_differences(tiny_ds):
    for seed in range(3):
        params = init_model(small_descriptor(), seed).to(torch.float64)
        it = tiny_ds.train[seed]
        g = per_sample_gradient(params, it.clip, it.label)
        base = params.flat().copy()

        def f(v, i):
            w = base.copy()
            w[i] = v
            set_flat(params, w)
            return loss_value(params, it.clip, it.label)

        for i in np.random.default_rng(seed).choice(len(base), 20, replace=False):
            fd = central_difference(lambda v: f(v, i), base[i], 1e-6)
            assert rel_err(fd, g[i]) <= 1e-4
        set_flat(params, base)


def test_waveform_gradient_finite_differences(tiny_ds):
    params = init_model(small_descriptor(), 1).to(torch.float64)
    it = tiny_ds.train[2]
    x = it.clip.samples.astype(np.float64)
    g = waveform_gradient(params, AudioClip(x, 16000), it.label)
    for i in np.random.default_rng(0).choice(len(x), 20, replace=False):

        def f(v):
            y = x.copy()
            y[i] = v
            return loss_value(params, y, it.label)

        fd = central_difference(f, x[i], 1e-8)
        assert rel_err(fd, g[i]) <= 1e-4


# ---------------------------------------------------------------- top-k


def test_topk_full_is_permutation(tiny_model, tiny_ds):
    out = predict_topk(tiny_model, tiny_ds.train[0].clip, 10)
    assert sorted(out) == list(range(10))


def test_topk_ties_go_low():
    assert topk_from_logits(np.zeros(7), 3) == [0, 1, 2]
    assert topk_from_logits(np.array([1.0, 3.0, 3.0, 0.0]), 3) == [1, 2, 0]


def test_topk_equal_logits_model(tiny_model, tiny_ds):
    with torch.no_grad():
        tiny_model.module.head.weight.zero_()
        tiny_model.module.head.bias.zero_()
    assert predict_topk(tiny_model, tiny_ds.train[0].clip, 4) == [0, 1, 2, 3]


def test_topk_rejects_bad_k():
    with pytest.raises(ValueError):
        topk_from_logits(np.zeros(5), 6)
    with pytest.raises(ValueError):
        topk_from_logits(np.zeros(5), 0)


def test_oracle_batch_matches_single(tiny_model, tiny_ds):
    oracle = TopKOracle(tiny_model)
    clips = [it.clip for it in tiny_ds.validation[:5]]
    assert oracle.batch(clips, 3) == [oracle(c, 3) for c in clips]


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path, tiny_model, tiny_ds):
    save_checkpoint(tiny_model, tmp_path / "m.pt")
    back = load_checkpoint(tmp_path / "m.pt", expected=tiny_model.descriptor)
    assert np.array_equal(back.flat(), tiny_model.flat())
    clip = tiny_ds.train[0].clip
    assert predict_topk(back, clip, 5) == predict_topk(tiny_model, clip, 5)


def test_checkpoint_mismatch(tmp_path, tiny_model):
    save_checkpoint(tiny_model, tmp_path / "m.pt")
    other = dict(tiny_model.descriptor, channels=[8, 8, 8, 8])
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "m.pt", expected=other)
    torch.save({"format": "something-else"}, tmp_path / "bad.pt")
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "bad.pt")
