"""Statistical properties that only make sense on the full desk corpus."""

import numpy as np
import torch

from taggants.model import logits

# benign validation accuracy measured once on the reference run
DESK_BASELINE = 1.0


def _embeddings(params, clips):
    x = torch.as_tensor(np.stack([c.samples for c in clips]), dtype=params.dtype)
    with torch.no_grad():
        e = params.module.embed(params.module.features(x))
    e = e.numpy().astype(np.float64)
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def test_keys_are_out_of_distribution(desk_run):
    rng = np.random.default_rng(0)
    train = desk_run.ds.train
    picks = [train[i].clip for i in rng.choice(len(train), 100, replace=False)]
    others = [train[i].clip for i in rng.choice(len(train), 100, replace=False)]
    keys = _embeddings(desk_run.surrogate, desk_run.keys.clips)
    a = _embeddings(desk_run.surrogate, picks)
    b = _embeddings(desk_run.surrogate, others)
    key_to_train = float(np.mean(keys @ a.T))
    train_to_train = float(np.mean(np.sum(a * b, axis=1)))
    assert key_to_train < train_to_train


def test_desk_models_learn_the_task(desk_run):
    for _, val in desk_run.benign:
        assert val >= max(0.80, DESK_BASELINE - 0.03)


def test_confident_clip_top1_is_its_label(desk_run):
    val = desk_run.ds.validation[:200]
    z = logits(desk_run.surrogate, [it.clip for it in val])
    z = z - z.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    confident = int(np.argmax(prob.max(axis=1)))
    assert prob[confident].max() > 0.9
    assert int(np.argmax(z[confident])) == val[confident].label


def test_protected_copy_is_clean_label(desk_run):
    clean = desk_run.ds.index()
    for item in desk_run.exported.items:
        assert item.label == clean[item.id].label and item.split == clean[item.id].split
    assert len(desk_run.exported) == len(desk_run.ds)
