import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taggants.audio_dsp import AudioClip, write_wav
from taggants.dataset import (
    IngestError,
    PerturbationSet,
    UnsatisfiablePlanError,
    apply_perturbations,
    clip_hash,
    export_protected,
    from_arrays,
    ingest,
    load_perturbations,
    poison_budget,
    save_perturbations,
    select_poison_set,
)


def make_ds(n_train=100, n_val=10, C=5, length=800, seed=0):
    rng = np.random.default_rng(seed)
    n = n_train + n_val
    x = rng.uniform(-0.5, 0.5, (n, length)).astype(np.float32)
    labels = np.arange(n) % C
    splits = ["train"] * n_train + ["validation"] * n_val
    return from_arrays(list(x), labels, splits, C)


def write_manifest(tmp_path, rows, num_classes=3):
    audio = tmp_path / "audio"
    audio.mkdir(exist_ok=True)
    with (tmp_path / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "path", "label", "split"])
        for i, (label, split) in enumerate(rows):
            write_wav(audio / f"c{i}.wav", AudioClip(np.full(1600, 0.1 * (i % 5)), 16000))
            w.writerow([f"c{i:03d}", f"audio/c{i}.wav", label, split])
    (tmp_path / "dataset.json").write_text(
        '{"num_classes": %d, "sample_rate": 16000, "duration": 0.1}' % num_classes
    )
    return tmp_path / "manifest.csv"


# ---------------------------------------------------------------- ingest


def test_ingest_valid_rows(tmp_path):
    rows = [(i % 3, "train" if i < 8 else "validation") for i in range(10)]
    ds = ingest(write_manifest(tmp_path, rows))
    assert len(ds) == 10 and ds.num_classes == 3
    assert [it.id for it in ds.items] == sorted(it.id for it in ds.items)


def test_ingest_bad_label_names_row(tmp_path):
    rows = [(i % 3, "train" if i < 8 else "validation") for i in range(10)]
    rows[4] = (3, "train")
    with pytest.raises(IngestError) as err:
        ingest(write_manifest(tmp_path, rows))
    assert "c004" in str(err.value) and "row 6" in str(err.value)


def test_ingest_tolerates_rare_failures(tmp_path, caplog):
    rows = [(i % 3, "train" if i < 150 else "validation") for i in range(200)]
    rows[10] = (7, "train")
    ds = ingest(write_manifest(tmp_path, rows))
    assert len(ds) == 199
    assert "c010" in caplog.text


def test_reingest_deterministic(tmp_path):
    rows = [(i % 3, "train" if i < 8 else "validation") for i in range(10)]
    m = write_manifest(tmp_path, rows)
    a, b = ingest(m), ingest(m)
    assert [it.id for it in a.items] == [it.id for it in b.items]
    assert [clip_hash(it.clip) for it in a.items] == [clip_hash(it.clip) for it in b.items]


def test_dataset_invariants():
    with pytest.raises(ValueError):
        from_arrays([np.zeros(10)] * 2, [0, 5], ["train", "validation"], 3)
    with pytest.raises(ValueError):
        from_arrays([np.zeros(10)] * 2, [0, 1], ["train", "train"], 3)


# ---------------------------------------------------------------- plans


def test_budget_rounding():
    assert poison_budget(0.01, 1000) == 10
    assert poison_budget(0.01, 5000) == 50
    assert poison_budget(0.005, 100) == 1  # half rounds up


def test_plan_size_thousand():
    ds = make_ds(n_train=1000, C=5)
    plan = select_poison_set(ds, [0, 1, 2], 0.01, seed=0)
    assert len(plan) == 10


def test_shared_label_split_evenly():
    ds = make_ds(n_train=1000, C=5)
    plan = select_poison_set(ds, [2, 2], 0.01, seed=3)
    assert sorted(len(v) for v in plan.partition.values()) == [5, 5]


_PLAN_DS = make_ds(n_train=300, C=5)


@pytest.mark.filterwarnings("ignore:poison budget")
@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(0, 4), min_size=1, max_size=10),
    st.sampled_from([0.01, 0.05, 0.1, 0.2]),
    st.integers(0, 10_000),
)
def test_plan_properties(key_labels, eps, seed):
    ds = _PLAN_DS
    plan = select_poison_set(ds, key_labels, eps, seed)
    index = ds.index()
    all_ids = [i for ids in plan.partition.values() for i in ids]
    assert len(all_ids) == len(set(all_ids)) == poison_budget(eps, len(ds.train))
    for key, ids in plan.partition.items():
        assert all(index[i].label == key_labels[key] and index[i].split == "train" for i in ids)
    again = select_poison_set(ds, key_labels, eps, seed)
    assert again.partition == plan.partition


def test_plan_unsatisfiable():
    ds = make_ds(n_train=100, C=5)
    with pytest.raises(UnsatisfiablePlanError):
        select_poison_set(ds, [0], 0.5, seed=0)  # 50 needed, 20 available
    ds2 = from_arrays([np.zeros(10)] * 3, [0, 0, 1], ["train", "train", "validation"], 3)
    with pytest.raises(UnsatisfiablePlanError):
        select_poison_set(ds2, [2], 0.3, seed=0)


def test_plan_serialization_roundtrip():
    from taggants.dataset import PoisonPlan

    plan = select_poison_set(make_ds(), [0, 1], 0.1, seed=1)
    assert PoisonPlan.from_dict(plan.to_dict()) == plan


# ---------------------------------------------------------------- perturbations


def test_apply_empty_is_identity():
    ds = make_ds()
    out = apply_perturbations(ds, PerturbationSet({}, 0.05))
    for a, b in zip(ds.items, out.items):
        assert np.array_equal(a.clip.samples, b.clip.samples) and a.label == b.label


def test_apply_clamps_at_one():
    ds = from_arrays([np.full(10, 0.98), np.zeros(10)], [0, 1], ["train", "validation"], 2)
    out = apply_perturbations(ds, PerturbationSet({"clip_00000": np.full(10, 0.05)}, 0.05))
    assert np.all(out.index()["clip_00000"].clip.samples == 1.0)
    assert out.index()["clip_00000"].label == 0


def test_apply_rejects_orphans_and_bound():
    ds = make_ds()
    with pytest.raises(KeyError):
        apply_perturbations(ds, PerturbationSet({"nope": np.zeros(800)}, 0.05))
    with pytest.raises(ValueError):
        PerturbationSet({"clip_00000": np.full(800, 0.06)}, 0.05)


def test_export_ingest_roundtrip(tmp_path):
    ds = make_ds(n_train=40, n_val=5, length=1600)
    export_protected(ds, tmp_path)
    back = ingest(tmp_path / "manifest.csv")
    assert [it.label for it in back.items] == [it.label for it in ds.items]
    for a, b in zip(ds.items, back.items):
        assert np.max(np.abs(a.clip.samples - b.clip.samples)) <= 2**-15


def test_poisoned_export_differs_only_on_poisons(tmp_path):
    ds = make_ds(n_train=40, n_val=5, length=1600)
    plan = select_poison_set(ds, [1, 3], 0.1, seed=0)
    rng = np.random.default_rng(0)
    perts = PerturbationSet({i: rng.uniform(-0.05, 0.05, 1600).astype(np.float32) for i in plan.poison_ids}, 0.05)
    export_protected(ds, tmp_path / "clean")
    export_protected(apply_perturbations(ds, perts), tmp_path / "poisoned")
    a = {it.id: clip_hash(it.clip) for it in ingest(tmp_path / "clean" / "manifest.csv").items}
    b = {it.id: clip_hash(it.clip) for it in ingest(tmp_path / "poisoned" / "manifest.csv").items}
    assert {i for i in a if a[i] != b[i]} == set(plan.poison_ids)
    poisoned = ingest(tmp_path / "poisoned" / "manifest.csv").index()
    for i in plan.poison_ids:
        diff = poisoned[i].clip.samples.astype(np.float64) - ds.index()[i].clip.samples
        assert np.max(np.abs(diff)) <= 0.05 + 2**-15


def test_perturbation_files_roundtrip(tmp_path):
    ds = make_ds()
    plan = select_poison_set(ds, [0], 0.05, seed=0)
    perts = PerturbationSet({i: np.full(800, 0.01, np.float32) for i in plan.poison_ids}, 0.05)
    save_perturbations(perts, tmp_path, 16000, plan)
    back, plan_back = load_perturbations(tmp_path)
    assert plan_back == plan
    for k, v in perts.deltas.items():
        assert np.array_equal(back.deltas[k], v)
