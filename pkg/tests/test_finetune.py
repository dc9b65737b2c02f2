from __future__ import annotations

import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icono.data_model import CHARACTERS, load_manifest
from icono.errors import Divergence, ProvenanceError
from icono.feature_extractor import load_backbone
from icono.finetune import (
    EarlyStopper,
    FineTunedModel,
    TrainConfig,
    annotated_items,
    augment,
    build_head,
    early_stop_trace,
    pipeline_C,
    predict_class,
    predict_items,
    read_epoch_logs,
    train,
)

NULL_AUG = TrainConfig(shear_range=0, shift_range=0, rotation_range=0, horizontal_flip=False)


@pytest.fixture(scope="module")
def handle(fixture_data):
    return load_backbone(fixture_data / "assets/resnet50_face_identification.pt", "face_identification", 112)


@pytest.fixture(scope="module")
def items(fixture_data):
    return annotated_items(load_manifest(fixture_data / "annotated.csv", "annotated"), fixture_data)


def test_sigmoid_outputs(handle):
    model = build_head(handle, CHARACTERS, seed=1)
    image = np.random.default_rng(0).integers(0, 256, (224, 224, 3), dtype=np.uint8)
    scores = model.scores([image])
    assert scores.shape == (1, 2)
    assert ((scores > 0) & (scores < 1)).all()


def test_predict_class_rules():
    assert predict_class([[0.9, 0.2]]).tolist() == [0]
    assert predict_class([[0.5, 0.5]]).tolist() == [0]
    assert predict_class([[0.1, 0.7], [0.3, 0.3]]).tolist() == [1, 0]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 10), st.just(2)),
              elements=st.integers(0, 1000).map(lambda v: v / 1000)),
       st.sampled_from([0.25, 0.5, 2.0, 8.0]))
def test_argmax_stability(scores, scale):
    base = predict_class(scores)
    assert np.array_equal(base, np.where(scores[:, 1] > scores[:, 0], 1, 0))
    assert np.array_equal(base, predict_class(scores * scale))
    swapped = predict_class(scores[:, ::-1])
    ties = scores[:, 0] == scores[:, 1]
    assert np.array_equal(swapped[~ties], 1 - base[~ties])
    assert (swapped[ties] == 0).all()


def test_config_problems():
    assert TrainConfig().problems() == []
    bad = TrainConfig(learning_rate=-1, val_fraction=1.5, early_stop_patience=0)
    assert [p.split(":")[0] for p in bad.problems()] == ["learning_rate", "val_fraction", "early_stop_patience"]


# -- augmentation -----------------------------------------------------------

def _image(seed=0, h=40, w=30):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


def test_null_augmentation_is_identity():
    image = _image()
    for seed in range(5):
        assert np.array_equal(augment(image, NULL_AUG, seed), image)


def test_flip_only_is_involution():
    cfg = TrainConfig(shear_range=0, shift_range=0, rotation_range=0, horizontal_flip=True)
    image = _image(1)
    seed = next(s for s in range(100) if np.random.default_rng(s).random() < 0.5)
    once = augment(image, cfg, seed)
    assert np.array_equal(once, image[:, ::-1])
    assert np.array_equal(augment(once, cfg, seed), image)


def test_rotation_changes_image_within_bounds():
    cfg = TrainConfig(shear_range=0, shift_range=0, rotation_range=10, horizontal_flip=False)
    image = _image(2)
    out = augment(image, cfg, 3)
    assert out.shape == image.shape and out.dtype == np.uint8
    assert not np.array_equal(out, image)
    assert out.min() >= image.min() and out.max() <= image.max()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 0.3), st.floats(0, 0.2), st.floats(0, 30), st.booleans())
def test_augment_deterministic(seed, shear, shift, rotation, flip):
    cfg = TrainConfig(shear_range=shear, shift_range=shift, rotation_range=rotation, horizontal_flip=flip)
    image = _image(seed % 7, 24, 20)
    a, b = augment(image, cfg, seed), augment(image, cfg, seed)
    assert np.array_equal(a, b) and a.shape == image.shape


# -- early stopping ---------------------------------------------------------

def test_small_drops_halt_at_eleven():
    losses = [1.0, 0.99, 0.985, 0.98, 0.975, 0.97, 0.965, 0.96, 0.955, 0.9525, 0.951, 0.95, 0.9]
    assert early_stop_trace(losses, 0.05, 10) == (11, 11)


def test_always_improving_never_halts():
    losses = [round(5.0 - 0.1 * i, 2) for i in range(50)]
    assert early_stop_trace(losses, 0.05, 10) == (None, 50)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=40), st.floats(0, 1), st.integers(1, 10))
def test_early_stop_trace_properties(losses, tol, patience):
    halt, best = early_stop_trace(losses, tol, patience)
    run = losses[:halt] if halt else losses
    assert losses[best - 1] == min(run)
    if halt is not None:
        assert halt >= patience + 1
        stopper = EarlyStopper(tol, patience)
        assert [stopper.update(v) for v in run][-1] is True


# -- training ---------------------------------------------------------------

def test_one_epoch_one_log(handle, items):
    model = build_head(handle, CHARACTERS, seed=0)
    cfg = TrainConfig(max_epochs=1, batch_size=4, freeze_backbone=True, seed=3, val_fraction=0.25)
    subset = items[:8]
    _, logs = train(model, subset, cfg, "A")
    assert len(logs) == 1 and logs[0].epoch == 1
    assert model.pipeline == "A" and len(model.epoch_logs) == 1
    assert model.provenance[-1]["train_size"] + model.provenance[-1]["val_size"] == 8


def test_divergence_reported(handle, items):
    model = build_head(handle, CHARACTERS, seed=0)
    cfg = TrainConfig(learning_rate=1e30, max_epochs=3, batch_size=4, freeze_backbone=True, seed=0)
    with pytest.raises(Divergence) as err:
        train(model, items[:8], cfg, "A")
    assert isinstance(err.value.logs, list)


def test_bundle_round_trip(handle, items, tmp_path):
    model = build_head(handle, CHARACTERS, seed=4)
    model.provenance.append({"pipeline": "A", "epochs": []})
    model.save(tmp_path / "m.pt")
    loaded = FineTunedModel.load(tmp_path / "m.pt")
    assert loaded.class_names == CHARACTERS and loaded.pipeline == "A"
    _, s1 = predict_items(model, items[:4])
    _, s2 = predict_items(loaded, items[:4])
    np.testing.assert_array_equal(s1, s2)


def test_pipeline_c_needs_b(handle, fixture_data):
    model = build_head(handle, CHARACTERS)
    model.provenance.append({"pipeline": "A", "epochs": []})
    with pytest.raises(ProvenanceError):
        pipeline_C(model, [], TrainConfig(), fixture_data)


# -- fixture run ------------------------------------------------------------

def _accuracy(out, name):
    return json.loads((out / "06_evaluate" / name / "metrics.json").read_text())["accuracy"]


def test_fixture_pipelines(fixture_run):
    _, out, _ = fixture_run
    assert _accuracy(out, "A") >= 0.9
    assert _accuracy(out, "C") >= _accuracy(out, "A") - 0.1
    for name in ("A", "B", "C"):
        logs = read_epoch_logs(out / "05_train" / f"model_{name}.pt.epochs.csv")
        assert logs and logs == FineTunedModel.load(out / "05_train" / f"model_{name}.pt").epoch_logs
    c = FineTunedModel.load(out / "05_train" / "model_C.pt")
    assert [p["pipeline"] for p in c.provenance] == ["B", "C"]
    assert c.class_names == CHARACTERS


def test_best_epoch_weights_restored(fixture_run, fixture_data):
    cfg, out, _ = fixture_run
    from icono.finetune import validation_loss

    model = FineTunedModel.load(out / "05_train" / "model_A.pt")
    record = model.provenance[-1]
    by_id = {it.image_id: it for it in annotated_items(load_manifest(cfg.annotated, "annotated"), cfg.data_root)}
    val = [by_id[i] for i in record["val_ids"]]
    best = min(e["val_loss"] for e in record["epochs"])
    assert validation_loss(model, val) == pytest.approx(best, rel=1e-4, abs=1e-6)
