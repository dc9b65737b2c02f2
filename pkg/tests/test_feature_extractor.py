from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from icono.data_model import crop_region, load_image, load_manifest
from icono.errors import MissingWeights, WeightMismatch
from icono.feature_extractor import FEATURE_DIM, FeatureTable, extract, extract_batch, load_backbone, preprocess


@pytest.fixture(scope="module")
def handle(fixture_data):
    return load_backbone(fixture_data / "assets/resnet50_object_recognition.pt", "object_recognition", 112)


@pytest.fixture(scope="module")
def records(fixture_data):
    return load_manifest(fixture_data / "annotated.csv", "annotated", fixture_data)


def test_face_weights_handle(fixture_data):
    h = load_backbone(fixture_data / "assets/resnet50_face_identification.pt", "face_identification")
    assert h.pretrain_source == "face_identification" and h.architecture == "resnet50"
    assert h.channel_means == pytest.approx((131.0912, 103.8827, 91.4953))


def test_weight_errors(fixture_data, tmp_path):
    (tmp_path / "bad.pt").write_bytes(b"\x00corrupt")
    with pytest.raises(WeightMismatch):
        load_backbone(tmp_path / "bad.pt", "object_recognition")
    with pytest.raises(MissingWeights):
        load_backbone(tmp_path / "absent.pt", "object_recognition")
    # a face-identification asset requested as object-recognition
    with pytest.raises(WeightMismatch):
        load_backbone(fixture_data / "assets/resnet50_face_identification.pt", "object_recognition")
    with pytest.raises(WeightMismatch):
        load_backbone(fixture_data / "assets/vgg19_relu4_1.pt", "object_recognition")


def test_fingerprint_stable(fixture_data, handle):
    again = load_backbone(fixture_data / "assets/resnet50_object_recognition.pt", "object_recognition", 112)
    assert again.weights_fingerprint == handle.weights_fingerprint


def test_preprocess_mean_subtraction():
    image = np.full((112, 112, 3), 200, np.uint8)
    x = preprocess(image, 112, (100.0, 50.0, 25.0))
    assert x.shape == (3, 112, 112)
    assert x[:, 0, 0].tolist() == [100.0, 150.0, 175.0]


def test_crop_features(handle, fixture_data, records):
    r = records[0]
    crop = crop_region(load_image(fixture_data / r.image_path), r.body_box)
    a, b = extract(handle, crop, r.image_id), extract(handle, crop, r.image_id)
    assert a.values.shape == (FEATURE_DIM,) and np.isfinite(a.values).all()
    assert np.array_equal(a.values, b.values)
    flipped = extract(handle, np.ascontiguousarray(crop[:, ::-1])).values
    assert np.linalg.norm(flipped - a.values) > 0


def test_batch_face_rows(handle, fixture_data, records):
    table = extract_batch(handle, records, "face", fixture_data)
    assert len(table) == 40 and table.skipped == [] and table.failures == []


def test_batch_skips_missing_faces(handle, fixture_data, records):
    thinned = [replace(r, face_box=None) if i < 5 else r for i, r in enumerate(records)]
    table = extract_batch(handle, thinned, "face", fixture_data)
    assert len(table) == 35 and len(table.skipped) == 5
    assert table.skipped == [r.image_id for r in records[:5]]


def test_batch_body_rows_and_round_trip(handle, fixture_data, records, tmp_path):
    table = extract_batch(handle, records, "body", fixture_data)
    assert len(table) == len(records)
    table.save(tmp_path / "f.csv")
    loaded = FeatureTable.load(tmp_path / "f.csv")
    assert loaded.image_ids == table.image_ids and loaded.region == "body"
    assert loaded.fingerprint == handle.weights_fingerprint
    np.testing.assert_allclose(loaded.values, table.values, rtol=1e-7)


def test_batch_isolates_failures(handle, fixture_data, records, tmp_path):
    broken = [replace(records[0], image_path="scenes/missing.png"), *records[1:3]]
    table = extract_batch(handle, broken, "body", fixture_data)
    assert len(table) == 2 and [f["image_id"] for f in table.failures] == [records[0].image_id]
