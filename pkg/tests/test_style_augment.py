from __future__ import annotations

import hashlib
import json
import os
import shutil
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import GOLDEN
from icono.data_model import ContentRecord, load_image, load_manifest
from icono.errors import InsufficientContent, MissingWeights, WeightMismatch
from icono.style_augment import (
    DegenerateChannelWarning,
    StylePairingPlan,
    StyleTransfer,
    adain,
    build_styled_dataset,
    load_styled_manifest,
    plan_pairings,
    round_trip,
    split_styled,
    stylize,
)


class _Style:
    def __init__(self, path):
        self.image_path = path


def _contents(n_female, n_male):
    return ([ContentRecord(f"f{j:03d}", f"c/f{j:03d}.png", "female") for j in range(n_female)]
            + [ContentRecord(f"m{j:03d}", f"c/m{j:03d}.png", "male") for j in range(n_male)])


@pytest.fixture(scope="module")
def transfer(fixture_data):
    return StyleTransfer.load(fixture_data / "assets/vgg19_relu4_1.pt", fixture_data / "assets/adain_decoder.pt", 64)


# -- pairing -----------------------------------------------------------------

def test_forced_selection():
    contents = _contents(8, 8)
    plan = plan_pairings([_Style("s/one.png")], contents, per_gender=8, seed=5)
    assert sorted(e.content_id for e in plan.entries) == sorted(c.image_id for c in contents)


def test_insufficient_content():
    with pytest.raises(InsufficientContent):
        plan_pairings([_Style("s/one.png")], _contents(8, 7), per_gender=8)


def test_plan_json_round_trip():
    plan = plan_pairings([_Style("s/a.png"), _Style("s/b.png")], _contents(10, 10), 3, seed=1)
    again = StylePairingPlan.from_json(plan.to_json())
    assert again == plan and again.style_paths == plan.style_paths


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 6), st.integers(0, 6), st.integers(0, 2**31))
def test_pairing_balance(n_styles, per_gender, extra_f, extra_m, seed):
    contents = _contents(per_gender + extra_f, per_gender + extra_m)
    styles = [_Style(f"s/{i}.png") for i in range(n_styles)]
    plan = plan_pairings(styles, contents, per_gender, seed)
    assert plan == plan_pairings(list(reversed(styles)), contents, per_gender, seed)
    assert len(plan.entries) == n_styles * 2 * per_gender
    by_style: dict = {}
    for e in plan.entries:
        by_style.setdefault(e.style_id, []).append(e)
    for entries in by_style.values():
        assert [e.gender for e in entries].count("female") == per_gender
        assert len({e.content_id for e in entries}) == 2 * per_gender


# -- AdaIN -------------------------------------------------------------------

def test_adain_forced_stats():
    rng = np.random.default_rng(0)
    content = rng.normal(size=(1, 4000))
    content = (content - content.mean()) / content.std()
    style = rng.normal(size=(1, 3000))
    style = 2 + 3 * (style - style.mean()) / style.std()
    out = adain(content, style)
    assert out.mean() == pytest.approx(2, abs=1e-12)
    assert out.std() == pytest.approx(3, abs=1e-12)


def test_adain_constant_channel():
    style = np.array([[-1.0, 5.0]])  # mean 2, population std 3
    assert style.std() == 3.0
    with pytest.warns(DegenerateChannelWarning):
        out = adain(np.full((1, 6), 5.0), style)
    np.testing.assert_array_equal(out, np.full((1, 6), 2.0))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 30)),
              elements=st.floats(-50, 50, allow_nan=False)),
       st.integers(0, 2**31))
def test_adain_properties(content, seed):
    rng = np.random.default_rng(seed)
    style = rng.normal(rng.normal(0, 5, (content.shape[0], 1)), rng.uniform(0.5, 5, (content.shape[0], 1)),
                       size=(content.shape[0], 17))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateChannelWarning)
        out = adain(content, style)
        np.testing.assert_allclose(out.mean(axis=1), style.mean(axis=1), atol=1e-8)
        live = content.std(axis=1) > 1e-3
        np.testing.assert_allclose(out.std(axis=1)[live], style.std(axis=1)[live], rtol=1e-6)
        if live.all():
            np.testing.assert_allclose(adain(out, style), out, atol=1e-8)
            np.testing.assert_allclose(adain(content, content), content, atol=1e-9)


# -- transfer ------------------------------------------------------------------

def test_missing_and_bad_weights(fixture_data, tmp_path):
    enc = fixture_data / "assets/vgg19_relu4_1.pt"
    with pytest.raises(MissingWeights):
        StyleTransfer.load(enc, tmp_path / "absent.pt")
    with pytest.raises(MissingWeights):
        StyleTransfer.load(enc, None)
    (tmp_path / "junk.pt").write_bytes(b"garbage")
    with pytest.raises(WeightMismatch):
        StyleTransfer.load(enc, tmp_path / "junk.pt")
    with pytest.raises(WeightMismatch):
        StyleTransfer.load(enc, enc)


@pytest.mark.filterwarnings("ignore::icono.style_augment.DegenerateChannelWarning")
def test_alpha_zero_is_round_trip(transfer, fixture_data):
    content = load_image(fixture_data / "content/female_000.png")
    style = load_image(fixture_data / "scenes/scene000.png")
    assert stylize(content, style, 0.0, transfer).tobytes() == round_trip(content, transfer).tobytes()


def test_stylize_shape_and_range(transfer, fixture_data):
    content = load_image(fixture_data / "content/male_001.png")
    style = load_image(fixture_data / "scenes/scene003.png")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateChannelWarning)
        out = stylize(content, style, 1.0, transfer)
    assert out.dtype == np.uint8 and out.shape == (80, 64, 3)


def test_stylize_golden_hash(transfer, fixture_data):
    content = load_image(fixture_data / "content/female_000.png")
    style = load_image(fixture_data / "scenes/scene000.png")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateChannelWarning)
        out = stylize(content, style, 1.0, transfer)
    pinned = json.loads((GOLDEN / "hashes.json").read_text())["stylize_female_000_scene000"]
    assert hashlib.sha256(out.tobytes()).hexdigest() == pinned


@pytest.mark.skipif(not (os.environ.get("ICONO_STYLE_ENCODER") and os.environ.get("ICONO_STYLE_DECODER")),
                    reason="needs trained encoder/decoder weights (ICONO_STYLE_ENCODER, ICONO_STYLE_DECODER)")
def test_restyled_features_match_style(fixture_data):
    # Only meaningful with a decoder trained to invert the encoder.
    transfer = StyleTransfer.load(os.environ["ICONO_STYLE_ENCODER"], os.environ["ICONO_STYLE_DECODER"], 256)
    content = load_image(fixture_data / "content/female_000.png")
    style = load_image(fixture_data / "scenes/scene000.png")
    out = stylize(content, style, 1.0, transfer)
    fo = transfer.encode(out)[0].flatten(1).double().numpy()
    fs = transfer.encode(style)[0].flatten(1).double().numpy()
    live = fs.std(axis=1) > 1e-3
    np.testing.assert_allclose(fo.mean(axis=1)[live], fs.mean(axis=1)[live], rtol=0.05)
    np.testing.assert_allclose(fo.std(axis=1)[live], fs.std(axis=1)[live], rtol=0.05)


# -- dataset build ------------------------------------------------------------

def _one_style_plan(fixture_data):
    contents = load_manifest(fixture_data / "content.csv", "content")
    styles = load_manifest(fixture_data / "annotated.csv", "annotated")[:1]
    return plan_pairings(styles, contents, per_gender=8, seed=2)


@pytest.mark.filterwarnings("ignore::icono.style_augment.DegenerateChannelWarning")
def test_build_bijection_and_resume(transfer, fixture_data, tmp_path):
    plan = _one_style_plan(fixture_data)
    assert len(plan.entries) == 16
    build = build_styled_dataset(plan, tmp_path / "out", transfer, fixture_data)
    assert build.written == 16 and not build.failures
    assert len(list((tmp_path / "out/images").glob("*.png"))) == 16
    samples = load_styled_manifest(build.manifest_path)
    assert len(samples) == 16 and {s.gender for s in samples} == {"female", "male"}

    again = build_styled_dataset(plan, tmp_path / "out", transfer, fixture_data)
    assert again.written == 0 and again.skipped == 16


@pytest.mark.filterwarnings("ignore::icono.style_augment.DegenerateChannelWarning")
def test_build_partial_failure(transfer, fixture_data, tmp_path):
    root = tmp_path / "data"
    shutil.copytree(fixture_data / "scenes", root / "scenes")
    shutil.copytree(fixture_data / "content", root / "content")
    plan = _one_style_plan(fixture_data)
    victim = plan.entries[3]
    (root / plan.content_paths[victim.content_id]).unlink()
    build = build_styled_dataset(plan, tmp_path / "out", transfer, root)
    assert len(build.samples) == 15 and len(build.failures) == 1
    assert len(list((tmp_path / "out/images").glob("*.png"))) == 15
    logged = [json.loads(line) for line in (tmp_path / "out/errors.jsonl").read_text().splitlines()]
    assert [e["sample_id"] for e in logged] == [victim.sample_id]


def test_split_styled_per_gender():
    from icono.style_augment import StyledSample

    samples = [StyledSample(f"s{i}", "st", f"c{i}", "female" if i % 2 else "male", f"images/s{i}.png")
               for i in range(40)]
    train, test = split_styled(samples, 0.25, seed=3)
    assert len(test) == 10 and len(train) == 30
    assert sum(s.gender == "female" for s in test) == 5
    assert split_styled(samples, 0.25, seed=3) == (train, test)
