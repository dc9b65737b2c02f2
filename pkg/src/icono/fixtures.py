"""Deterministic desk-scale corpus for tests and the end-to-end run.

Scenes are drawn with PIL: a textured background that differs per scene
(its "style"), a Gabriel figure (warm robe, white wings, halo) and a Mary
figure (blue robe and mantle). Content images are simple portraits whose
hair and shoulders differ by gender. Weight assets are seeded random
initializations; the ResNet-50 batch-norm statistics are calibrated on the
fixture images so activations are well scaled.
"""
from __future__ import annotations

import random
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFilter

from .config import write_kv
from .data_model import AnnotatedRecord, BoundingBox, ContentRecord, crop_region, write_manifest
from .feature_extractor import CHANNEL_MEANS, build_trunk, preprocess, save_backbone_weights
from .style_augment import build_decoder, build_encoder

SCENE_SIZE = (256, 192)
CONTENT_SIZE = (96, 128)
SKIN = [(233, 196, 160), (214, 170, 130), (240, 210, 180), (190, 140, 105)]


def _background(rng: random.Random, size) -> Image.Image:
    w, h = size
    c1 = np.array([rng.randint(40, 215) for _ in range(3)], dtype=np.float64)
    c2 = np.array([rng.randint(40, 215) for _ in range(3)], dtype=np.float64)
    t = np.linspace(0, 1, h)[:, None, None]
    base = c1 * (1 - t) + c2 * t
    base = np.broadcast_to(base, (h, w, 3)).copy()
    yy, xx = np.mgrid[0:h, 0:w]
    kind = rng.choice(["stripes", "checker", "dots", "waves"])
    period = rng.randint(8, 24)
    amp = rng.uniform(15, 40)
    if kind == "stripes":
        angle = rng.uniform(0, np.pi)
        pattern = np.sin((xx * np.cos(angle) + yy * np.sin(angle)) * 2 * np.pi / period)
    elif kind == "checker":
        pattern = ((xx // period + yy // period) % 2) * 2.0 - 1.0
    elif kind == "dots":
        pattern = np.cos(xx * 2 * np.pi / period) * np.cos(yy * 2 * np.pi / period)
    else:
        pattern = np.sin(xx * 2 * np.pi / period + 3 * np.sin(yy * 2 * np.pi / (3 * period)))
    tint = np.array([rng.uniform(-1, 1) for _ in range(3)])
    base += amp * pattern[..., None] * tint
    noise = np.random.default_rng(rng.randint(0, 2**31)).normal(0, 6, base.shape)
    return Image.fromarray(np.clip(base + noise, 0, 255).astype(np.uint8))


def _draw_gabriel(draw: ImageDraw.ImageDraw, rng: random.Random, cx: int, top: int) -> tuple:
    robe = (rng.randint(190, 240), rng.randint(60, 150), rng.randint(20, 60))
    wing = tuple(rng.randint(225, 255) for _ in range(3))
    # wings behind the body
    draw.ellipse([cx - 48, top + 18, cx - 8, top + 90], fill=wing, outline=(180, 180, 180))
    draw.ellipse([cx + 8, top + 18, cx + 48, top + 90], fill=wing, outline=(180, 180, 180))
    draw.polygon([(cx - 14, top + 26), (cx + 14, top + 26), (cx + 28, top + 118), (cx - 28, top + 118)], fill=robe)
    draw.ellipse([cx - 16, top - 4, cx + 16, top + 2], outline=(250, 215, 60), width=3)
    draw.ellipse([cx - 11, top + 3, cx + 11, top + 25], fill=rng.choice(SKIN))
    body = BoundingBox(cx - 48, top - 6, 97, 126)
    face = BoundingBox(cx - 12, top + 2, 25, 25)
    return body, face


def _draw_mary(draw: ImageDraw.ImageDraw, rng: random.Random, cx: int, top: int) -> tuple:
    robe = (rng.randint(20, 70), rng.randint(40, 90), rng.randint(150, 230))
    mantle = (robe[0] // 2, robe[1] // 2, max(90, robe[2] - 60))
    draw.polygon([(cx - 16, top + 24), (cx + 16, top + 24), (cx + 32, top + 118), (cx - 32, top + 118)], fill=robe)
    draw.polygon([(cx, top - 2), (cx + 22, top + 60), (cx - 22, top + 60)], fill=mantle)
    draw.ellipse([cx - 10, top + 5, cx + 10, top + 25], fill=rng.choice(SKIN))
    body = BoundingBox(cx - 32, top - 2, 65, 121)
    face = BoundingBox(cx - 11, top + 4, 23, 23)
    return body, face


def make_scene(seed: int) -> tuple:
    """One annunciation-like scene: (image, {character: (body, face)})."""
    rng = random.Random(seed)
    img = _background(rng, SCENE_SIZE)
    draw = ImageDraw.Draw(img)
    w, h = SCENE_SIZE
    gabriel_left = rng.random() < 0.5
    xs = [rng.randint(56, 76), rng.randint(180, 200)]
    if not gabriel_left:
        xs.reverse()
    tops = [rng.randint(20, h - 132), rng.randint(20, h - 132)]
    boxes = {
        "Gabriel": _draw_gabriel(draw, rng, xs[0], tops[0]),
        "Mary": _draw_mary(draw, rng, xs[1], tops[1]),
    }
    img = img.filter(ImageFilter.GaussianBlur(0.6))
    return np.asarray(img), boxes


def make_portrait(seed: int, gender: str) -> np.ndarray:
    rng = random.Random(seed)
    w, h = CONTENT_SIZE
    bg = tuple(rng.randint(70, 200) for _ in range(3))
    img = Image.new("RGB", (w, h), bg)
    draw = ImageDraw.Draw(img)
    cx = w // 2 + rng.randint(-6, 6)
    hair = rng.choice([(40, 25, 15), (90, 60, 30), (200, 170, 90), (20, 20, 20), (120, 50, 20)])
    shirt = tuple(rng.randint(30, 230) for _ in range(3))
    skin = rng.choice(SKIN)
    if gender == "female":
        draw.ellipse([cx - 26, 18, cx + 26, 100], fill=hair)
        draw.polygon([(cx - 24, 82), (cx + 24, 82), (cx + 34, h), (cx - 34, h)], fill=shirt)
    else:
        draw.rectangle([cx - 44, 84, cx + 44, h], fill=shirt)
    draw.ellipse([cx - 18, 30, cx + 18, 78], fill=skin)
    if gender == "male":
        draw.chord([cx - 19, 26, cx + 19, 56], 180, 360, fill=hair)
    arr = np.asarray(img.filter(ImageFilter.GaussianBlur(0.5))).astype(np.float64)
    arr += np.random.default_rng(seed).normal(0, 5, arr.shape)
    return np.clip(arr, 0, 255).astype(np.uint8)


def _calibrated_trunk(seed: int, images: list, source: str, image_size: int) -> torch.nn.Module:
    torch.manual_seed(seed)
    trunk = build_trunk()
    bns = [m for m in trunk.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None  # cumulative average over the calibration batches
    trunk.train()
    batch = torch.stack([preprocess(im, image_size, CHANNEL_MEANS[source]) for im in images])
    with torch.no_grad():
        for chunk in torch.split(batch, 16):
            trunk(chunk)
    for bn in bns:
        bn.momentum = 0.1
    return trunk.eval()


def _calibrated_decoder(seed: int, encoder, sample: np.ndarray) -> torch.nn.Module:
    torch.manual_seed(seed)
    decoder = build_decoder().eval()
    x = torch.from_numpy(np.array(sample)).permute(2, 0, 1).float().unsqueeze(0) / 255.0
    with torch.no_grad():
        out = decoder(encoder(x))
        mean, std = out.mean(dim=(0, 2, 3)), out.std(dim=(0, 2, 3)).clamp_min(1e-8)
        last = decoder[-1]
        scale = 0.2 / std
        last.weight.mul_(scale.view(-1, 1, 1, 1))
        last.bias.copy_(last.bias * scale + 0.5 - mean * scale)
    return decoder


FIXTURE_CONFIG = {
    "data_root": "data",
    "output_root": "runs",
    "seed": 7,
    "data.annotated": "annotated.csv",
    "data.content": "content.csv",
    "data.test_per_class": 5,
    "style.encoder_weights": "assets/vgg19_relu4_1.pt",
    "style.decoder_weights": "assets/adain_decoder.pt",
    "style.per_gender": 2,
    "style.image_size": 64,
    "style.alpha": 1.0,
    "style.test_fraction": 0.25,
    "features.object_weights": "assets/resnet50_object_recognition.pt",
    "features.face_weights": "assets/resnet50_face_identification.pt",
    "features.image_size": 112,
    "bench.cv_folds": 3,
    "bench.C": (1, 10, 100, 1000),
    "bench.gamma": (0.1, 0.01, 0.001),
    "bench.n_estimators": (100, 200, 500),
    "bench.standardize": False,
    "train.learning_rate": 0.003,
    "train.batch_size": 8,
    "train.val_fraction": 0.15,
    "train.early_stop_tolerance": 0.05,
    "train.early_stop_patience": 4,
    "train.max_epochs": 12,
    "train.freeze_backbone": True,
    "cam.only_correct": True,
}


def make_fixture(out_dir, n_scenes: int = 20, n_content_per_gender: int = 30, seed: int = 0,
                 weights: bool = True, config_overrides: dict | None = None) -> Path:
    """Write the fixture corpus, weight assets and ``run.cfg`` under ``out_dir``.

    Returns the path of the run config.
    """
    out = Path(out_dir)
    data = out / "data"
    (data / "scenes").mkdir(parents=True, exist_ok=True)
    (data / "content").mkdir(parents=True, exist_ok=True)
    (data / "assets").mkdir(parents=True, exist_ok=True)

    records, crops, scenes = [], [], []
    for i in range(n_scenes):
        image, boxes = make_scene(seed * 1000 + i)
        rel = f"scenes/scene{i:03d}.png"
        Image.fromarray(image).save(data / rel)
        scenes.append(image)
        for character in ("Mary", "Gabriel"):
            body, face = boxes[character]
            records.append(AnnotatedRecord(f"scene{i:03d}_{character.lower()}", rel, character, body, face))
            crops.append(crop_region(image, body))
            crops.append(crop_region(image, face))
    write_manifest(records, data / "annotated.csv")

    contents, portraits = [], []
    for gender in ("female", "male"):
        for j in range(n_content_per_gender):
            image = make_portrait(seed * 1000 + 500 + j + (0 if gender == "female" else 250), gender)
            rel = f"content/{gender}_{j:03d}.png"
            Image.fromarray(image).save(data / rel)
            contents.append(ContentRecord(f"{gender}_{j:03d}", rel, gender))
            portraits.append(image)
    write_manifest(contents, data / "content.csv", kind="content")

    cfg = dict(FIXTURE_CONFIG)
    cfg.update(config_overrides or {})
    if weights:
        size = int(cfg["features.image_size"])
        calibration = crops + portraits
        for source, wseed in (("object_recognition", 11), ("face_identification", 12)):
            trunk = _calibrated_trunk(seed * 100 + wseed, calibration, source, size)
            save_backbone_weights(trunk, data / f"assets/resnet50_{source}.pt", source)
        torch.manual_seed(seed * 100 + 13)
        encoder = build_encoder().eval()
        torch.save(encoder.state_dict(), data / "assets/vgg19_relu4_1.pt")
        sample = np.asarray(Image.fromarray(scenes[0]).resize((64, 48)))
        decoder = _calibrated_decoder(seed * 100 + 14, encoder, sample)
        torch.save(decoder.state_dict(), data / "assets/adain_decoder.pt")

    config_path = out / "run.cfg"
    write_kv(cfg, config_path)
    return config_path
