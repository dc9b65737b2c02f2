"""Styled surrogate dataset: style/content pairing, AdaIN and stylization.

Each distinct annotated scene acts as a style image. For every style a
fixed number of male and female content images is drawn without
replacement, and the scene's style is transferred onto each of them with
a VGG-19 encoder (up to relu4_1), adaptive instance normalization and a
mirrored decoder.
"""
from __future__ import annotations

import csv
import json
import logging
import random
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torchvision
from PIL import Image

from . import kernels
from .data_model import GENDERS, ContentRecord, load_image, save_image
from .errors import InsufficientContent, MissingWeights, WeightMismatch

log = logging.getLogger(__name__)

ADAIN_EPS = 1e-5
STYLED_HEADER = ("image_id", "image_path", "gender", "style_id", "content_id")


class DegenerateChannelWarning(UserWarning):
    """A content channel was (near) constant; it was shifted, not rescaled."""


# -- pairing ----------------------------------------------------------------

@dataclass(frozen=True)
class PairingEntry:
    style_id: str
    content_id: str
    gender: str

    @property
    def sample_id(self) -> str:
        return f"{self.style_id}__{self.content_id}"


@dataclass(frozen=True)
class StylePairingPlan:
    entries: tuple
    per_style: int
    per_style_male: int
    per_style_female: int
    seed: int
    style_paths: dict = field(default_factory=dict, compare=False)
    content_paths: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_style": self.per_style,
                "per_style_male": self.per_style_male,
                "per_style_female": self.per_style_female,
                "seed": self.seed,
                "entries": [asdict(e) for e in self.entries],
                "style_paths": self.style_paths,
                "content_paths": self.content_paths,
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "StylePairingPlan":
        raw = json.loads(text)
        return cls(
            entries=tuple(PairingEntry(**e) for e in raw["entries"]),
            per_style=raw["per_style"],
            per_style_male=raw["per_style_male"],
            per_style_female=raw["per_style_female"],
            seed=raw["seed"],
            style_paths=raw.get("style_paths", {}),
            content_paths=raw.get("content_paths", {}),
        )


def style_id_for(image_path: str) -> str:
    return str(Path(image_path).with_suffix("")).replace("/", "_").replace("\\", "_")


def style_sources(records: Sequence) -> dict:
    """Map style_id -> image path, one style per distinct scene image."""
    sources: dict = {}
    for r in records:
        sources.setdefault(style_id_for(r.image_path), r.image_path)
    return sources


def plan_pairings(
    styles: Sequence,
    contents: Sequence[ContentRecord],
    per_gender: int = 8,
    seed: int = 0,
) -> StylePairingPlan:
    """Assign ``per_gender`` female and ``per_gender`` male content images to every style.

    Content ids are drawn without replacement within a style; one content
    image may serve several styles.
    """
    if per_gender < 1:
        raise ValueError("per_gender must be at least 1")
    pools = {g: sorted(c.image_id for c in contents if c.gender == g) for g in GENDERS}
    for gender, pool in pools.items():
        if len(pool) < per_gender:
            raise InsufficientContent(
                f"{len(pool)} {gender} content images available, {per_gender} needed per style"
            )
    sources = style_sources(styles)
    rng = random.Random(seed)
    entries = []
    for style_id in sorted(sources):
        for gender in GENDERS:
            for content_id in rng.sample(pools[gender], per_gender):
                entries.append(PairingEntry(style_id, content_id, gender))
    return StylePairingPlan(
        entries=tuple(entries),
        per_style=2 * per_gender,
        per_style_male=per_gender,
        per_style_female=per_gender,
        seed=seed,
        style_paths=sources,
        content_paths={c.image_id: c.image_path for c in contents},
    )


# -- adaptive instance normalization ---------------------------------------

def adain(content_features: np.ndarray, style_features: np.ndarray, eps: float = ADAIN_EPS) -> np.ndarray:
    """Shift and scale every content channel to the style channel's mean and std.

    Inputs are (channels, *spatial); spatial sizes may differ. Standard
    deviations are population (ddof=0). Channels whose std is below ``eps``
    are normalized with std clamped to ``eps`` and trigger a
    DegenerateChannelWarning.
    """
    content = np.asarray(content_features)
    style = np.asarray(style_features)
    if content.shape[0] != style.shape[0]:
        raise ValueError(f"channel mismatch: {content.shape[0]} vs {style.shape[0]}")
    n_ch = content.shape[0]
    out, degenerate = kernels.adain(content.reshape(n_ch, -1), style.reshape(n_ch, -1), eps)
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} content channel(s) with std < {eps}; shifted only",
            DegenerateChannelWarning,
            stacklevel=2,
        )
    return out.reshape(content.shape)


# -- encoder / decoder -----------------------------------------------------

def build_encoder():
    """VGG-19 convolutional trunk up to relu4_1, with ImageNet input normalization."""
    class Encoder(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.features = torchvision.models.vgg19(weights=None).features[:21]
            self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1), persistent=False)
            self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1), persistent=False)

        def forward(self, x):
            return self.features((x - self.mean) / self.std)

    return Encoder()


def build_decoder():
    """Mirror of the encoder: relu4_1 features (512 ch, 1/8 res) back to RGB."""
    nn = torch.nn

    def conv(cin, cout, relu=True):
        layers = [nn.ReflectionPad2d(1), nn.Conv2d(cin, cout, 3)]
        return layers + [nn.ReLU()] if relu else layers

    def up():
        return [nn.Upsample(scale_factor=2, mode="nearest")]

    return nn.Sequential(
        *conv(512, 256), *up(),
        *conv(256, 256), *conv(256, 256), *conv(256, 256), *conv(256, 128), *up(),
        *conv(128, 128), *conv(128, 64), *up(),
        *conv(64, 64), *conv(64, 3, relu=False),
    )


def _load_state(module, path, what: str):
    if path is None or str(path) == "":
        raise MissingWeights(f"no {what} weights configured")
    path = Path(path)
    if not path.is_file():
        raise MissingWeights(f"{what} weights not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        module.load_state_dict(state, strict=True)
    except (RuntimeError, KeyError, TypeError, ValueError, EOFError, OSError) as exc:
        raise WeightMismatch(f"{what} weights {path} do not fit: {exc}") from exc
    except Exception as exc:  # unpickling garbage raises assorted types
        raise WeightMismatch(f"{what} weights {path} unreadable: {exc}") from exc


class StyleTransfer:
    """Loaded encoder/decoder pair plus the working resolution."""

    def __init__(self, encoder, decoder, image_size: int = 512):
        self.encoder = encoder.eval()
        self.decoder = decoder.eval()
        self.image_size = image_size

    @classmethod
    def load(cls, encoder_weights, decoder_weights, image_size: int = 512) -> "StyleTransfer":
        encoder, decoder = build_encoder(), build_decoder()
        _load_state(encoder, encoder_weights, "encoder")
        _load_state(decoder, decoder_weights, "decoder")
        return cls(encoder, decoder, image_size)

    def prepare(self, image: np.ndarray):
        """Resize so the short side is ``image_size``, centre-crop to a multiple of 8, to a 1x3xHxW tensor."""
        h, w = image.shape[:2]
        scale = self.image_size / min(h, w)
        nh, nw = max(8, round(h * scale)), max(8, round(w * scale))
        resized = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
        ch, cw = nh - nh % 8, nw - nw % 8
        top, left = (nh - ch) // 2, (nw - cw) // 2
        resized = resized[top:top + ch, left:left + cw]
        t = torch.from_numpy(np.array(resized)).permute(2, 0, 1).float() / 255.0
        return t.unsqueeze(0)

    def encode(self, image: np.ndarray):
        with torch.no_grad():
            return self.encoder(self.prepare(image))

    def decode(self, features) -> np.ndarray:
        with torch.no_grad():
            out = self.decoder(features)[0].clamp(0.0, 1.0)
        return (out.permute(1, 2, 0).numpy() * 255.0 + 0.5).astype(np.uint8)


def stylize(content_image: np.ndarray, style_image: np.ndarray, alpha: float, transfer: StyleTransfer) -> np.ndarray:
    """Render ``content_image`` in the style of ``style_image``.

    ``alpha`` interpolates between the content features (0) and the AdaIN
    output (1) before decoding.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    fc = transfer.encode(content_image)
    fs = transfer.encode(style_image)
    target = adain(fc[0].double().numpy(), fs[0].double().numpy())
    t = torch.from_numpy(target).float().unsqueeze(0)
    mixed = alpha * t + (1.0 - alpha) * fc
    return transfer.decode(mixed)


def round_trip(content_image: np.ndarray, transfer: StyleTransfer) -> np.ndarray:
    """decoder(encoder(content)) without any style."""
    return transfer.decode(transfer.encode(content_image))


# -- dataset generation ----------------------------------------------------

@dataclass(frozen=True)
class StyledSample:
    sample_id: str
    style_id: str
    content_id: str
    gender: str
    image_path: str

    @property
    def image_id(self) -> str:
        return self.sample_id

    @property
    def label(self) -> str:
        return self.gender


@dataclass
class StyledBuild:
    samples: list
    manifest_path: Path
    written: int
    skipped: int
    failures: list


def _render_entry(entry: PairingEntry, plan: StylePairingPlan, data_root: Path, out_dir: Path,
                  transfer: StyleTransfer, alpha: float):
    rel = f"images/{entry.sample_id}.png"
    target = out_dir / rel
    if target.exists():
        return rel, False
    content = load_image(data_root / plan.content_paths[entry.content_id])
    style = load_image(data_root / plan.style_paths[entry.style_id])
    image = stylize(content, style, alpha, transfer)
    tmp = target.with_name(target.name + ".part.png")
    save_image(image, tmp)
    tmp.replace(target)
    return rel, True


def build_styled_dataset(
    plan: StylePairingPlan,
    out_dir,
    transfer: StyleTransfer,
    data_root,
    alpha: float = 1.0,
    workers: int = 1,
) -> StyledBuild:
    """Stylize every plan entry into ``out_dir/images`` and write ``manifest.csv``.

    Existing outputs are kept (resume). Failing entries are logged to
    ``errors.jsonl`` and left out of the manifest; the run continues.
    """
    out_dir, data_root = Path(out_dir), Path(data_root)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    def work(entry):
        try:
            return entry, _render_entry(entry, plan, data_root, out_dir, transfer, alpha), None
        except Exception as exc:  # per-entry isolation
            log.warning("stylize failed for %s: %s", entry.sample_id, exc)
            return entry, None, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, plan.entries))
    else:
        results = [work(e) for e in plan.entries]

    samples, failures, written, skipped = [], [], 0, 0
    for entry, done, error in results:
        if error is not None:
            failures.append({"sample_id": entry.sample_id, "style_id": entry.style_id,
                             "content_id": entry.content_id, "error": error})
            continue
        rel, new = done
        written += int(new)
        skipped += int(not new)
        samples.append(StyledSample(entry.sample_id, entry.style_id, entry.content_id, entry.gender, rel))

    manifest_path = out_dir / "manifest.csv"
    write_styled_manifest(samples, manifest_path)
    with open(out_dir / "errors.jsonl", "w") as fh:
        for f in failures:
            fh.write(json.dumps(f) + "\n")
    return StyledBuild(samples, manifest_path, written, skipped, failures)


def write_styled_manifest(samples: Sequence[StyledSample], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STYLED_HEADER)
        for s in samples:
            writer.writerow([s.sample_id, s.image_path, s.gender, s.style_id, s.content_id])


def load_styled_manifest(path) -> list:
    with open(path, newline="") as fh:
        return [
            StyledSample(row["image_id"], row["style_id"], row["content_id"], row["gender"], row["image_path"])
            for row in csv.DictReader(fh)
        ]


def split_styled(samples: Sequence[StyledSample], test_fraction: float, seed: int) -> tuple:
    """Per-gender random split into (train, test); the test share is rounded per class."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = random.Random(seed)
    test_ids: set = set()
    for gender in GENDERS:
        ids = sorted(s.sample_id for s in samples if s.gender == gender)
        test_ids.update(rng.sample(ids, int(round(len(ids) * test_fraction))))
    train = [s for s in samples if s.sample_id not in test_ids]
    test = [s for s in samples if s.sample_id in test_ids]
    return train, test

