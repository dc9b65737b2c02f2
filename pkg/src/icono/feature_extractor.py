"""Pretrained ResNet-50 trunks and 2048-d penultimate-layer features."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torchvision
from PIL import Image

from .data_model import crop_region, load_image
from .errors import MissingWeights, WeightMismatch

log = logging.getLogger(__name__)

ARCHITECTURE = "resnet50"
FEATURE_DIM = 2048
PRETRAIN_SOURCES = ("object_recognition", "face_identification")

# RGB channel means in 0-255 space; inputs are mean-subtracted, not scaled.
CHANNEL_MEANS = {
    "object_recognition": (123.68, 116.779, 103.939),
    "face_identification": (131.0912, 103.8827, 91.4953),
}


def build_trunk() -> torch.nn.Module:
    """ResNet-50 with the classification layer replaced by identity."""
    model = torchvision.models.resnet50(weights=None)
    model.fc = torch.nn.Identity()
    return model


def file_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class BackboneHandle:
    architecture: str
    pretrain_source: str
    weights_fingerprint: str
    model: torch.nn.Module = field(repr=False)
    image_size: int = 224
    channel_means: tuple = CHANNEL_MEANS["object_recognition"]
    weights_path: Optional[str] = None


def save_backbone_weights(model: torch.nn.Module, path, pretrain_source: str, channel_means=None) -> None:
    """Write a trunk in the asset format read by :func:`load_backbone`."""
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("fc.")}
    torch.save(
        {
            "architecture": ARCHITECTURE,
            "pretrain_source": pretrain_source,
            "channel_means": list(channel_means or CHANNEL_MEANS[pretrain_source]),
            "state_dict": state,
        },
        path,
    )


def load_backbone(weights, pretrain_source: str, image_size: int = 224) -> BackboneHandle:
    """Load a ResNet-50 weight asset with its classifier detached.

    Accepts either the bundled asset format or a bare state dict; any
    ``fc.*`` entries are ignored.
    """
    if pretrain_source not in PRETRAIN_SOURCES:
        raise ValueError(f"pretrain_source must be one of {PRETRAIN_SOURCES}")
    if weights is None or not Path(weights).is_file():
        raise MissingWeights(f"backbone weights not found: {weights}")
    try:
        payload = torch.load(weights, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise WeightMismatch(f"cannot read backbone weights {weights}: {exc}") from exc
    if not isinstance(payload, dict):
        raise WeightMismatch(f"{weights}: not a state dict")
    means = CHANNEL_MEANS[pretrain_source]
    if "state_dict" in payload:
        arch = payload.get("architecture", ARCHITECTURE)
        source = payload.get("pretrain_source", pretrain_source)
        if arch != ARCHITECTURE:
            raise WeightMismatch(f"{weights}: architecture {arch!r}, expected {ARCHITECTURE!r}")
        if source != pretrain_source:
            raise WeightMismatch(f"{weights}: pretrained for {source!r}, requested {pretrain_source!r}")
        means = tuple(payload.get("channel_means", means))
        state = payload["state_dict"]
    else:
        state = payload
    state = {k: v for k, v in state.items() if not k.startswith("fc.")}
    model = build_trunk()
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise WeightMismatch(f"{weights}: {exc}") from exc
    model.eval()
    return BackboneHandle(
        architecture=ARCHITECTURE,
        pretrain_source=pretrain_source,
        weights_fingerprint=file_fingerprint(weights),
        model=model,
        image_size=image_size,
        channel_means=tuple(float(m) for m in means),
        weights_path=str(weights),
    )


def preprocess(image: np.ndarray, image_size: int, channel_means) -> torch.Tensor:
    """Resize to image_size x image_size and subtract channel means; returns 3xSxS float32."""
    if image.shape[:2] != (image_size, image_size):
        image = np.asarray(Image.fromarray(image).resize((image_size, image_size), Image.BILINEAR))
    x = torch.from_numpy(np.array(image, dtype=np.float32))
    x = x - torch.tensor(channel_means, dtype=torch.float32)
    return x.permute(2, 0, 1).contiguous()


@dataclass(frozen=True)
class FeatureVector:
    image_id: str
    fingerprint: str
    values: np.ndarray


def extract(handle: BackboneHandle, image: np.ndarray, image_id: str = "") -> FeatureVector:
    """Global-average-pooled layer4 activations for one decoded image."""
    x = preprocess(image, handle.image_size, handle.channel_means).unsqueeze(0)
    handle.model.eval()
    with torch.no_grad():
        values = handle.model(x)[0].numpy().astype(np.float32)
    if values.shape != (FEATURE_DIM,) or not np.isfinite(values).all():
        raise WeightMismatch(f"backbone produced invalid features of shape {values.shape}")
    return FeatureVector(image_id, handle.weights_fingerprint, values)


@dataclass
class FeatureTable:
    image_ids: list
    values: np.ndarray
    fingerprint: str = ""
    region: str = ""
    skipped: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.image_ids)

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        index = {i: n for n, i in enumerate(self.image_ids)}
        return self.values[[index[i] for i in ids]]

    def save(self, path) -> None:
        """CSV: image_id then f0..f2047; a ``.meta.json`` sidecar keeps provenance."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["image_id", *(f"f{i}" for i in range(self.values.shape[1] if len(self) else FEATURE_DIM))])
            for image_id, row in zip(self.image_ids, self.values):
                writer.writerow([image_id, *(f"{v:.9g}" for v in row)])
        meta = {"fingerprint": self.fingerprint, "region": self.region,
                "skipped": self.skipped, "failures": self.failures, "rows": len(self)}
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureTable":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            ids, rows = [], []
            for row in reader:
                ids.append(row[0])
                rows.append([float(v) for v in row[1:]])
        values = np.asarray(rows, dtype=np.float32).reshape(len(ids), len(header) - 1)
        meta_path = Path(str(path) + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(ids, values, meta.get("fingerprint", ""), meta.get("region", ""),
                   meta.get("skipped", []), meta.get("failures", []))


def extract_batch(handle: BackboneHandle, records: Sequence, region: str, data_root) -> FeatureTable:
    """Features for the face or body crop of every eligible record.

    Records without the requested box are listed in ``skipped``; records
    whose image fails to load or crop are listed in ``failures``.
    """
    if region not in ("face", "body"):
        raise ValueError("region must be 'face' or 'body'")
    data_root = Path(data_root)
    ids, rows, skipped, failures = [], [], [], []
    cache: dict = {}
    for r in records:
        box = r.face_box if region == "face" else r.body_box
        if box is None:
            skipped.append(r.image_id)
            continue
        try:
            if r.image_path not in cache:
                cache.clear()
                cache[r.image_path] = load_image(data_root / r.image_path)
            crop = crop_region(cache[r.image_path], box)
            rows.append(extract(handle, crop, r.image_id).values)
            ids.append(r.image_id)
        except Exception as exc:  # per-record isolation
            log.warning("feature extraction failed for %s: %s", r.image_id, exc)
            failures.append({"image_id": r.image_id, "error": f"{type(exc).__name__}: {exc}"})
    values = np.stack(rows) if rows else np.zeros((0, FEATURE_DIM), dtype=np.float32)
    return FeatureTable(ids, values, handle.weights_fingerprint, region, skipped, failures)
