"""Class activation maps for the fine-tuned sigmoid-head models."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data_model import save_image
from .errors import ArchitectureMismatch
from .finetune import FineTunedModel, Item, load_item_image, predict_class

log = logging.getLogger(__name__)

COLORMAP = "viridis"
OVERLAY_ALPHA = 0.4


@dataclass
class ActivationMap:
    class_index: int
    grid: np.ndarray        # h' x w' at the last conv resolution, unnormalized
    upsampled: np.ndarray   # H x W, bilinear resize of grid to the input image
    image_id: str = ""
    logit: float = float("nan")
    bias: float = float("nan")


def _check_architecture(model: FineTunedModel) -> None:
    net = model.net
    head = getattr(net, "head", None)
    if not isinstance(head, torch.nn.Linear) or not hasattr(net, "feature_maps"):
        raise ArchitectureMismatch("CAM needs conv feature maps pooled straight into a linear head")


def cam_from_maps(maps: torch.Tensor, weights: torch.Tensor) -> np.ndarray:
    """sum_k weights[k] * maps[k] over a K x h x w stack, in float64."""
    return torch.einsum("k,khw->hw", weights.double(), maps.double()).numpy()


def compute_cam(model: FineTunedModel, image: np.ndarray, class_index: int, image_id: str = "") -> ActivationMap:
    """Weight the last conv feature maps by the head row of ``class_index``.

    The spatial mean of the grid equals the class logit minus the head bias.
    """
    _check_architecture(model)
    net = model.net
    if not 0 <= class_index < net.head.out_features:
        raise IndexError(f"class index {class_index} out of range")
    net.eval()
    with torch.no_grad():
        maps = net.feature_maps(model.tensor(image).unsqueeze(0))[0]
        if maps.shape[0] != net.head.in_features:
            raise ArchitectureMismatch(
                f"{maps.shape[0]} feature maps vs head input {net.head.in_features}")
        logit = float(net.head(maps.mean(dim=(1, 2)))[class_index])
    grid = cam_from_maps(maps, net.head.weight[class_index].detach())
    h, w = image.shape[:2]
    upsampled = F.interpolate(torch.from_numpy(grid)[None, None], size=(h, w), mode="bilinear",
                              align_corners=False)[0, 0].numpy()
    return ActivationMap(class_index, grid, upsampled, image_id, logit,
                         float(net.head.bias[class_index].detach()))


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def overlay(cam: ActivationMap, image: np.ndarray, alpha: float = OVERLAY_ALPHA,
            colormap: str = COLORMAP) -> np.ndarray:
    """Blend the colour-mapped, min-max normalized CAM over ``image``."""
    from matplotlib import colormaps

    if cam.upsampled.shape != image.shape[:2]:
        raise ValueError(f"map {cam.upsampled.shape} not aligned with image {image.shape[:2]}")
    heat = colormaps[colormap](normalize(cam.upsampled))[..., :3] * 255.0
    out = (1.0 - alpha) * image.astype(np.float64) + alpha * heat
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def write_grid(grid: np.ndarray, path) -> None:
    np.savetxt(path, grid, delimiter=",", fmt="%.17g")


def read_grid(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


INDEX_HEADER = ("image_id", "true_class", "predicted_class", "correct", "class_index", "cam_path", "grid_path")


def batch_cams(model: FineTunedModel, items: Sequence[Item], out_dir, only_correct: bool = True) -> list:
    """CAMs of the predicted class for every item (or only the correct ones).

    Writes ``<image_id>_cam.png``, ``<image_id>_grid.csv`` and ``index.csv``
    into ``out_dir``; returns the index rows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, failures = [], []
    for item in items:
        try:
            image = load_item_image(item)
            scores = model.scores([image])
            predicted = int(predict_class(scores)[0])
            correct = predicted == item.label
            if only_correct and not correct:
                continue
            cam = compute_cam(model, image, predicted, item.image_id)
            cam_path, grid_path = f"{item.image_id}_cam.png", f"{item.image_id}_grid.csv"
            save_image(overlay(cam, image), out_dir / cam_path)
            write_grid(cam.grid, out_dir / grid_path)
            rows.append({
                "image_id": item.image_id,
                "true_class": model.class_names[item.label],
                "predicted_class": model.class_names[predicted],
                "correct": int(correct),
                "class_index": predicted,
                "cam_path": cam_path,
                "grid_path": grid_path,
            })
        except Exception as exc:  # per-record isolation
            log.warning("CAM failed for %s: %s", item.image_id, exc)
            failures.append({"image_id": item.image_id, "error": f"{type(exc).__name__}: {exc}"})

    with open(out_dir / "index.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=INDEX_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    meta = {"colormap": COLORMAP, "alpha": OVERLAY_ALPHA, "normalization": "per-image min-max",
            "upsampling": "bilinear", "only_correct": only_correct, "failures": failures}
    (out_dir / "cam_meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return rows
