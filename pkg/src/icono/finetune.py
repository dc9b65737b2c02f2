"""Fine-tuning a face-identification ResNet-50 with a two-output sigmoid head.

Three pipelines share one trainer:

* A: annunciation body crops (Mary / Gabriel);
* B: the styled surrogate dataset (female / male);
* C: B's weights, then A's data, keeping B's head as initialization.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from sklearn.model_selection import train_test_split

from .data_model import CHARACTERS, GENDERS, crop_region, load_image
from .errors import ArchitectureMismatch, Divergence, ProvenanceError, WeightMismatch
from .feature_extractor import ARCHITECTURE, FEATURE_DIM, BackboneHandle, build_trunk, preprocess

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "icono-bundle/1"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    val_fraction: float = 0.1
    early_stop_tolerance: float = 0.05
    early_stop_patience: int = 10
    max_epochs: int = 50
    shear_range: float = 0.2
    shift_range: float = 0.1
    rotation_range: float = 15.0
    horizontal_flip: bool = True
    momentum: float = 0.9
    freeze_backbone: bool = False
    seed: int = 0

    def problems(self) -> list:
        out = []
        if not self.learning_rate > 0:
            out.append("learning_rate: must be > 0")
        if self.batch_size < 1:
            out.append("batch_size: must be >= 1")
        if not 0 < self.val_fraction < 1:
            out.append("val_fraction: must lie in (0, 1)")
        if self.early_stop_tolerance < 0:
            out.append("early_stop_tolerance: must be >= 0")
        if self.early_stop_patience < 1:
            out.append("early_stop_patience: must be >= 1")
        if self.max_epochs < 1:
            out.append("max_epochs: must be >= 1")
        for name in ("shear_range", "shift_range", "rotation_range"):
            if getattr(self, name) < 0:
                out.append(f"{name}: must be >= 0")
        if not 0 <= self.momentum < 1:
            out.append("momentum: must lie in [0, 1)")
        return out


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


# -- early stopping --------------------------------------------------------

class EarlyStopper:
    """Halt after ``patience`` consecutive epochs that fail to beat the best
    validation loss so far by more than ``tolerance``."""

    def __init__(self, tolerance: float, patience: int):
        self.tolerance = tolerance
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        if val_loss < self.best - self.tolerance:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def early_stop_trace(val_losses: Sequence[float], tolerance: float, patience: int) -> tuple:
    """Replay the stop rule over a loss sequence (epochs are 1-based).

    Returns ``(halt_epoch, best_epoch)``. ``halt_epoch`` is None when the
    sequence runs out first; ``best_epoch`` is the first minimum among the
    epochs actually run.
    """
    stopper = EarlyStopper(tolerance, patience)
    halt = None
    run = []
    for epoch, loss in enumerate(val_losses, 1):
        run.append(loss)
        if stopper.update(loss):
            halt = epoch
            break
    if not run:
        raise ValueError("empty loss sequence")
    return halt, int(np.argmin(run)) + 1


# -- model -----------------------------------------------------------------

class CharacterNet(torch.nn.Module):
    """ResNet-50 trunk, global average pooling, linear head, sigmoid."""

    def __init__(self, trunk: torch.nn.Module, n_outputs: int = 2):
        super().__init__()
        self.trunk = trunk
        self.head = torch.nn.Linear(FEATURE_DIM, n_outputs)

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        t = self.trunk
        x = t.maxpool(t.relu(t.bn1(t.conv1(x))))
        return t.layer4(t.layer3(t.layer2(t.layer1(x))))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.feature_maps(x).mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # float64 keeps saturated outputs strictly inside (0, 1)
        return torch.sigmoid(self.logits(x).double())


def predict_class(scores) -> np.ndarray:
    """Index of the larger output per row; ties go to index 0."""
    return np.argmax(np.atleast_2d(np.asarray(scores)), axis=1)


@dataclass
class FineTunedModel:
    net: CharacterNet = field(repr=False)
    class_names: tuple
    backbone_fingerprint: str
    image_size: int = 224
    channel_means: tuple = ()
    pretrain_source: str = "face_identification"
    provenance: list = field(default_factory=list)
    architecture: str = ARCHITECTURE

    @property
    def pipeline(self) -> Optional[str]:
        return self.provenance[-1]["pipeline"] if self.provenance else None

    @property
    def epoch_logs(self) -> list:
        if not self.provenance:
            return []
        return [EpochLog(**e) for e in self.provenance[-1]["epochs"]]

    def tensor(self, image: np.ndarray) -> torch.Tensor:
        return preprocess(image, self.image_size, self.channel_means)

    def scores(self, images: Sequence[np.ndarray]) -> np.ndarray:
        self.net.eval()
        with torch.no_grad():
            x = torch.stack([self.tensor(im) for im in images])
            return self.net(x).numpy()

    def predict(self, images: Sequence[np.ndarray]) -> np.ndarray:
        return predict_class(self.scores(images))

    def save(self, path) -> None:
        """Single-file bundle: weights, class names, provenance and preprocessing."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format": BUNDLE_FORMAT,
                "state_dict": self.net.state_dict(),
                "class_names": list(self.class_names),
                "backbone_fingerprint": self.backbone_fingerprint,
                "image_size": self.image_size,
                "channel_means": list(self.channel_means),
                "pretrain_source": self.pretrain_source,
                "provenance": self.provenance,
                "architecture": self.architecture,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "FineTunedModel":
        try:
            raw = torch.load(path, map_location="cpu", weights_only=True)
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise WeightMismatch(f"cannot read bundle {path}: {exc}") from exc
        if not isinstance(raw, dict) or raw.get("format") != BUNDLE_FORMAT:
            raise WeightMismatch(f"{path} is not a model bundle")
        if raw.get("architecture") != ARCHITECTURE:
            raise ArchitectureMismatch(f"bundle architecture {raw.get('architecture')!r}")
        net = CharacterNet(build_trunk(), len(raw["class_names"]))
        net.load_state_dict(raw["state_dict"])
        net.eval()
        return cls(net, tuple(raw["class_names"]), raw["backbone_fingerprint"], raw["image_size"],
                   tuple(raw["channel_means"]), raw["pretrain_source"], raw["provenance"], raw["architecture"])


def build_head(handle: BackboneHandle, class_names: Sequence[str], seed: int = 0) -> FineTunedModel:
    """Attach a fresh 2-output sigmoid head to a copy of the backbone trunk."""
    class_names = tuple(class_names)
    if len(class_names) != 2:
        raise ValueError("the head has exactly two outputs")
    net = CharacterNet(copy.deepcopy(handle.model), len(class_names))
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(FEATURE_DIM)
    with torch.no_grad():
        net.head.weight.uniform_(-bound, bound, generator=gen)
        net.head.bias.uniform_(-bound, bound, generator=gen)
    net.eval()
    return FineTunedModel(net, class_names, handle.weights_fingerprint, handle.image_size,
                          tuple(handle.channel_means), handle.pretrain_source)


# -- augmentation ----------------------------------------------------------

def augment(image: np.ndarray, config: TrainConfig, seed) -> np.ndarray:
    """One random flip/rotation/shear/shift, drawn from ``seed``.

    Rotation is in degrees, shear is a shear factor and shift a fraction
    of the image size; all are sampled uniformly in [-range, range].
    Edges are filled with the nearest pixel.
    """
    rng = np.random.default_rng(seed)
    flip_draw, rot_u, shear_u, tx_u, ty_u = rng.random(5)
    out = image
    if config.horizontal_flip and flip_draw < 0.5:
        out = out[:, ::-1]
    angle = math.radians(config.rotation_range * (2 * rot_u - 1))
    shear = config.shear_range * (2 * shear_u - 1)
    h, w = out.shape[:2]
    tx = config.shift_range * w * (2 * tx_u - 1)
    ty = config.shift_range * h * (2 * ty_u - 1)
    if angle == 0 and shear == 0 and tx == 0 and ty == 0:
        return np.ascontiguousarray(out)

    # forward map in (row, col): p' = A (p - c) + c + t; sample input at A^-1 (p' - c - t) + c
    cos, sin = math.cos(angle), math.sin(angle)
    rot = np.array([[cos, -sin], [sin, cos]])
    shr = np.array([[1.0, 0.0], [shear, 1.0]])
    inv = np.linalg.inv(rot @ shr)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([ty, tx])
    offset = centre - inv @ (centre + shift)
    src = out.astype(np.float32)
    channels = [ndimage.affine_transform(src[..., c], inv, offset=offset, order=1, mode="nearest")
                for c in range(src.shape[2])]
    return np.clip(np.rint(np.stack(channels, axis=-1)), 0, 255).astype(np.uint8)


# -- data ------------------------------------------------------------------

@dataclass(frozen=True)
class Item:
    """One training/evaluation image: file, optional crop box, class index."""

    path: str
    box: object
    label: int
    image_id: str = ""


def annotated_items(records: Sequence, data_root, region: str = "body") -> list:
    root = Path(data_root)
    out = []
    for r in records:
        box = r.body_box if region == "body" else r.face_box
        out.append(Item(str(root / r.image_path), box, CHARACTERS.index(r.character), r.image_id))
    return out


def styled_items(samples: Sequence, styled_root) -> list:
    root = Path(styled_root)
    return [Item(str(root / s.image_path), None, GENDERS.index(s.gender), s.image_id) for s in samples]


def load_item_image(item: Item) -> np.ndarray:
    image = load_image(item.path)
    return crop_region(image, item.box) if item.box is not None else image


class ItemDataset(torch.utils.data.Dataset):
    def __init__(self, items, image_size: int, channel_means, config: Optional[TrainConfig] = None,
                 seed: int = 0, cache: bool = True):
        self.items = list(items)
        self.image_size = image_size
        self.channel_means = channel_means
        self.config = config
        self.seed = seed
        self.epoch = 0
        self._cache: Optional[dict] = {} if cache else None

    def __len__(self) -> int:
        return len(self.items)

    def _base(self, i: int) -> np.ndarray:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        image = load_item_image(self.items[i])
        image = np.asarray(Image.fromarray(image).resize((self.image_size, self.image_size), Image.BILINEAR))
        if self._cache is not None:
            self._cache[i] = image
        return image

    def __getitem__(self, i: int):
        image = self._base(i)
        if self.config is not None:
            image = augment(image, self.config, (self.seed, self.epoch, i))
        return preprocess(image, self.image_size, self.channel_means), self.items[i].label


def _loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy summed over both sigmoid outputs, averaged over the batch."""
    target = F.one_hot(labels, logits.shape[1]).float()
    return F.binary_cross_entropy_with_logits(logits, target, reduction="none").sum(dim=1).mean()


def _evaluate(net: CharacterNet, loader) -> tuple:
    net.eval()
    total, loss_sum, correct = 0, 0.0, 0
    with torch.no_grad():
        for x, y in loader:
            logits = net.logits(x)
            loss_sum += float(_loss(logits, y)) * len(y)
            correct += int((torch.from_numpy(predict_class(torch.sigmoid(logits).numpy())) == y).sum())
            total += len(y)
    return loss_sum / total, correct / total


def _set_train_mode(net: CharacterNet, freeze: bool) -> None:
    net.train()
    if freeze:
        net.trunk.eval()
        net.trunk.layer4.train()


def _trainable(net: CharacterNet, freeze: bool) -> list:
    for p in net.parameters():
        p.requires_grad = not freeze
    if freeze:
        for p in list(net.trunk.layer4.parameters()) + list(net.head.parameters()):
            p.requires_grad = True
    return [p for p in net.parameters() if p.requires_grad]


def carve_validation(items: Sequence[Item], val_fraction: float, seed: int) -> tuple:
    """Stratified random train/validation split of ``items``."""
    labels = [it.label for it in items]
    n_val = max(1, int(round(len(items) * val_fraction)))
    stratify = labels if min(np.bincount(labels, minlength=2)) >= 2 and n_val >= 2 else None
    train, val = train_test_split(list(items), test_size=n_val, random_state=seed, stratify=stratify)
    return train, val


def train(model: FineTunedModel, items: Sequence[Item], config: TrainConfig, pipeline: str = "",
          progress=None) -> tuple:
    """Fine-tune ``model`` in place on ``items``.

    A validation share is carved off under the config seed. Training stops
    on the early-stop rule or at ``max_epochs``, and the weights of the
    lowest-validation-loss epoch are restored. Returns ``(model, logs)``.
    """
    problems = config.problems()
    if problems:
        raise ValueError("; ".join(problems))
    if len({it.label for it in items}) < 2:
        raise ValueError("training data must contain both classes")
    torch.manual_seed(config.seed)
    train_items, val_items = carve_validation(items, config.val_fraction, config.seed)
    train_ds = ItemDataset(train_items, model.image_size, model.channel_means, config, config.seed)
    val_ds = ItemDataset(val_items, model.image_size, model.channel_means)
    gen = torch.Generator().manual_seed(config.seed)
    train_loader = torch.utils.data.DataLoader(train_ds, batch_size=config.batch_size, shuffle=True, generator=gen)
    val_loader = torch.utils.data.DataLoader(val_ds, batch_size=config.batch_size, shuffle=False)

    net = model.net
    params = _trainable(net, config.freeze_backbone)
    optimizer = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    stopper = EarlyStopper(config.early_stop_tolerance, config.early_stop_patience)
    logs: list = []
    best_loss, best_state, best_epoch, halt_epoch = math.inf, None, 0, None

    for epoch in range(1, config.max_epochs + 1):
        train_ds.epoch = epoch
        _set_train_mode(net, config.freeze_backbone)
        seen, loss_sum, correct = 0, 0.0, 0
        for x, y in train_loader:
            optimizer.zero_grad()
            logits = net.logits(x)
            loss = _loss(logits, y)
            if not torch.isfinite(loss):
                raise Divergence(f"non-finite training loss at epoch {epoch}", logs)
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * len(y)
            correct += int((logits.argmax(dim=1) == y).sum())
            seen += len(y)
        val_loss, val_acc = _evaluate(net, val_loader)
        if not math.isfinite(val_loss):
            raise Divergence(f"non-finite validation loss at epoch {epoch}", logs)
        entry = EpochLog(epoch, loss_sum / seen, correct / seen, val_loss, val_acc)
        logs.append(entry)
        if progress is not None:
            progress(entry)
        log.info("%s epoch %d: train %.4f/%.3f val %.4f/%.3f", pipeline or "train", epoch,
                 entry.train_loss, entry.train_acc, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(net.state_dict())
        if stopper.update(val_loss):
            halt_epoch = epoch
            break

    for p in net.parameters():
        p.requires_grad = True
    net.load_state_dict(best_state)
    net.eval()
    model.provenance.append({
        "pipeline": pipeline,
        "class_names": list(model.class_names),
        "config": asdict(config),
        "epochs": [asdict(e) for e in logs],
        "best_epoch": best_epoch,
        "halt_epoch": halt_epoch,
        "train_size": len(train_items),
        "val_size": len(val_items),
        "val_ids": [it.image_id for it in val_items],
    })
    return model, logs


def validation_loss(model: FineTunedModel, items: Sequence[Item], batch_size: int = 32) -> float:
    loader = torch.utils.data.DataLoader(ItemDataset(items, model.image_size, model.channel_means),
                                         batch_size=batch_size, shuffle=False)
    return _evaluate(model.net, loader)[0]


# -- pipelines ---------------------------------------------------------------

def pipeline_A(bodies_train: Sequence, config: TrainConfig, handle: BackboneHandle, data_root,
               progress=None) -> FineTunedModel:
    """Fine-tune the face-identification backbone on Mary/Gabriel body crops."""
    model = build_head(handle, CHARACTERS, config.seed)
    train(model, annotated_items(bodies_train, data_root), config, "A", progress)
    return model


def pipeline_B(styled_train: Sequence, config: TrainConfig, handle: BackboneHandle, styled_root,
               progress=None) -> FineTunedModel:
    """Fine-tune the face-identification backbone on the styled female/male set."""
    model = build_head(handle, GENDERS, config.seed)
    train(model, styled_items(styled_train, styled_root), config, "B", progress)
    return model


def pipeline_C(model_b: FineTunedModel, bodies_train: Sequence, config: TrainConfig, data_root,
               progress=None) -> FineTunedModel:
    """Continue from pipeline B's weights (head included) on Mary/Gabriel body crops.

    Output 0 (female) becomes Mary and output 1 (male) becomes Gabriel.
    """
    if model_b.pipeline != "B":
        raise ProvenanceError(f"pipeline C needs a pipeline-B model, got {model_b.pipeline!r}")
    model = FineTunedModel(copy.deepcopy(model_b.net), CHARACTERS, model_b.backbone_fingerprint,
                           model_b.image_size, model_b.channel_means, model_b.pretrain_source,
                           copy.deepcopy(model_b.provenance))
    train(model, annotated_items(bodies_train, data_root), config, "C", progress)
    return model


def predict_items(model: FineTunedModel, items: Sequence[Item], batch_size: int = 32) -> tuple:
    """(predicted indices, sigmoid scores) for items, in order."""
    ds = ItemDataset(items, model.image_size, model.channel_means, cache=False)
    loader = torch.utils.data.DataLoader(ds, batch_size=batch_size, shuffle=False)
    model.net.eval()
    scores = []
    with torch.no_grad():
        for x, _ in loader:
            scores.append(model.net(x).numpy())
    scores = np.concatenate(scores) if scores else np.zeros((0, len(model.class_names)))
    return predict_class(scores) if len(scores) else np.zeros(0, dtype=int), scores


def write_epoch_logs(logs: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for e in logs:
            writer.writerow([e.epoch, repr(e.train_loss), repr(e.train_acc), repr(e.val_loss), repr(e.val_acc)])


def read_epoch_logs(path) -> list:
    with open(path, newline="") as fh:
        return [EpochLog(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]),
                         float(r["val_loss"]), float(r["val_acc"])) for r in csv.DictReader(fh)]
