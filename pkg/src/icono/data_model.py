"""Corpus contract: manifests, bounding boxes, crops and the train/test split."""
from __future__ import annotations

import csv
import json
import os
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    BadLabel,
    BoxOutOfBounds,
    DuplicateImageId,
    InsufficientClassCount,
    ManifestError,
    MissingColumn,
    UndecodableImage,
)

CHARACTERS = ("Mary", "Gabriel")
GENDERS = ("female", "male")

ANNOTATED_HEADER = (
    "image_id", "image_path", "character",
    "body_x", "body_y", "body_w", "body_h",
    "face_x", "face_y", "face_w", "face_h",
)
CONTENT_HEADER = ("image_id", "image_path", "gender")

DATA_ROOT_ENV = "ICONO_DATA_ROOT"

PathLike = Union[str, os.PathLike]


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def check(self, width: int | None = None, height: int | None = None) -> None:
        """Raise BoxOutOfBounds unless the box is non-empty and inside a width x height image."""
        if self.w <= 0 or self.h <= 0:
            raise BoxOutOfBounds(f"box {self} has non-positive size")
        if self.x < 0 or self.y < 0:
            raise BoxOutOfBounds(f"box {self} has negative origin")
        if width is not None and self.x + self.w > width:
            raise BoxOutOfBounds(f"box {self} exceeds image width {width}")
        if height is not None and self.y + self.h > height:
            raise BoxOutOfBounds(f"box {self} exceeds image height {height}")

    def offset(self, dx: int, dy: int) -> "BoundingBox":
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)


@dataclass(frozen=True)
class AnnotatedRecord:
    image_id: str
    image_path: str
    character: str
    body_box: BoundingBox
    face_box: Optional[BoundingBox] = None

    @property
    def label(self) -> str:
        return self.character


@dataclass(frozen=True)
class ContentRecord:
    image_id: str
    image_path: str
    gender: str

    @property
    def label(self) -> str:
        return self.gender


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: frozenset
    test_ids: frozenset
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "train_ids": sorted(self.train_ids), "test_ids": sorted(self.test_ids)},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        raw = json.loads(text)
        return cls(frozenset(raw["train_ids"]), frozenset(raw["test_ids"]), int(raw["seed"]))

    def save(self, path: PathLike) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: PathLike) -> "SplitAssignment":
        return cls.from_json(Path(path).read_text())


def resolve_data_root(flag: Optional[PathLike] = None) -> Optional[Path]:
    """``--data-root`` wins over ``ICONO_DATA_ROOT``; None when neither is set."""
    if flag:
        return Path(flag)
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else None


def load_image(path: PathLike) -> np.ndarray:
    """Decode an image file into an RGB uint8 array of shape (H, W, 3)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB")).copy()
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise UndecodableImage(f"cannot decode {path}: {exc}") from exc


def save_image(image: np.ndarray, path: PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def crop_region(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Return the (box.h, box.w) subwindow of ``image`` anchored at (box.x, box.y)."""
    height, width = image.shape[:2]
    box.check(width, height)
    return image[box.y:box.y + box.h, box.x:box.x + box.w].copy()


# -- manifests ------------------------------------------------------------

def _parse_int(value: str, column: str, row: int) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ManifestError(f"column {column!r} is not an integer: {value!r}", row) from None


def _parse_box(row: dict, prefix: str, line: int) -> Optional[BoundingBox]:
    cells = [row.get(f"{prefix}_{k}", "") for k in "xywh"]
    cells = [c.strip() if c is not None else "" for c in cells]
    if all(c == "" for c in cells):
        return None
    if any(c == "" for c in cells):
        raise ManifestError(f"{prefix} box is partially filled", line)
    return BoundingBox(*(_parse_int(c, f"{prefix}_{k}", line) for c, k in zip(cells, "xywh")))


def _image_size(data_root: Optional[Path], image_path: str, cache: dict) -> Optional[tuple]:
    if data_root is None:
        return None
    full = data_root / image_path
    if full not in cache:
        try:
            with Image.open(full) as im:
                cache[full] = im.size
        except (OSError, UnidentifiedImageError):
            cache[full] = None
    return cache[full]


def load_manifest(
    path: PathLike,
    kind: str = "annotated",
    data_root: Optional[PathLike] = None,
) -> list:
    """Read an annotated or content manifest CSV into records.

    All row problems are collected before raising; the raised error is the
    first one found and its ``errors`` attribute lists every problem. When
    ``data_root`` is given, boxes are also checked against the image size.
    """
    if kind not in ("annotated", "content"):
        raise ValueError(f"unknown manifest kind {kind!r}")
    header = ANNOTATED_HEADER if kind == "annotated" else CONTENT_HEADER
    root = Path(data_root) if data_root is not None else None

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames or []
        missing = [c for c in header if c not in columns]
        if missing:
            raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)

    records, problems, seen, sizes = [], [], set(), {}
    for offset, row in enumerate(rows):
        line = offset + 2
        try:
            image_id = (row["image_id"] or "").strip()
            if not image_id:
                raise ManifestError("empty image_id", line)
            if image_id in seen:
                raise DuplicateImageId(f"duplicate image_id {image_id!r}", line)
            seen.add(image_id)
            image_path = (row["image_path"] or "").strip()
            if kind == "content":
                gender = (row["gender"] or "").strip()
                if gender not in GENDERS:
                    raise BadLabel(f"gender {gender!r} not in {GENDERS}", line)
                records.append(ContentRecord(image_id, image_path, gender))
                continue
            character = (row["character"] or "").strip()
            if character not in CHARACTERS:
                raise BadLabel(f"character {character!r} not in {CHARACTERS}", line)
            body = _parse_box(row, "body", line)
            if body is None:
                raise ManifestError("body box is required", line)
            face = _parse_box(row, "face", line)
            size = _image_size(root, image_path, sizes)
            for box in (body, face):
                if box is None:
                    continue
                try:
                    box.check(*(size or (None, None)))
                except BoxOutOfBounds as exc:
                    raise BoxOutOfBounds(str(exc), line) from None
            records.append(AnnotatedRecord(image_id, image_path, character, body, face))
        except ManifestError as exc:
            problems.append(exc)

    if problems:
        first = problems[0]
        first.errors = problems
        raise first
    return records


def write_manifest(records: Sequence, path: PathLike, kind: Optional[str] = None) -> None:
    """Write records back out under the matching CSV header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if kind is None:
        kind = "annotated" if records and isinstance(records[0], AnnotatedRecord) else "content"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ANNOTATED_HEADER if kind == "annotated" else CONTENT_HEADER)
        for r in records:
            if isinstance(r, AnnotatedRecord):
                b, f = r.body_box, r.face_box
                face = [f.x, f.y, f.w, f.h] if f is not None else ["", "", "", ""]
                writer.writerow([r.image_id, r.image_path, r.character, b.x, b.y, b.w, b.h, *face])
            else:
                writer.writerow([r.image_id, r.image_path, r.gender])


def class_histogram(records: Iterable) -> dict:
    hist: dict = {}
    for r in records:
        hist[r.label] = hist.get(r.label, 0) + 1
    return hist


def split_dataset(records: Sequence, test_per_class: int, seed: int) -> SplitAssignment:
    """Hold out exactly ``test_per_class`` records of each class for testing.

    Sampling is uniform within each class; ids are sorted first so the
    result depends only on the set of records, the count and the seed.
    """
    if test_per_class < 0:
        raise ValueError("test_per_class must be non-negative")
    by_class: dict = {}
    for r in records:
        by_class.setdefault(r.label, []).append(r.image_id)
    rng = random.Random(seed)
    test: set = set()
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        if len(ids) < test_per_class:
            raise InsufficientClassCount(
                f"class {label!r} has {len(ids)} records, {test_per_class} requested for test"
            )
        test.update(rng.sample(ids, test_per_class))
    all_ids = {r.image_id for r in records}
    return SplitAssignment(frozenset(all_ids - test), frozenset(test), seed)


def select(records: Iterable, ids: Iterable) -> list:
    """Records whose image_id is in ``ids``, in their original order."""
    wanted = set(ids)
    return [r for r in records if r.image_id in wanted]
