"""Seeded synthetic fixation dataset (SynSal) used in place of real eye-tracking data.

Each sample is a 64x64 RGB image with a low-frequency noise background and
one bright foreground shape whose identity is the class label. The
fixation map is the shape's support; the density map is that mask blurred
with a sigma=4 Gaussian and peak-normalised.

Layout under ``root``::

    images/NNNN.ppm  fixations/NNNN.pgm  density/NNNN.pgm
    labels.csv       (header "file,class")
    manifest.json    (split, seed, class count)
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .errors import DataError, FormatError, InvalidConfig, IoError
from .imaging import gaussian_blur, load_pgm, load_ppm, resize_bilinear, save_pgm, save_ppm

SHAPES = ("disk", "square", "triangle", "cross")
SPLITS = {"train": 0, "eval": 1}
IMAGE_SIZE = 64
DENSITY_SIGMA = 4.0
SHAPE_RADIUS = (12.0, 18.0)
CENTRE_JITTER = 6.0

SYNSAL_V1 = {"seed": 17, "class_count": 4, "train": 200, "eval": 50}


@dataclass(frozen=True)
class DatasetRecord:
    file: str
    label: int
    image: Path
    fixation: Path
    density: Path

    @property
    def image_id(self) -> str:
        return Path(self.file).stem

    def load_image(self) -> np.ndarray:
        return load_ppm(self.image)

    def load_fixations(self) -> np.ndarray:
        return load_pgm(self.fixation) > 0

    def load_density(self) -> np.ndarray:
        return load_pgm(self.density)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    records: Tuple[DatasetRecord, ...]
    split: str
    seed: int
    class_count: int

    def __len__(self):
        return len(self.records)


def shape_mask(kind: str, cy: float, cx: float, r: float, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        half = 0.85 * r
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if kind == "triangle":
        # upward-pointing: apex at (cy - r), base at (cy + r/2)
        base = dy <= 0.5 * r
        slope = np.sqrt(3.0)
        left = dy >= -r + slope * dx
        right = dy >= -r - slope * dx
        return base & left & right
    if kind == "cross":
        arm = r / 3.0
        horiz = (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        vert = (np.abs(dx) <= arm) & (np.abs(dy) <= r)
        return horiz | vert
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng) -> np.ndarray:
    coarse = rng.uniform(0.1, 0.6, size=(3, 4, 4))
    fine = rng.uniform(-0.12, 0.12, size=(3, 9, 9))
    bg = resize_bilinear(coarse, IMAGE_SIZE, IMAGE_SIZE) + resize_bilinear(fine, IMAGE_SIZE, IMAGE_SIZE)
    return np.clip(bg, 0.0, 1.0)


def render_sample(rng, label: int):
    """Return ``(image [3,H,W] in [0,1], fixation mask [H,W] bool)``."""
    image = _background(rng)
    r = rng.uniform(*SHAPE_RADIUS)
    cy, cx = IMAGE_SIZE / 2 + rng.uniform(-CENTRE_JITTER, CENTRE_JITTER, size=2)
    mask = shape_mask(SHAPES[label], cy, cx, r)
    colour = rng.uniform(0.8, 1.0, size=3)
    image = np.where(mask, colour[:, None, None], image)
    return image, mask


def density_from_fixations(mask) -> np.ndarray:
    density = gaussian_blur(np.asarray(mask, dtype=np.float64), DENSITY_SIGMA)
    return density / density.max()


def _write_text(path: Path, text: str):
    try:
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def generate_synthetic_dataset(out_dir, image_count: int, class_count: int, seed: int, split: str = "train"):
    """Write a dataset split and return its manifest.

    Output bytes are a pure function of ``(image_count, class_count, seed,
    split)``; the split is mixed into the seed so a train and an eval split
    generated from the same seed do not share images.
    """
    if not 1 <= class_count <= len(SHAPES):
        raise InvalidConfig(f"class_count must be in [1, {len(SHAPES)}]")
    if image_count < 1:
        raise InvalidConfig("image_count must be positive")
    if split not in SPLITS:
        raise InvalidConfig(f"split must be one of {sorted(SPLITS)}")
    root = Path(out_dir)
    try:
        for sub in ("images", "fixations", "density"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create dataset directory {root}: {exc.strerror}") from exc

    rng = np.random.default_rng(np.random.SeedSequence([seed, SPLITS[split]]))
    labels = rng.permutation(np.arange(image_count) % class_count)
    rows = ["file,class"]
    for i, label in enumerate(labels):
        stem = f"{i:04d}"
        image, mask = render_sample(rng, int(label))
        save_ppm(image * 255.0, root / "images" / f"{stem}.ppm")
        save_pgm(mask * 255.0, root / "fixations" / f"{stem}.pgm")
        save_pgm(density_from_fixations(mask) * 255.0, root / "density" / f"{stem}.pgm")
        rows.append(f"{stem}.ppm,{int(label)}")
    _write_text(root / "labels.csv", "\n".join(rows) + "\n")
    meta = {
        "name": "SynSal",
        "split": split,
        "seed": seed,
        "class_count": class_count,
        "image_count": image_count,
    }
    _write_text(root / "manifest.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return load_dataset(root)


def generate_synsal_v1(root):
    """The reference benchmark: seed 17, 4 classes, 200 train / 50 eval images."""
    root = Path(root)
    cfg = SYNSAL_V1
    train = generate_synthetic_dataset(root / "train", cfg["train"], cfg["class_count"], cfg["seed"], "train")
    evaluation = generate_synthetic_dataset(root / "eval", cfg["eval"], cfg["class_count"], cfg["seed"], "eval")
    return train, evaluation


def load_dataset(root) -> DatasetManifest:
    root = Path(root)
    try:
        meta = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        with open(root / "labels.csv", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read dataset at {root}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest.json in {root}: {exc}") from exc
    if header != ["file", "class"]:
        raise DataError(f"{root / 'labels.csv'}: header must be 'file,class'")
    class_count = int(meta["class_count"])
    records: List[DatasetRecord] = []
    for line_no, row in enumerate(rows, start=2):
        if len(row) != 2:
            raise DataError(f"labels.csv line {line_no}: expected 2 fields")
        name, label = row[0], int(row[1])
        if not 0 <= label < class_count:
            raise DataError(f"labels.csv line {line_no}: class {label} outside [0, {class_count})")
        stem = Path(name).stem
        rec = DatasetRecord(
            file=name,
            label=label,
            image=root / "images" / name,
            fixation=root / "fixations" / f"{stem}.pgm",
            density=root / "density" / f"{stem}.pgm",
        )
        for path in (rec.image, rec.fixation, rec.density):
            if not path.is_file():
                raise DataError(f"missing dataset file {path}")
        records.append(rec)
    return DatasetManifest(root, tuple(records), meta["split"], int(meta["seed"]), class_count)


def load_split_arrays(manifest: DatasetManifest):
    """Stack every image of a split: ``(images [N,3,H,W], labels [N])``."""
    try:
        images = np.stack([rec.load_image() for rec in manifest.records])
    except (FormatError, IoError) as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise DataError(f"images in {manifest.root} differ in size") from exc
    labels = np.array([rec.label for rec in manifest.records], dtype=np.int64)
    return images, labels
