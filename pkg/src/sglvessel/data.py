"""Dataset ingestion and artifact persistence.

Expected directory layout::

    <root>/<dataset>/images/   raw fundus images (PNG/TIFF/GIF, lossless)
    <root>/<dataset>/labels/   binary vessel annotations
    <root>/<dataset>/masks/    optional field-of-view masks

Splits are fixed: DRIVE uses its published 20/20 split (ids 21-40 train,
1-20 test, or `training`/`test` filename tags); CHASE_DB1 takes the first
20 files in lexicographic order as training and the remaining 8 as test.

Intermediate artifacts (pseudo labels, erased labels, probability maps,
enhancement maps) are persisted under ``<store>/<run>/<kind>/<sample_id>.png``
with a JSON sidecar for metadata.  Probability maps are 16-bit grayscale
PNG (round trip error below 1/65535 per value); binary masks are 8-bit
{0,255} PNG and round-trip bit exactly.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DATASET_SHAPES = {
    # (height, width)
    "DRIVE": (584, 565),
    "CHASE_DB1": (960, 999),
}

MAP_KINDS = ("pseudo_label", "erased_label", "probability", "enhancement")

IMAGE_EXTENSIONS = {".png", ".tif", ".tiff", ".gif", ".ppm", ".bmp", ".jpg", ".jpeg"}


class DatasetError(Exception):
    """Missing files or integrity problems while loading a dataset."""


class StoreError(Exception):
    """Problems reading or writing the artifact store."""


@dataclass
class RetinalSample:
    """One fundus image with its ground-truth vessel annotation."""

    id: str
    image: np.ndarray  # H x W x 3 float in [0,1]
    label: np.ndarray  # H x W uint8 in {0,1}
    split: str  # "train" | "test"
    dataset: str  # "DRIVE" | "CHASE_DB1"
    fov_mask: np.ndarray | None = None  # H x W uint8 in {0,1}, optional


@dataclass
class StoredMap:
    """A persisted intermediate artifact tied to one sample."""

    sample_id: str
    kind: str  # one of MAP_KINDS
    data: np.ndarray  # H x W in [0,1], or H x W x 3 for enhancement
    meta: dict = field(default_factory=dict)


def _read_array(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def binarize_label(raw: np.ndarray) -> np.ndarray:
    """Threshold an annotation image at mid-gray to a {0,1} uint8 mask."""
    if raw.ndim == 3:
        raw = raw[..., 0]
    if raw.dtype == np.bool_:
        return raw.astype(np.uint8)
    limit = 0 if raw.max() <= 1 else 127
    return (raw > limit).astype(np.uint8)


def _normalize_image(raw: np.ndarray) -> np.ndarray:
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=-1)
    if raw.shape[-1] == 4:
        raw = raw[..., :3]
    scale = 255.0 if raw.dtype == np.uint8 else float(max(raw.max(), 1))
    return (raw.astype(np.float64) / scale).clip(0.0, 1.0)


def _numeric_id(stem: str) -> int | None:
    m = re.search(r"\d+", stem)
    return int(m.group()) if m else None


def _drive_split(stem: str) -> str:
    low = stem.lower()
    if "training" in low:
        return "train"
    if "test" in low:
        return "test"
    n = _numeric_id(stem)
    if n is None:
        raise DatasetError(f"cannot infer DRIVE split from filename {stem!r}")
    # DRIVE numbers the test half 1-20 and the training half 21-40.
    return "train" if n >= 21 else "test"


def _match_label(stem: str, labels: dict[str, Path]) -> Path | None:
    if stem in labels:
        return labels[stem]
    candidates = [p for s, p in labels.items() if s.startswith(stem) or stem.startswith(s)]
    if len(candidates) == 1:
        return candidates[0]
    # DRIVE pairs 21_training.tif with 21_manual1.gif: fall back to numeric id.
    n = _numeric_id(stem)
    if n is not None:
        by_num = [p for s, p in labels.items() if _numeric_id(s) == n]
        if len(by_num) == 1:
            return by_num[0]
    return None


def load_dataset(root: str | Path, name: str) -> list[RetinalSample]:
    """Load all samples of ``name`` from ``root`` with fixed split tags.

    Images are normalized to [0,1]; labels binarized at mid-gray.  Sample
    ordering is deterministic (sorted by image filename).
    """
    if name not in DATASET_SHAPES:
        raise DatasetError(f"unknown dataset {name!r}; expected one of {sorted(DATASET_SHAPES)}")
    base = Path(root) / name
    image_dir, label_dir, mask_dir = base / "images", base / "labels", base / "masks"
    if not image_dir.is_dir():
        raise DatasetError(f"missing image directory {image_dir}")
    if not label_dir.is_dir():
        raise DatasetError(f"missing label directory {label_dir}")

    image_paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not image_paths:
        raise DatasetError(f"no images found in {image_dir}")
    labels = {p.stem: p for p in label_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS}
    fovs = (
        {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS}
        if mask_dir.is_dir()
        else {}
    )

    samples = []
    for idx, img_path in enumerate(image_paths):
        stem = img_path.stem
        label_path = _match_label(stem, labels)
        if label_path is None:
            raise DatasetError(f"missing label for image {img_path.name}")
        image = _normalize_image(_read_array(img_path))
        label = binarize_label(_read_array(label_path))
        if image.shape[:2] != label.shape[:2]:
            raise DatasetError(
                f"size mismatch for {stem}: image {image.shape[:2]} vs label {label.shape[:2]}"
            )
        if name == "DRIVE":
            split = _drive_split(stem)
        else:
            split = "train" if idx < 20 else "test"
        fov_path = _match_label(stem, fovs) if fovs else None
        fov = binarize_label(_read_array(fov_path)) if fov_path else None
        samples.append(
            RetinalSample(id=stem, image=image, label=label, split=split, dataset=name, fov_mask=fov)
        )
    return samples


def train_test_split(samples: list[RetinalSample]) -> tuple[list[RetinalSample], list[RetinalSample]]:
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"]
    return train, test


class MapStore:
    """Filesystem store for intermediate maps, one run per subdirectory."""

    def __init__(self, root: str | Path, run: str = "default"):
        self.root = Path(root)
        self.run = run

    def _paths(self, sample_id: str, kind: str) -> tuple[Path, Path]:
        d = self.root / self.run / kind
        return d / f"{sample_id}.png", d / f"{sample_id}.json"

    def save(self, stored: StoredMap) -> Path:
        if stored.kind not in MAP_KINDS:
            raise StoreError(f"unknown map kind {stored.kind!r}")
        png_path, meta_path = self._paths(stored.sample_id, stored.kind)
        png_path.parent.mkdir(parents=True, exist_ok=True)
        data = np.asarray(stored.data)
        if stored.kind in ("erased_label",):
            img = Image.fromarray((data > 0).astype(np.uint8) * 255)
        elif stored.kind == "enhancement":
            img = Image.fromarray(np.round(data * 255.0).astype(np.uint8))
        else:  # probability-valued single channel, 16-bit
            img = Image.fromarray(np.round(data * 65535.0).astype(np.uint16))
        img.save(png_path)
        meta_path.write_text(json.dumps(stored.meta, indent=2, sort_keys=True))
        return png_path

    def load(self, sample_id: str, kind: str) -> StoredMap:
        png_path, meta_path = self._paths(sample_id, kind)
        if not png_path.exists():
            raise StoreError(f"no stored {kind} map for sample {sample_id!r} in run {self.run!r}")
        raw = _read_array(png_path)
        if kind == "erased_label":
            data = (raw > 127).astype(np.uint8)
        elif kind == "enhancement":
            data = raw.astype(np.float64) / 255.0
        else:
            data = raw.astype(np.float64) / 65535.0
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return StoredMap(sample_id=sample_id, kind=kind, data=data, meta=meta)

    def exists(self, sample_id: str, kind: str) -> bool:
        return self._paths(sample_id, kind)[0].exists()


def save_map(stored: StoredMap, store: str | Path, run: str = "default") -> Path:
    return MapStore(store, run).save(stored)


def load_map(store: str | Path, sample_id: str, kind: str, run: str = "default") -> StoredMap:
    return MapStore(store, run).load(sample_id, kind)
