"""Training-time patch sampling / geometric augmentation and test-time padding.

Training patches are 256x256 random crops with lossless geometric
augmentations (flips, right-angle rotations, transpose) plus an optional
smoothed-random-displacement elastic warp.  The identical geometric
transform is applied to the image and every label passed alongside it;
labels are resampled nearest-neighbor so they stay binary.

For inference, images are zero-padded to a square 16m x 16m canvas
(content anchored top-left) so four downsampling stages divide evenly;
``crop_back`` inverts the padding exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

GRID = 16


class PadSpecError(ValueError):
    """Map shape does not match the padding spec."""


@dataclass(frozen=True)
class PadSpec:
    original: tuple[int, int]  # (H, W)
    padded: tuple[int, int]  # (16m, 16m)
    offsets: tuple[int, int] = (0, 0)  # (top, left)

    @property
    def m(self) -> int:
        return self.padded[0] // GRID


@dataclass
class ElasticConfig:
    alpha: float = 34.0  # displacement scale, pixels
    sigma: float = 4.0  # smoothing std, pixels
    probability: float = 0.5


@dataclass
class AugmentationConfig:
    crop: int = 256
    flip_h: bool = True
    flip_v: bool = True
    rotate90: bool = True
    transpose: bool = True
    elastic: ElasticConfig = field(default_factory=ElasticConfig)
    seed: int = 0

    def __post_init__(self):
        if self.crop % GRID != 0:
            raise ValueError(f"crop size must be divisible by {GRID}, got {self.crop}")


def pad_to_grid(image: np.ndarray) -> tuple[np.ndarray, PadSpec]:
    """Zero-pad an H x W (x C) array to the smallest square 16m x 16m canvas."""
    h, w = image.shape[:2]
    m = -(-max(h, w) // GRID)  # ceil; already-gridded inputs are unchanged
    size = GRID * max(m, 1)
    pad = [(0, size - h), (0, size - w)] + [(0, 0)] * (image.ndim - 2)
    padded = np.pad(image, pad)
    return padded, PadSpec(original=(h, w), padded=(size, size))


def crop_back(map_: np.ndarray, spec: PadSpec) -> np.ndarray:
    """Invert ``pad_to_grid``: recover the original H x W extent."""
    if map_.shape[:2] != spec.padded:
        raise PadSpecError(f"expected map of shape {spec.padded}, got {map_.shape[:2]}")
    top, left = spec.offsets
    h, w = spec.original
    return map_[top : top + h, left : left + w]


def _elastic_fields(shape, alpha, sigma, rng):
    dr = gaussian_filter(rng.uniform(-1, 1, size=shape), sigma, mode="reflect") * alpha
    dc = gaussian_filter(rng.uniform(-1, 1, size=shape), sigma, mode="reflect") * alpha
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return rows + dr, cols + dc


def _warp(arr, coords, order):
    if arr.ndim == 2:
        return map_coordinates(arr, coords, order=order, mode="reflect")
    channels = [map_coordinates(arr[..., c], coords, order=order, mode="reflect") for c in range(arr.shape[-1])]
    return np.stack(channels, axis=-1)


def sample_patch(
    image: np.ndarray,
    labels: dict[str, np.ndarray],
    cfg: AugmentationConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, dict[str, np.ndarray], dict]:
    """Sample one augmented crop, co-transforming image and all labels.

    Returns (image patch, label patches, metadata).  Sources smaller than
    the crop are reflect-padded first (flagged in metadata).  The image is
    warped bilinearly, labels nearest-neighbor.
    """
    c = cfg.crop
    h, w = image.shape[:2]
    meta = {"reflect_padded": False}
    if h < c or w < c:
        ph, pw = max(c - h, 0), max(c - w, 0)
        image = np.pad(image, [(0, ph), (0, pw), (0, 0)][: image.ndim], mode="reflect")
        labels = {k: np.pad(v, [(0, ph), (0, pw)], mode="reflect") for k, v in labels.items()}
        h, w = image.shape[:2]
        meta["reflect_padded"] = True

    top = int(rng.integers(0, h - c + 1))
    left = int(rng.integers(0, w - c + 1))
    meta["origin"] = (top, left)
    img = image[top : top + c, left : left + c].copy()
    labs = {k: v[top : top + c, left : left + c].copy() for k, v in labels.items()}

    def apply(fn):
        nonlocal img, labs
        img = fn(img)
        labs = {k: fn(v) for k, v in labs.items()}

    if cfg.flip_h and rng.random() < 0.5:
        apply(lambda a: a[:, ::-1].copy())
        meta["flip_h"] = True
    if cfg.flip_v and rng.random() < 0.5:
        apply(lambda a: a[::-1].copy())
        meta["flip_v"] = True
    if cfg.rotate90:
        k = int(rng.integers(0, 4))
        if k:
            apply(lambda a: np.rot90(a, k).copy())
            meta["rot90"] = k
    if cfg.transpose and rng.random() < 0.5:
        apply(lambda a: a.swapaxes(0, 1).copy())
        meta["transpose"] = True
    if cfg.elastic.probability > 0 and rng.random() < cfg.elastic.probability:
        coords = _elastic_fields((c, c), cfg.elastic.alpha, cfg.elastic.sigma, rng)
        img = _warp(img, coords, order=1)
        labs = {k: _warp(v, coords, order=0) for k, v in labs.items()}
        meta["elastic"] = True

    return img, labs, meta
