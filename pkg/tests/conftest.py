import numpy as np
import pytest
import cv2
from PIL import Image

from sglvessel.data import RetinalSample


def vessel_label(shape, seed=0, n_main=3, n_branch=6, n_twig=10):
    """Synthetic vessel-like binary mask: a few thick strokes with
    progressively thinner branches, roughly resembling a vascular tree."""
    h, w = shape
    rng = np.random.default_rng(seed)
    mask = np.zeros(shape, np.uint8)

    def stroke(p0, p1, width):
        cv2.line(mask, (int(p0[1]), int(p0[0])), (int(p1[1]), int(p1[0])), 1, width)
        return p1

    anchors = []
    for _ in range(n_main):
        p = (rng.integers(h // 8, h - h // 8), rng.integers(w // 8, w - w // 8))
        for _ in range(3):
            q = (
                int(np.clip(p[0] + rng.integers(-h // 3, h // 3), 2, h - 3)),
                int(np.clip(p[1] + rng.integers(-w // 3, w // 3), 2, w - 3)),
            )
            stroke(p, q, int(rng.integers(5, 8)))
            anchors.append(q)
            p = q
    for _ in range(n_branch):
        p = anchors[int(rng.integers(0, len(anchors)))]
        q = (
            int(np.clip(p[0] + rng.integers(-h // 4, h // 4), 2, h - 3)),
            int(np.clip(p[1] + rng.integers(-w // 4, w // 4), 2, w - 3)),
        )
        stroke(p, q, 3)
        anchors.append(q)
    for _ in range(n_twig):
        p = anchors[int(rng.integers(0, len(anchors)))]
        q = (
            int(np.clip(p[0] + rng.integers(-h // 5, h // 5), 2, h - 3)),
            int(np.clip(p[1] + rng.integers(-w // 5, w // 5), 2, w - 3)),
        )
        stroke(p, q, 1)
    return mask


def fundus_image(label, seed=0):
    """Plausible fundus-like image: reddish background plus darker vessels."""
    rng = np.random.default_rng(seed)
    h, w = label.shape
    img = np.empty((h, w, 3))
    img[..., 0] = 0.65
    img[..., 1] = 0.35
    img[..., 2] = 0.20
    img += rng.normal(0, 0.03, size=img.shape)
    img[label > 0] *= 0.55
    return img.clip(0, 1)


def make_sample(sample_id="s0", shape=(96, 96), seed=0, split="train", dataset="DRIVE"):
    label = vessel_label(shape, seed)
    return RetinalSample(
        id=sample_id,
        image=fundus_image(label, seed),
        label=label,
        split=split,
        dataset=dataset,
    )


def write_dataset_root(root, name, n_train=None, n_test=None, shape=None, seed=0):
    """Lay out a synthetic dataset in the expected on-disk structure."""
    from sglvessel.data import DATASET_SHAPES

    shape = shape or DATASET_SHAPES[name]
    base = root / name
    (base / "images").mkdir(parents=True)
    (base / "labels").mkdir(parents=True)
    if name == "DRIVE":
        n_train = 20 if n_train is None else n_train
        n_test = 20 if n_test is None else n_test
        names = [f"{i:02d}_test" for i in range(1, n_test + 1)] + [
            f"{i:02d}_training" for i in range(21, 21 + n_train)
        ]
    else:
        n_train = 20 if n_train is None else n_train
        n_test = 8 if n_test is None else n_test
        names = [f"Image_{i:02d}" for i in range(1, n_train + n_test + 1)]
    for i, stem in enumerate(names):
        label = vessel_label(shape, seed=seed + i)
        image = np.round(fundus_image(label, seed=seed + i) * 255).astype(np.uint8)
        Image.fromarray(image).save(base / "images" / f"{stem}.png")
        Image.fromarray(label * 255).save(base / "labels" / f"{stem}.png")
    return root


@pytest.fixture
def small_samples():
    return [
        make_sample(f"s{i}", shape=(96, 96), seed=i, split="train") for i in range(6)
    ]
