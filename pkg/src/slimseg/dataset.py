"""Deterministic synthetic segmentation corpus + PNG corpus ingestion.

Each image is a noisy background with k hard-edged shapes (rectangle, circle,
triangle) whose per-pixel class labels are exact by construction.  Shape count
and noise amplitude vary per image so the corpus spans a wide complexity range.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


class CorpusError(IOError):
    pass


@dataclass
class SynthConfig:
    num_images: int = 200
    height: int = 48
    width: int = 48
    num_classes: int = 4
    shapes_range: tuple = (0, 10)
    noise_range: tuple = (0.0, 0.12)
    seed: int = 0
    val_fraction: float = 0.15
    test_fraction: float = 0.15

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ValueError("image dims must be divisible by 8")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")


@dataclass
class CorpusRecord:
    image_id: str
    image_path: str
    label_path: str
    split: str


@dataclass
class CorpusManifest:
    root: str
    records: list = field(default_factory=list)

    def save(self, path=None):
        path = path or os.path.join(self.root, "manifest.jsonl")
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"id": r.image_id, "image": r.image_path,
                                     "label": r.label_path, "split": r.split}) + "\n")
        return path

    @classmethod
    def load(cls, path):
        root = os.path.dirname(os.path.abspath(path))
        records = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                records.append(CorpusRecord(image_id=r["id"], image_path=r["image"],
                                            label_path=r["label"], split=r["split"]))
        ids = [r.image_id for r in records]
        if len(set(ids)) != len(ids):
            raise CorpusError(f"duplicate ids in manifest {path}")
        return cls(root=root, records=records)


def _render_image(rng, cfg: SynthConfig):
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w]
    k = int(rng.integers(cfg.shapes_range[0], cfg.shapes_range[1] + 1))
    # noise scales with shape count so sparse scenes stay genuinely simple
    noise_amp = rng.uniform(*cfg.noise_range) * k / max(1, cfg.shapes_range[1])
    bg = rng.uniform(0.2, 0.8)
    # mild background gradient keeps complexity strictly positive everywhere
    gy, gx = rng.uniform(0.01, 0.04, size=2)
    img = np.clip(bg + gy * (yy / h - 0.5) + gx * (xx / w - 0.5), 0.0, 1.0)
    img = np.repeat(img[:, :, None], 3, axis=2)
    labels = np.zeros((h, w), dtype=np.uint8)
    # class-specific base colors so the labels are predictable from appearance
    palette = np.linspace(0.0, 1.0, cfg.num_classes * 3 + 1)[1:].reshape(
        cfg.num_classes, 3)
    for _ in range(k):
        kind = int(rng.integers(0, 3))
        cls = 1 + kind % (cfg.num_classes - 1)
        color = np.clip(palette[cls] + rng.uniform(-0.12, 0.12, size=3), 0.0, 1.0)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        # shapes stay several pixels wide even at half resolution
        size = rng.uniform(min(h, w) * 0.2, min(h, w) * 0.5)
        if kind == 0:  # rectangle
            hh, ww = size, rng.uniform(min(h, w) * 0.2, min(h, w) * 0.5)
            inside = (np.abs(yy - cy) <= hh / 2) & (np.abs(xx - cx) <= ww / 2)
        elif kind == 1:  # circle
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= (size / 2) ** 2
        else:  # upward triangle
            half = size / 2
            inside = ((yy >= cy - half) & (yy <= cy + half)
                      & (np.abs(xx - cx) <= (yy - (cy - half)) / 2))
        img[inside] = color
        labels[inside] = cls
    if noise_amp > 0:
        img = img + rng.normal(0.0, noise_amp, size=img.shape)
    return np.clip(img, 0.0, 1.0), labels


def _split_of(i: int, n: int, cfg: SynthConfig) -> str:
    n_test = int(round(n * cfg.test_fraction))
    n_val = int(round(n * cfg.val_fraction))
    if i >= n - n_test:
        return "test"
    if i >= n - n_test - n_val:
        return "val"
    return "train"


def generate_synthetic(cfg: SynthConfig, out_dir) -> CorpusManifest:
    """Write a seeded synthetic corpus (PNG images + labels) and its manifest."""
    img_dir = os.path.join(out_dir, "images")
    lab_dir = os.path.join(out_dir, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)
    manifest = CorpusManifest(root=out_dir)
    for i in range(cfg.num_images):
        # one independent, seed-derived stream per image
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        img, labels = _render_image(rng, cfg)
        image_id = f"img{i:05d}"
        img_rel = os.path.join("images", image_id + ".png")
        lab_rel = os.path.join("labels", image_id + ".png")
        save_image(img, os.path.join(out_dir, img_rel))
        Image.fromarray(labels, mode="L").save(os.path.join(out_dir, lab_rel))
        manifest.records.append(CorpusRecord(
            image_id=image_id, image_path=img_rel, label_path=lab_rel,
            split=_split_of(i, cfg.num_images, cfg)))
    manifest.save()
    return manifest


def save_image(img: np.ndarray, path):
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path) -> np.ndarray:
    """8- or 16-bit PNG to float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except OSError as exc:
        raise CorpusError(f"cannot read image {path}: {exc}") from exc
    if mode in ("I;16", "I"):
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64) / 255.0


def load_labels(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise CorpusError(f"cannot read labels {path}: {exc}") from exc
    return arr.astype(np.int64)


def load_corpus(manifest: CorpusManifest, split=None):
    """Yield (image, labels, image_id) in deterministic id order."""
    records = sorted(manifest.records, key=lambda r: r.image_id)
    for r in records:
        if split is not None and r.split != split:
            continue
        img = load_image(os.path.join(manifest.root, r.image_path))
        labels = load_labels(os.path.join(manifest.root, r.label_path))
        yield img, labels, r.image_id


def epoch_shuffle(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic permutation of range(n) for the given (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch]))
    return rng.permutation(n)
