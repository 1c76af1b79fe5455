"""Synthetic polyp-like samples and image/mask folder I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.draw import polygon as draw_polygon

from .tensor import make_rng


@dataclass
class Sample:
    image: np.ndarray  # (3,H,W) float32 in [0,1]
    mask: np.ndarray  # (1,H,W) float32 in {0,1}
    id: str


@dataclass
class SynthConfig:
    count: int = 100
    size: int = 64
    min_blobs: int = 1
    max_blobs: int = 3
    deformation: float = 0.15
    contrast: float = 0.4
    texture: float = 0.1
    noise_std: float = 0.05
    seed: int = 0
    min_fraction: float = 0.02
    max_fraction: float = 0.6

    def validate(self) -> None:
        if self.size % 32:
            raise ValueError(f"synthetic image size must be divisible by 32, got {self.size}")
        if self.min_blobs < 1 or self.max_blobs < self.min_blobs:
            raise ValueError(f"blob count range must satisfy 1 <= min <= max, got {self.min_blobs}..{self.max_blobs}")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if not 0 <= self.contrast <= 1:
            raise ValueError(f"contrast must lie in [0,1], got {self.contrast}")


def _blob(rng: np.random.Generator, size: int, deformation: float) -> np.ndarray:
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    ry, rx = rng.uniform(0.08, 0.25, 2) * size
    tilt = rng.uniform(0, np.pi)
    k = 32
    phi = np.linspace(0, 2 * np.pi, k, endpoint=False)
    wobble = ndimage.gaussian_filter1d(rng.standard_normal(k), 2.0, mode="wrap")
    wobble /= max(np.abs(wobble).max(), 1e-9)
    radius = 1 + deformation * wobble
    ey, ex = ry * np.sin(phi) * radius, rx * np.cos(phi) * radius
    ys = cy + ey * np.cos(tilt) + ex * np.sin(tilt)
    xs = cx - ey * np.sin(tilt) + ex * np.cos(tilt)
    canvas = np.zeros((size, size), dtype=np.float64)
    rr, cc = draw_polygon(ys, xs, shape=canvas.shape)
    canvas[rr, cc] = 1.0
    return ndimage.gaussian_filter(canvas, 1.5) > 0.5


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return (f - f.mean()) / max(f.std(), 1e-9)


def synth_sample(cfg: SynthConfig, index: int) -> Sample:
    rng = make_rng(cfg.seed, index)
    size = cfg.size
    while True:
        n = int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(n):
            mask |= _blob(rng, size, cfg.deformation)
        if cfg.min_fraction <= mask.mean() <= cfg.max_fraction:
            break
    m = mask.astype(np.float32)
    base = (1.0 - cfg.contrast) / 2
    tint = rng.uniform(-0.1, 0.1, 3) * (1.0 - cfg.contrast)
    texture = _smooth_field(rng, size, 3.0)
    image = np.empty((3, size, size), dtype=np.float64)
    for c in range(3):
        image[c] = base + tint[c] + cfg.contrast * m + cfg.texture * texture
        if cfg.noise_std > 0:
            image[c] += rng.normal(0.0, cfg.noise_std, (size, size))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, m[None], f"synth_{index:05d}")


def synth_generate(cfg: SynthConfig) -> list[Sample]:
    """Deterministic set of blob images; sample ``i`` depends only on (seed, i)."""
    cfg.validate()
    return [synth_sample(cfg, i) for i in range(cfg.count)]


# --------------------------------------------------------------------- I/O


def _check_size(size: int) -> None:
    if size % 32:
        raise ValueError(f"target size must be divisible by 32, got {size}")


def read_image(path, size: int | None = None) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def read_mask(path, size: int | None = None) -> np.ndarray:
    img = Image.open(path).convert("L")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    return (np.asarray(img, dtype=np.float32) > 127.5).astype(np.float32)[None]


def load_folder(images_dir, masks_dir, size: int = 256, stems=None) -> list[Sample]:
    """Pair ``images_dir/*.png`` with ``masks_dir/*.png`` by stem, sorted by stem."""
    _check_size(size)
    images = {p.stem: p for p in Path(images_dir).glob("*.png")}
    masks = {p.stem: p for p in Path(masks_dir).glob("*.png")}
    no_mask = sorted(set(images) - set(masks))
    no_image = sorted(set(masks) - set(images))
    if no_mask or no_image:
        raise FileNotFoundError(f"unpaired stems: missing mask for {no_mask}, missing image for {no_image}")
    wanted = sorted(images) if stems is None else list(stems)
    unknown = [s for s in wanted if s not in images]
    if unknown:
        raise FileNotFoundError(f"stems not found in {images_dir}: {unknown}")
    return [Sample(read_image(images[s], size), read_mask(masks[s], size), s) for s in sorted(wanted)]


def save_mask(prob, path, threshold: float = 0.5, image=None, overlay_path=None) -> np.ndarray:
    """Write ``prob >= threshold`` as an 8-bit {0,255} PNG; optionally an overlay.

    The overlay paints the mask boundary in green over ``image`` (3,H,W).
    """
    m = np.asarray(prob).reshape(np.shape(prob)[-2:]) >= threshold
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"cannot write {path}: directory does not exist")
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(path)
    if image is not None and overlay_path is not None:
        rgb = (np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8).copy()
        edge = m & ~ndimage.binary_erosion(m)
        rgb[edge] = (0, 255, 0)
        Image.fromarray(rgb, mode="RGB").save(overlay_path)
    return m


def write_dataset(samples, root, splits: dict | None = None) -> Path:
    """Lay out ``root/images``, ``root/masks`` and (optionally) ``root/splits.json``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = (np.clip(s.image.transpose(1, 2, 0), 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.mask[0] * 255).astype(np.uint8), mode="L").save(root / "masks" / f"{s.id}.png")
    if splits is not None:
        (root / "splits.json").write_text(json.dumps(splits, indent=2))
    return root


def split_ids(ids, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict:
    """Seeded shuffle into disjoint train/val/test lists."""
    ids = sorted(ids)
    order = make_rng(seed, 7).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    shuffled = [ids[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }


def load_split(root, split: str, size: int) -> list[Sample]:
    root = Path(root)
    manifest = json.loads((root / "splits.json").read_text())
    if split not in manifest:
        raise KeyError(f"split {split!r} not in {root / 'splits.json'}")
    return load_folder(root / "images", root / "masks", size, manifest[split])


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])
