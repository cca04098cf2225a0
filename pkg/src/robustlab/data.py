"""Synthetic datasets, IDX ingestion and image-grid export."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "Dataset",
    "IdxFormatError",
    "gen_two_gaussians",
    "gen_shape_images",
    "class_textures",
    "shape_templates",
    "augment",
    "load_idx",
    "write_idx",
    "write_image",
    "read_image",
    "write_image_grid",
    "write_manifest",
]


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    low: float = 0.0
    high: float = 1.0
    split: str = "train"
    recipe: dict = field(default_factory=dict)
    side: int | None = None

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return int(self.x.shape[1])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.low, self.high,
                       split or self.split, dict(self.recipe), self.side)

    def split_at(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        idx = np.arange(len(self))
        return self.subset(idx[:n_train], "train"), self.subset(idx[n_train:], "test")

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


def _balanced_labels(n: int, k: int, rng) -> np.ndarray:
    y = np.arange(n) % k
    rng.shuffle(y)
    return y


def gen_two_gaussians(mu, sigma: float, spurious_strength: float, n: int, seed: int = 0,
                      spurious_noise: float = 0.01, low: float = -1.0, high: float = 1.0) -> Dataset:
    """Two classes at ``±mu`` with isotropic noise, plus one spurious coordinate.

    The last coordinate equals ``±spurious_strength`` (sign from the label) plus
    N(0, spurious_noise²): highly predictive but tiny, so an lp adversary with budget
    above ``spurious_strength`` can erase it. Class 0 sits at ``+mu``.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    rng = np.random.default_rng(seed)
    y = _balanced_labels(n, 2, rng)
    s = np.where(y == 0, 1.0, -1.0)
    robust = s[:, None] * mu[None, :] + sigma * rng.standard_normal((n, mu.size))
    spur = s * spurious_strength + spurious_noise * rng.standard_normal(n)
    x = np.clip(np.column_stack([robust, spur]), low, high)
    recipe = {"name": "two_gaussians", "mu": mu.tolist(), "sigma": sigma,
              "spurious_strength": spurious_strength, "spurious_noise": spurious_noise,
              "n": n, "seed": seed, "low": low, "high": high}
    return Dataset(x, y, 2, low, high, "all", recipe)


SHAPES = ("hbar", "vbar", "disk", "cross", "diag", "ring", "antidiag", "square", "corner", "triangle")


def shape_templates(side: int, k: int, shift: int = 0) -> np.ndarray:
    """Noise-free, centred template for each of the first ``k`` shape classes, shape (k, side²).

    ``shift > 0`` averages each template over the generator's jitter window, giving
    the expected noise-free image of the class.
    """
    if not 8 <= side <= 32:
        raise ValueError(f"side must lie in [8, 32], got {side}")
    if not 2 <= k <= len(SHAPES):
        raise ValueError(f"number of classes must lie in [2, {len(SHAPES)}], got {k}")
    r, c = np.mgrid[0:side, 0:side].astype(np.float64)
    m = (side - 1) / 2.0
    w = max(1.0, side / 8.0)
    rad = side / 4.0
    out = []
    for name in SHAPES[:k]:
        if name == "hbar":
            t = (np.abs(r - m) <= w) & (np.abs(c - m) <= side * 0.35)
        elif name == "vbar":
            t = (np.abs(c - m) <= w) & (np.abs(r - m) <= side * 0.35)
        elif name == "disk":
            t = (r - m) ** 2 + (c - m) ** 2 <= rad**2
        elif name == "cross":
            t = ((np.abs(r - m) <= w * 0.6) | (np.abs(c - m) <= w * 0.6)) & (
                np.maximum(np.abs(r - m), np.abs(c - m)) <= side * 0.35)
        elif name == "diag":
            t = (np.abs(r - c) <= w) & (np.abs(r - m) <= side * 0.35)
        elif name == "antidiag":
            t = (np.abs(r + c - 2 * m) <= w) & (np.abs(r - m) <= side * 0.35)
        elif name == "ring":
            d = np.sqrt((r - m) ** 2 + (c - m) ** 2)
            t = np.abs(d - rad * 1.2) <= w * 0.7
        elif name == "square":
            t = np.maximum(np.abs(r - m), np.abs(c - m)) <= rad
        elif name == "corner":
            t = ((np.abs(r - (m - rad)) <= w * 0.6) | (np.abs(c - (m - rad)) <= w * 0.6)) & (
                r >= m - rad - w) & (c >= m - rad - w) & (r <= m + rad) & (c <= m + rad)
        else:
            t = (r - m <= rad) & (c - m >= -rad) & (r - m >= c - m - rad)
        out.append(t.astype(np.float64))
    out = np.stack(out)
    if shift:
        out = np.mean([np.roll(out, (dr, dc), axis=(1, 2)) for dr in range(-shift, shift + 1)
                       for dc in range(-shift, shift + 1)], axis=0)
    return out.reshape(k, side * side)


def gen_shape_images(side: int, k: int, n: int, seed: int = 0, shift: int = 1,
                     noise: float = 0.15, contrast: tuple[float, float] = (0.6, 1.0),
                     background: tuple[float, float] = (0.0, 0.3), texture: float = 0.0) -> Dataset:
    """Grayscale images of ``k`` procedural shape classes with jitter.

    Each sample is a class template shifted by up to ``shift`` pixels, drawn with a
    random contrast over a random background level, plus Gaussian pixel noise, then
    clipped to [0, 1]. Class counts are balanced within one.

    ``texture > 0`` adds a fixed ±texture pixel pattern per class (see
    ``class_textures``): predictive, but erasable by any perturbation larger than
    its amplitude.
    """
    templates = shape_templates(side, k).reshape(k, side, side)
    tex = texture * class_textures(side, k).reshape(k, side, side)
    rng = np.random.default_rng(seed)
    y = _balanced_labels(n, k, rng)
    x = np.empty((n, side, side))
    for i in range(n):
        img = templates[y[i]]
        if shift:
            dr, dc = rng.integers(-shift, shift + 1, size=2)
            img = np.roll(np.roll(img, dr, axis=0), dc, axis=1)
        bg = rng.uniform(*background)
        fg = rng.uniform(*contrast)
        x[i] = bg + fg * img + tex[y[i]] + noise * rng.standard_normal((side, side))
    x = np.clip(x, 0.0, 1.0).reshape(n, side * side)
    recipe = {"name": "shape_images", "side": side, "k": k, "n": n, "seed": seed,
              "shift": shift, "noise": noise, "contrast": list(contrast),
              "background": list(background), "texture": texture}
    return Dataset(x, y, k, 0.0, 1.0, "all", recipe, side)


def class_textures(side: int, k: int) -> np.ndarray:
    """Fixed ±1 pixel pattern per class, shape (k, side²); independent of any seed."""
    return np.random.default_rng([side, k, 0x7E47]).choice([-1.0, 1.0], size=(k, side * side))


def augment(x: np.ndarray, side: int, rng, flip: bool = True, crop_pad: int = 2) -> np.ndarray:
    """Random horizontal flip and reflect-padded random crop; stays inside the pixel box."""
    n = len(x)
    imgs = x.reshape(n, side, side)
    out = np.empty_like(imgs)
    padded = np.pad(imgs, ((0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)), mode="reflect")
    offs = rng.integers(0, 2 * crop_pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    for i in range(n):
        r, c = offs[i]
        img = padded[i, r : r + side, c : c + side]
        out[i] = img[:, ::-1] if flips[i] else img
    return out.reshape(n, side * side)


# -- IDX ----------------------------------------------------------------------------


class IdxFormatError(ValueError):
    """Malformed IDX file; the message names the byte offset."""


_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_idx_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset {len(raw)}")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise IdxFormatError(f"{path}: bad magic number {raw[:4].hex()} at offset 0")
    hdr_end = 4 + 4 * ndim
    if len(raw) < hdr_end:
        raise IdxFormatError(f"{path}: truncated dimension table at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr_end])
    dt = np.dtype(_IDX_TYPES[code])
    need = int(np.prod(dims)) * dt.itemsize
    if len(raw) - hdr_end < need:
        raise IdxFormatError(
            f"{path}: truncated payload at offset {len(raw)} (expected {hdr_end + need} bytes)")
    return np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=hdr_end).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are rescaled to [0, 1]."""
    imgs = _read_idx_array(images_path)
    labels = _read_idx_array(labels_path).astype(np.int64).reshape(-1)
    if len(imgs) != len(labels):
        raise IdxFormatError(f"{labels_path}: {len(labels)} labels for {len(imgs)} images at offset 4")
    x = imgs.reshape(len(imgs), -1).astype(np.float64)
    hi = 255.0 if imgs.dtype == np.uint8 else max(float(x.max()), 1.0)
    x = np.clip(x / hi, 0.0, 1.0)
    side = imgs.shape[1] if imgs.ndim == 3 and imgs.shape[1] == imgs.shape[2] else None
    k = num_classes or int(labels.max()) + 1
    return Dataset(x, labels, k, 0.0, 1.0, "all",
                   {"name": "idx", "images": str(images_path), "labels": str(labels_path)}, side)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = {np.dtype(np.uint8): 0x08}.get(array.dtype)
    if code is None:
        raise ValueError("write_idx only writes uint8 arrays")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# -- images -------------------------------------------------------------------------


def _to_u8(img: np.ndarray, low: float, high: float) -> np.ndarray:
    return np.round((np.clip(img, low, high) - low) / (high - low) * 255.0).astype(np.uint8)


def _save(arr_u8: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "PPM" if path.suffix.lower() == ".pgm" else None
    try:
        Image.fromarray(arr_u8, mode="L").save(path, format=fmt)
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc


def write_image(img: np.ndarray, path, side: int | None = None, low: float = 0.0,
                high: float = 1.0) -> None:
    """Write one grayscale image as 8-bit PGM (P5) or PNG, chosen by suffix."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 1:
        side = side or int(round(np.sqrt(img.size)))
        img = img.reshape(side, -1)
    _save(_to_u8(img, low, high), Path(path))


def read_image(path) -> np.ndarray:
    """Read an 8-bit grayscale image back into [0, 1] floats."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_image_grid(images, layout: tuple[int, int], path, side: int | None = None,
                     gutter: int = 1, low: float = 0.0, high: float = 1.0) -> None:
    """Tile ``images`` row-major into a ``layout = (rows, cols)`` grid with gutters.

    A 1×1 layout without gutter reproduces the single image exactly (8-bit).
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("write_image_grid: no images given")
    rows, cols = layout
    if len(images) > rows * cols:
        raise ValueError(f"write_image_grid: {len(images)} images do not fit a {rows}x{cols} grid")
    tiles = []
    for im in images:
        if im.ndim == 1:
            s = side or int(round(np.sqrt(im.size)))
            im = im.reshape(s, -1)
        tiles.append(_to_u8(im, low, high))
    h, w = tiles[0].shape
    if any(t.shape != (h, w) for t in tiles):
        raise ValueError("write_image_grid: images differ in shape")
    canvas = np.full((rows * h + (rows - 1) * gutter, cols * w + (cols - 1) * gutter), 255, np.uint8)
    for i, t in enumerate(tiles):
        r, c = divmod(i, cols)
        canvas[r * (h + gutter) : r * (h + gutter) + h, c * (w + gutter) : c * (w + gutter) + w] = t
    _save(canvas, Path(path))


def write_manifest(datasets: dict[str, Dataset], path) -> None:
    """Dataset manifest: recipe, seed and content checksum per named split."""
    doc = {name: {"recipe": d.recipe, "split": d.split, "n": len(d), "checksum": d.checksum()}
           for name, d in datasets.items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
