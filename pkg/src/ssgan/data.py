"""Synthetic shape datasets and PNG + manifest ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .fewshot import LabeledSplit

SHAPES = ("disc", "square", "triangle", "cross", "ring", "star", "bar", "diamond")
MANIFEST_HEADER = ["path", "class_id", "split"]
_SUPERSAMPLE = 4


def _regular_polygon(n: int, radius: float, angle: float, inner: float | None = None):
    pts = []
    steps = 2 * n if inner is not None else n
    for i in range(steps):
        r = radius if inner is None or i % 2 == 0 else radius * inner
        a = angle + 2 * math.pi * i / steps
        pts.append((r * math.cos(a), r * math.sin(a)))
    return pts


def _rotate(pts, angle: float):
    c, s = math.cos(angle), math.sin(angle)
    return [(x * c - y * s, x * s + y * c) for x, y in pts]


def _outline(shape: str, r: float, angle: float):
    if shape == "square":
        return _regular_polygon(4, r * 1.2, angle + math.pi / 4)
    if shape == "triangle":
        return _regular_polygon(3, r * 1.2, angle)
    if shape == "diamond":
        return _rotate([(0, -r * 1.3), (r * 0.7, 0), (0, r * 1.3), (-r * 0.7, 0)], angle)
    if shape == "star":
        return _regular_polygon(5, r * 1.25, angle, inner=0.45)
    if shape == "bar":
        return _rotate([(-r * 1.3, -r * 0.35), (r * 1.3, -r * 0.35),
                        (r * 1.3, r * 0.35), (-r * 1.3, r * 0.35)], angle)
    if shape == "cross":
        a, b = r * 1.2, r * 0.35
        return _rotate([(-b, -a), (b, -a), (b, -b), (a, -b), (a, b), (b, b), (b, a),
                        (-b, a), (-b, b), (-a, b), (-a, -b), (-b, -b)], angle)
    raise ValueError(shape)


def render_shape(shape: str, size: int, rng: np.random.Generator, channels: int = 3) -> Image.Image:
    """One anti-aliased shape with random position, scale, rotation and colours."""
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}")
    big = size * _SUPERSAMPLE
    bg_level = rng.uniform(0.0, 0.45)
    fg_level = rng.uniform(0.6, 1.0)
    if channels == 3:
        tint_bg = rng.uniform(0.7, 1.0, 3)
        tint_fg = rng.uniform(0.6, 1.0, 3)
        bg = tuple(int(255 * bg_level * t) for t in tint_bg)
        fg = tuple(int(255 * fg_level * t) for t in tint_fg)
        mode = "RGB"
    else:
        bg, fg, mode = int(255 * bg_level), int(255 * fg_level), "L"
    img = Image.new(mode, (big, big), bg)
    draw = ImageDraw.Draw(img)
    r = big * rng.uniform(0.2, 0.32)
    margin = r * 1.1
    cx, cy = rng.uniform(margin, big - margin, 2)
    angle = rng.uniform(0, 2 * math.pi)
    if shape in ("disc", "ring"):
        box = [cx - r, cy - r, cx + r, cy + r]
        if shape == "disc":
            draw.ellipse(box, fill=fg)
        else:
            draw.ellipse(box, outline=fg, width=max(1, int(r * 0.35)))
    else:
        pts = [(cx + x, cy + y) for x, y in _outline(shape, r, angle)]
        draw.polygon(pts, fill=fg)
    return img.resize((size, size), Image.Resampling.LANCZOS)


@dataclass
class ManifestRow:
    path: str
    class_id: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    rows: list[ManifestRow]

    def classes(self, split: str) -> set[int]:
        return {r.class_id for r in self.rows if r.split == split}

    def validate(self, image_size: int | None = None, channels: int | None = None,
                 check_files: bool = True) -> None:
        for r in self.rows:
            if r.split not in ("train", "test"):
                raise ValueError(f"{r.path}: split must be train or test, got {r.split!r}")
        overlap = self.classes("train") & self.classes("test")
        if overlap:
            raise ValueError(f"train and test share class ids {sorted(overlap)}")
        if not check_files:
            return
        for r in self.rows:
            p = self.root / r.path
            if not p.is_file():
                raise FileNotFoundError(f"manifest entry {r.path} does not exist")
            if image_size is not None or channels is not None:
                with Image.open(p) as im:
                    if image_size is not None and im.size != (image_size, image_size):
                        raise ValueError(f"{r.path}: size {im.size}, expected {image_size}")
                    if channels is not None and len(im.getbands()) != channels:
                        raise ValueError(f"{r.path}: {len(im.getbands())} channels, "
                                         f"expected {channels}")


def write_manifest(path: str | Path, rows: list[ManifestRow]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for r in rows:
            w.writerow([r.path, r.class_id, r.split])
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            if len(rec) != 3:
                raise ValueError(f"manifest line {line}: expected 3 fields")
            try:
                rows.append(ManifestRow(rec[0], int(rec[1]), rec[2]))
            except ValueError:
                raise ValueError(f"manifest line {line}: class_id must be an integer") from None
    return DatasetManifest(path.parent, rows)


def generate_synthetic(out_dir: str | Path, n_train_classes: int = 5, n_test_classes: int = 3,
                       per_class: int = 200, image_size: int = 32, channels: int = 3,
                       seed: int = 0) -> DatasetManifest:
    """Render shape classes to PNGs; the first classes train, the rest test."""
    if n_train_classes < 2 or n_test_classes < 2:
        raise ValueError("need at least 2 train and 2 test classes")
    if n_train_classes + n_test_classes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} shape classes are available")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    out_dir = Path(out_dir)
    rows = []
    for cls in range(n_train_classes + n_test_classes):
        split = "train" if cls < n_train_classes else "test"
        shape = SHAPES[cls]
        sub = out_dir / split / shape
        sub.mkdir(parents=True, exist_ok=True)
        # one stream per class keeps images stable if other classes change
        rng = np.random.default_rng([seed, cls])
        for i in range(per_class):
            rel = f"{split}/{shape}/{i:05d}.png"
            render_shape(shape, image_size, rng, channels).save(out_dir / rel)
            rows.append(ManifestRow(rel, cls, split))
    write_manifest(out_dir / "manifest.csv", rows)
    return DatasetManifest(out_dir, rows)


def load_image(path: str | Path, image_size: int | None = None, channels: int = 3) -> np.ndarray:
    """PNG -> float32 (C, H, W) in [-1, 1], optionally bilinear-resized."""
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.Resampling.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr / 127.5 - 1.0).transpose(2, 0, 1).copy()


def load_split(manifest: DatasetManifest, split: str, image_size: int | None = None,
               channels: int = 3) -> LabeledSplit:
    rows = [r for r in manifest.rows if r.split == split]
    if not rows:
        raise ValueError(f"manifest has no {split} images")
    images = np.stack([load_image(manifest.root / r.path, image_size, channels) for r in rows])
    if image_size is None and images.shape[-1] != images.shape[-2]:
        raise ValueError("images must be square")
    return LabeledSplit(images, np.array([r.class_id for r in rows]))


def to_uint8(x: np.ndarray) -> np.ndarray:
    """[-1, 1] floats to [0, 255] bytes."""
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_image(x: np.ndarray, path: str | Path) -> None:
    """(C, H, W) array in [-1, 1] to PNG."""
    arr = to_uint8(x).transpose(1, 2, 0)
    Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(path)


def tile(images: np.ndarray, cols: int, pad: int = 1) -> np.ndarray:
    """Arrange (n, C, H, W) images into one (C, H', W') sheet, row-major."""
    n, c, h, w = images.shape
    rows = -(-n // cols)
    sheet = np.full((c, rows * (h + pad) + pad, cols * (w + pad) + pad), -1.0, dtype=np.float64)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        sheet[:, y:y + h, x:x + w] = img
    return sheet
