"""Grid masking: corner placements give positives, the rest give negatives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEGATIVE_MODES = ("all_non_corner", "center_only")


@dataclass(frozen=True)
class MaskGrid:
    image_size: int
    patch_size: int
    negative_mode: str = "all_non_corner"
    pixel_mean: str = "channel"

    @property
    def grid_n(self) -> int:
        return self.image_size // self.patch_size

    @property
    def positions(self) -> list[tuple[int, int]]:
        n = self.grid_n
        return [(r, c) for r in range(n) for c in range(n)]

    @property
    def corner_cells(self) -> list[tuple[int, int]]:
        last = self.grid_n - 1
        # top-left, top-right, bottom-left, bottom-right
        return [(0, 0), (0, last), (last, 0), (last, last)]

    @property
    def negative_cells(self) -> list[tuple[int, int]]:
        n = self.grid_n
        if self.negative_mode == "center_only":
            return [(r, c) for r in range(1, n - 1) for c in range(1, n - 1)]
        corners = set(self.corner_cells)
        return [cell for cell in self.positions if cell not in corners]

    def rect(self, cell: tuple[int, int]) -> tuple[slice, slice]:
        r, c = cell
        if not (0 <= r < self.grid_n and 0 <= c < self.grid_n):
            raise IndexError(f"cell {cell} outside {self.grid_n}x{self.grid_n} grid")
        p = self.patch_size
        return slice(r * p, (r + 1) * p), slice(c * p, (c + 1) * p)


def make_grid(image_size: int, patch_size: int, negative_mode: str = "all_non_corner",
              pixel_mean: str = "channel") -> MaskGrid:
    if patch_size < 1 or image_size % patch_size:
        raise ValueError(f"image_size {image_size} not divisible by patch_size {patch_size}")
    if image_size // patch_size < 2:
        raise ValueError("grid needs at least 2 cells per side")
    if negative_mode not in NEGATIVE_MODES:
        raise ValueError(f"negative_mode must be one of {NEGATIVE_MODES}")
    if pixel_mean not in ("channel", "global"):
        raise ValueError("pixel_mean must be 'channel' or 'global'")
    grid = MaskGrid(image_size, patch_size, negative_mode, pixel_mean)
    if grid.negative_mode == "center_only" and grid.grid_n < 3:
        raise ValueError("center_only negatives need a grid of at least 3x3")
    return grid


def patch_value(x: np.ndarray, grid: MaskGrid) -> np.ndarray:
    """Fill value(s) for an image (C,H,W) or batch (B,C,H,W), shaped to broadcast."""
    x = np.asarray(x)
    if grid.pixel_mean == "global":
        axes = tuple(range(x.ndim - 3, x.ndim))
    else:
        axes = (x.ndim - 2, x.ndim - 1)
    return x.mean(axis=axes, keepdims=True).astype(x.dtype)


def _check_image(x: np.ndarray, grid: MaskGrid) -> None:
    if x.shape[-2:] != (grid.image_size, grid.image_size):
        raise ValueError(
            f"image extent {x.shape[-2:]} does not match grid size {grid.image_size}"
        )


def mask_image(x, cell: tuple[int, int], grid: MaskGrid, fill=None) -> np.ndarray:
    """Copy of ``x`` (C,H,W) with one grid cell set to the image's mean brightness."""
    x = np.asarray(x)
    _check_image(x, grid)
    if fill is None:
        fill = patch_value(x, grid)
    rows, cols = grid.rect(cell)
    out = x.copy()
    out[..., rows, cols] = fill
    return out


@dataclass
class TripletImages:
    anchor: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray


def build_triplets(x, grid: MaskGrid) -> TripletImages:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected one (C,H,W) image, got shape {x.shape}")
    _check_image(x, grid)
    fill = patch_value(x, grid)
    pos = np.stack([mask_image(x, c, grid, fill) for c in grid.corner_cells])
    neg = np.stack([mask_image(x, c, grid, fill) for c in grid.negative_cells])
    return TripletImages(anchor=x, positives=pos, negatives=neg)


def build_triplet_batch(xs: np.ndarray, grid: MaskGrid) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized triplets for a batch (B,C,H,W).

    Returns positives (B,4,C,H,W) and negatives (B,N,C,H,W); each entry
    matches ``build_triplets`` on the corresponding image.
    """
    xs = np.asarray(xs)
    _check_image(xs, grid)
    fill = patch_value(xs, grid)

    def variants(cells):
        out = np.repeat(xs[:, None], len(cells), axis=1)
        for i, cell in enumerate(cells):
            rows, cols = grid.rect(cell)
            out[:, i, :, rows, cols] = fill
        return out

    return variants(grid.corner_cells), variants(grid.negative_cells)
