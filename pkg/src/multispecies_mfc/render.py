"""Plain-text PPM heatmaps of density fields over a terrain tint."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .scenario import TerrainGrid

TERRAIN_TINT = {
    "w": (60, 90, 170),
    "r": (160, 70, 60),
    "n": (70, 140, 70),
    "1": (20, 30, 90),
    "2": (90, 20, 20),
    "3": (20, 20, 20),
}
DEFAULT_TINT = (40, 40, 40)
FULL = np.array([255.0, 255.0, 255.0])


def terrain_background(grid: TerrainGrid) -> np.ndarray:
    tint = np.array([TERRAIN_TINT.get(c, DEFAULT_TINT) for c in grid.cell_terrain], dtype=float)
    return tint.reshape(grid.height, grid.width, 3)


def density_image(grid: TerrainGrid, density, vmax: float = 1.0, scale: int = 1) -> np.ndarray:
    """RGB uint8 image, north up; intensity ``density / vmax`` blends tint into white."""
    a = np.clip(np.asarray(density, dtype=float).reshape(grid.height, grid.width) / vmax, 0.0, 1.0)
    rgb = terrain_background(grid) * (1.0 - a[..., None]) + FULL * a[..., None]
    img = np.rint(rgb).astype(np.uint8)[::-1]
    if scale > 1:
        img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    return img


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    lines = [f"P3\n{w} {h}\n255\n"]
    for row in image:
        lines.append(" ".join(str(int(v)) for v in row.ravel()) + "\n")
    Path(path).write_text("".join(lines))


def read_ppm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if tokens[0] != "P3":
        raise ValueError(f"{path}: not a plain PPM file")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:], dtype=np.uint8).reshape(h, w, 3)


def strip(images, gap: int = 2) -> np.ndarray:
    """Tile a grid of equally sized images (list of rows) with white gaps."""
    h, w, _ = images[0][0].shape
    rows = []
    for row in images:
        pieces = []
        for k, img in enumerate(row):
            if k:
                pieces.append(np.full((h, gap, 3), 255, np.uint8))
            pieces.append(img)
        rows.append(np.concatenate(pieces, axis=1))
    out = []
    for k, r in enumerate(rows):
        if k:
            out.append(np.full((gap, r.shape[1], 3), 255, np.uint8))
        out.append(r)
    return np.concatenate(out, axis=0)
