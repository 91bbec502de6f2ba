"""Rendering helpers: deformation grids and simplex scatters as SVG,
segmentation strips as PNG."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

CLASS_COLORS = np.array(
    [[20, 20, 20], [230, 180, 60], [200, 60, 60], [70, 130, 200], [90, 190, 120]],
    dtype=np.uint8,
)


def _svg_header(w: float, h: float) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" '
        f'viewBox="0 0 {w:.2f} {h:.2f}">\n'
        f'<rect width="100%" height="100%" fill="white"/>\n'
    )


def deformation_grid_svg(grid: np.ndarray, path: str | Path, step: int = 2,
                         scale: float = 8.0) -> None:
    """Draws the warped grid lines of a map given as (H, W, 2) coordinates."""
    h, w, _ = grid.shape
    parts = [_svg_header(w * scale, h * scale)]

    def polyline(points):
        pts = " ".join(f"{c * scale:.2f},{r * scale:.2f}" for r, c in points)
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="#336" stroke-width="0.8"/>'
        )

    for r in range(0, h, step):
        polyline([(grid[r, c, 0], grid[r, c, 1]) for c in range(w)])
    for c in range(0, w, step):
        polyline([(grid[r, c, 0], grid[r, c, 1]) for r in range(h)])
    parts.append("</svg>\n")
    Path(path).write_text("\n".join(parts), encoding="utf-8")


def simplex_scatter_svg(embeddings: np.ndarray, domains: list[str],
                        slice_indices: np.ndarray, path: str | Path,
                        size: float = 420.0) -> None:
    """2-D orthographic projection of sphere embeddings, one dot per image.

    The three coordinates with the largest total mass are kept; the rest are
    ignored for display only. Source points render as circles, target as
    squares; fill hue follows the slice index.
    """
    mass = embeddings.sum(axis=0)
    top3 = np.argsort(mass)[-3:]
    e3 = embeddings[:, sorted(top3)]
    norms = np.linalg.norm(e3, axis=1, keepdims=True)
    e3 = e3 / np.maximum(norms, 1e-12)
    # view direction (1,1,1): u and v span the orthogonal plane
    u = np.array([1.0, -1.0, 0.0]) / np.sqrt(2)
    v = np.array([1.0, 1.0, -2.0]) / np.sqrt(6)
    xs = e3 @ u
    ys = e3 @ v
    pad = 0.15
    xmin, xmax = xs.min() - pad, xs.max() + pad
    ymin, ymax = ys.min() - pad, ys.max() + pad

    def sx(x):
        return (x - xmin) / (xmax - xmin) * size

    def sy(y):
        return size - (y - ymin) / (ymax - ymin) * size

    parts = [_svg_header(size, size)]
    for x, y, dom, t in zip(xs, ys, domains, slice_indices):
        hue = int(240 * (1.0 - t))
        color = f"hsl({hue},75%,45%)"
        if dom == "source":
            parts.append(
                f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3.2" fill="{color}" '
                f'fill-opacity="0.75"/>'
            )
        else:
            parts.append(
                f'<rect x="{sx(x) - 2.8:.1f}" y="{sy(y) - 2.8:.1f}" width="5.6" '
                f'height="5.6" fill="{color}" fill-opacity="0.75"/>'
            )
    parts.append("</svg>\n")
    Path(path).write_text("\n".join(parts), encoding="utf-8")


def label_strip_png(label_maps: list[np.ndarray], path: str | Path,
                    upscale: int = 4, gap: int = 2) -> None:
    """Writes integer label maps side by side as one indexed-color strip."""
    h, w = label_maps[0].shape
    n = len(label_maps)
    canvas = np.zeros((h, n * w + (n - 1) * gap, 3), dtype=np.uint8)
    canvas[:] = 255
    for i, lab in enumerate(label_maps):
        rgb = CLASS_COLORS[np.clip(lab, 0, len(CLASS_COLORS) - 1)]
        x0 = i * (w + gap)
        canvas[:, x0 : x0 + w] = rgb
    img = Image.fromarray(canvas, mode="RGB")
    img = img.resize((canvas.shape[1] * upscale, canvas.shape[0] * upscale),
                     Image.NEAREST)
    img.save(path)
