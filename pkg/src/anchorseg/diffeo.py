"""Stationary-velocity-field diffeomorphisms on 2-D pixel grids.

Maps are stored as absolute sample coordinates in (2, H, W) layout (row
plane then column plane), optionally with a leading batch axis. Velocities
are displacement rates in pixels per unit time at the same layout.
Integration uses scaling and squaring; composition samples the outer map's
displacement at the inner map's coordinates, which behaves gracefully at
clamped borders.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DEFAULT_SQUARING_STEPS = 6


@lru_cache(maxsize=32)
def _identity_np(h: int, w: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    out = np.stack([rows, cols], axis=0)
    out.setflags(write=False)
    return out


def identity_grid(h: int, w: int) -> np.ndarray:
    return _identity_np(h, w)


def _check_field(t: Tensor, kind: str) -> Tensor:
    if t.ndim == 3:
        if t.shape[0] != 2:
            raise ShapeError(f"{kind} must be (2,H,W) or (N,2,H,W), got {t.shape}")
    elif t.ndim == 4:
        if t.shape[1] != 2:
            raise ShapeError(f"{kind} must be (2,H,W) or (N,2,H,W), got {t.shape}")
    else:
        raise ShapeError(f"{kind} must be (2,H,W) or (N,2,H,W), got {t.shape}")
    return t


@dataclass
class VelocityField:
    field: Tensor

    def __post_init__(self):
        if not isinstance(self.field, Tensor):
            self.field = Tensor(self.field)
        _check_field(self.field, "velocity")
        if not np.all(np.isfinite(self.field.data)):
            raise ValueError("non-finite velocity field")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.field.shape[-2:]

    @property
    def grid(self) -> np.ndarray:
        """(H, W, 2) view of the displacement rates."""
        return np.moveaxis(self.field.data, -3, -1)


@dataclass
class DiffeoMap:
    coords: Tensor

    def __post_init__(self):
        if not isinstance(self.coords, Tensor):
            self.coords = Tensor(self.coords)
        _check_field(self.coords, "map")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.coords.shape[-2:]

    @property
    def batched(self) -> bool:
        return self.coords.ndim == 4

    @property
    def grid(self) -> np.ndarray:
        """(H, W, 2) absolute sample coordinates (batch axis first if present)."""
        return np.moveaxis(self.coords.data, -3, -1)

    def displacement(self) -> Tensor:
        h, w = self.spatial
        ident = _identity_np(h, w)
        if self.coords.ndim == 4:
            ident = np.broadcast_to(ident, self.coords.shape)
        return self.coords - Tensor(ident.copy())

    def select(self, i: int) -> "DiffeoMap":
        if not self.batched:
            raise ShapeError("select() on an unbatched map")
        return DiffeoMap(self.coords[i])


def identity_map(h: int, w: int) -> DiffeoMap:
    return DiffeoMap(Tensor(_identity_np(h, w).copy()))


def integrate(v: VelocityField, steps: int = DEFAULT_SQUARING_STEPS) -> DiffeoMap:
    """Flow of a stationary velocity field by scaling and squaring.

    The initial map is a midpoint step of size 1/2^steps,
    phi_0(x) = x + h * v(x + (h/2) v(x)), then phi <- phi o phi, `steps`
    times. A zero field yields the identity exactly (sampling a zero
    displacement image returns exact zeros at any coordinates).
    """
    if steps < 1:
        raise ValueError(f"need at least one squaring step, got {steps}")
    h, w = v.spatial
    ident = Tensor(_identity_np(h, w)) if v.field.ndim == 3 else Tensor(
        np.broadcast_to(_identity_np(h, w), v.field.shape).copy()
    )
    scale = 1.0 / float(2 ** steps)
    half_coords = ident + T.mul(v.field, 0.5 * scale)
    v_mid = T.grid_sample(v.field, half_coords, mode="bilinear")
    phi = DiffeoMap(ident + T.mul(v_mid, scale))
    for _ in range(steps):
        phi = compose(phi, phi)
    return phi


def compose(outer: DiffeoMap, inner: DiffeoMap, resample: bool = False) -> DiffeoMap:
    """(outer o inner)(x) = outer(inner(x)).

    The outer displacement is sampled bilinearly at the inner coordinates.
    Spatial sizes must agree unless resample=True, which first resizes the
    outer map onto the inner map's grid.
    """
    if outer.spatial != inner.spatial:
        if not resample:
            raise ShapeError(
                f"map sizes differ, {outer.spatial} vs {inner.spatial}; "
                "pass resample=True to resize the outer map"
            )
        outer = resize_map(outer, inner.spatial)
    u = outer.displacement()
    sampled = T.grid_sample(u, inner.coords, mode="bilinear")
    return DiffeoMap(inner.coords + sampled)


def resize_map(m: DiffeoMap, spatial: tuple[int, int]) -> DiffeoMap:
    """Resamples a map onto a new grid, rescaling displacements in pixels."""
    hn, wn = spatial
    ho, wo = m.spatial
    if (ho, wo) == (hn, wn):
        return m
    u = m.displacement()
    u_resized = resize_bilinear(u, spatial)
    scale = np.array([hn / ho, wn / wo]).reshape(
        (2, 1, 1) if u.ndim == 3 else (1, 2, 1, 1)
    )
    u_scaled = T.mul(u_resized, Tensor(np.broadcast_to(scale, u_resized.shape).copy()))
    ident = _identity_np(hn, wn)
    if u.ndim == 4:
        ident = np.broadcast_to(ident, u_scaled.shape).copy()
    return DiffeoMap(Tensor(ident) + u_scaled)


@lru_cache(maxsize=64)
def _resize_coords(ho: int, wo: int, hn: int, wn: int) -> np.ndarray:
    rows = (np.arange(hn, dtype=np.float64) + 0.5) * (ho / hn) - 0.5
    cols = (np.arange(wn, dtype=np.float64) + 0.5) * (wo / wn) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = np.stack([rr, cc], axis=0)
    out.setflags(write=False)
    return out


def resize_bilinear(img: Tensor, spatial: tuple[int, int]) -> Tensor:
    """Pixel-center-aligned bilinear resize of (C,H,W) or (N,C,H,W) tensors."""
    hn, wn = spatial
    ho, wo = img.shape[-2:]
    if (ho, wo) == (hn, wn):
        return img
    coords = _resize_coords(ho, wo, hn, wn)
    if img.ndim == 4:
        coords = np.broadcast_to(coords, (img.shape[0], 2, hn, wn)).copy()
    return T.grid_sample(img, Tensor(coords), mode="bilinear")


def inverse(
    fields: list[VelocityField], steps: int = DEFAULT_SQUARING_STEPS
) -> DiffeoMap:
    """Inverse of the coarse-to-fine composite flow of the given fields.

    Each field is integrated with its sign flipped and the per-level inverses
    are composed in reversed order at the finest grid.
    """
    if not fields:
        raise ValueError("no velocity fields given")
    inverses = [integrate(VelocityField(T.mul(v.field, -1.0)), steps) for v in fields]
    finest = inverses[-1].spatial
    result = inverses[-1]
    for inv in reversed(inverses[:-1]):
        result = compose(result, resize_map(inv, finest))
    return result


def compose_pyramid(
    fields: list[VelocityField], steps: int = DEFAULT_SQUARING_STEPS
) -> DiffeoMap:
    """phi = phi_1 o ... o phi_L for per-level fields ordered coarse to fine.

    The running composite is resized onto each finer level before composing,
    so the result lives on the finest grid.
    """
    if not fields:
        raise ValueError("no velocity fields given")
    result = integrate(fields[0], steps)
    for v in fields[1:]:
        phi_l = integrate(v, steps)
        result = compose(resize_map(result, phi_l.spatial), phi_l)
    return result


def warp_image(img, phi: DiffeoMap, mode: str = "bilinear") -> Tensor:
    """output(x) = img(phi(x)) with clamp-to-edge borders.

    img is (C,H,W) or (N,C,H,W); spatial sizes must match the map.
    """
    img = img if isinstance(img, Tensor) else Tensor(img)
    if img.shape[-2:] != phi.spatial:
        raise ShapeError(f"image {img.shape} vs map {phi.spatial}")
    if img.ndim == 4 and phi.batched and img.shape[0] != phi.coords.shape[0]:
        raise ShapeError("batch sizes differ between image and map")
    coords = phi.coords
    if img.ndim == 4 and not phi.batched:
        coords = T.broadcast_to(
            T.reshape(coords, (1,) + coords.shape), (img.shape[0],) + coords.shape
        )
    return T.grid_sample(img, coords, mode=mode)


def warp_label(onehot, phi: DiffeoMap) -> Tensor:
    """Bilinear warp of one-hot label channels; output channels are soft."""
    onehot = onehot if isinstance(onehot, Tensor) else Tensor(onehot)
    k = onehot.shape[-3]
    if k < 1:
        raise ShapeError("label tensor has no class channels")
    return warp_image(onehot, phi, mode="bilinear")


def jacobian_determinant(phi: DiffeoMap) -> np.ndarray:
    """Central-difference Jacobian determinant at interior points, (H-2, W-2)."""
    g = phi.coords.data
    if g.ndim == 4:
        raise ShapeError("jacobian_determinant expects a single map")
    h, w = g.shape[-2:]
    if h < 3 or w < 3:
        raise ShapeError("grid too small for central differences")
    dr_r = (g[0, 2:, 1:-1] - g[0, :-2, 1:-1]) / 2.0
    dr_c = (g[0, 1:-1, 2:] - g[0, 1:-1, :-2]) / 2.0
    dc_r = (g[1, 2:, 1:-1] - g[1, :-2, 1:-1]) / 2.0
    dc_c = (g[1, 1:-1, 2:] - g[1, 1:-1, :-2]) / 2.0
    return dr_r * dc_c - dr_c * dc_r
