"""Probability-simplex geometry: Fisher-Rao distance, the square-root
embedding onto the positive orthant of the unit sphere, and geodesic
interpolation by spherical linear interpolation of embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUM_TOL = 1e-9


class SimplexError(ValueError):
    pass


@dataclass(frozen=True)
class SimplexWeight:
    """Non-negative vector summing to 1."""

    w: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.w, dtype=np.float64)
        object.__setattr__(self, "w", arr)
        if arr.ndim != 1:
            raise SimplexError(f"weight must be 1-D, got shape {arr.shape}")
        if np.any(arr < 0.0):
            raise SimplexError(f"negative component in weight: {arr}")
        s = float(arr.sum())
        if abs(s - 1.0) > SUM_TOL:
            raise SimplexError(f"weight sums to {s}, not 1")

    def __len__(self):
        return self.w.shape[0]


@dataclass(frozen=True)
class SphereEmbedding:
    """Componentwise square root of a simplex point; unit Euclidean norm."""

    t: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.t, dtype=np.float64)
        object.__setattr__(self, "t", arr)
        if np.any(arr < 0.0):
            raise SimplexError("embedding component negative")
        n = float(np.linalg.norm(arr))
        if abs(n - 1.0) > SUM_TOL:
            raise SimplexError(f"embedding norm {n} != 1")


def _as_weight_array(w) -> np.ndarray:
    if isinstance(w, SimplexWeight):
        return w.w
    return SimplexWeight(np.asarray(w, dtype=np.float64)).w


def fisher_rao(w, w2) -> float:
    """Geodesic distance on the simplex, in [0, pi].

    Computed from the chord length of the square-root embeddings,
    4*arcsin(||sqrt(w) - sqrt(w')|| / 2), which equals
    2*arccos(sum_i sqrt(w_i w'_i)) for unit embeddings but stays exact
    near coincident inputs where arccos loses all precision.
    """
    a = _as_weight_array(w)
    b = _as_weight_array(w2)
    if a.shape != b.shape:
        raise SimplexError(f"length mismatch: {a.shape} vs {b.shape}")
    chord = np.linalg.norm(np.sqrt(a) - np.sqrt(b))
    return float(4.0 * np.arcsin(min(chord / 2.0, 1.0)))


def sphere_embed(w) -> SphereEmbedding:
    a = _as_weight_array(w)
    t = np.sqrt(a)
    n = np.linalg.norm(t)
    return SphereEmbedding(t / n)


def geodesic(w, w2, t: float) -> SimplexWeight:
    """Point at fraction t of the Fisher-Rao geodesic from w to w'.

    Spherical linear interpolation of the embeddings, squared back onto the
    simplex. Endpoints are returned exactly; coincident inputs short-circuit.
    """
    a = _as_weight_array(w)
    b = _as_weight_array(w2)
    if a.shape != b.shape:
        raise SimplexError(f"length mismatch: {a.shape} vs {b.shape}")
    if not 0.0 <= t <= 1.0:
        raise SimplexError(f"interpolation parameter {t} outside [0, 1]")
    if t == 0.0:
        return SimplexWeight(a.copy())
    if t == 1.0:
        return SimplexWeight(b.copy())
    ta = np.sqrt(a)
    tb = np.sqrt(b)
    chord = np.linalg.norm(ta - tb)
    ang = 2.0 * np.arcsin(min(chord / 2.0, 1.0))
    if ang < 1e-12:
        return SimplexWeight(a.copy())
    s = np.sin(ang)
    e = (np.sin((1.0 - t) * ang) * ta + np.sin(t * ang) * tb) / s
    out = e * e
    return SimplexWeight(out / out.sum())


def project_to_simplex(v) -> SimplexWeight:
    """Clip negatives to zero and renormalize by the sum.

    Valid simplex points are fixed points. Not the Euclidean projection;
    this is numerical hygiene for optimizer output and file round-trips.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise SimplexError(f"expected a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SimplexError("non-finite input")
    clipped = np.maximum(arr, 0.0)
    s = clipped.sum()
    if s <= 0.0:
        raise SimplexError("all components non-positive; cannot normalize")
    return SimplexWeight(clipped / s)
