"""Diagonal Gaussians: closed-form KL divergences, reparameterized sampling,
and precision-weighted geometric-mean fusion of anchor distributions.

Log-variances are clamped to [-10, 10] before exponentiation so optimizer
excursions cannot overflow the variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LOGVAR_LIMIT = 10.0


@dataclass
class DiagonalGaussian:
    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if not isinstance(self.mean, Tensor):
            self.mean = Tensor(self.mean)
        if not isinstance(self.logvar, Tensor):
            self.logvar = Tensor(self.logvar)
        if self.mean.shape != self.logvar.shape:
            raise ShapeError(
                f"mean shape {self.mean.shape} != logvar shape {self.logvar.shape}"
            )
        if not (np.all(np.isfinite(self.mean.data)) and np.all(np.isfinite(self.logvar.data))):
            raise ValueError("non-finite Gaussian parameters")

    @property
    def shape(self):
        return self.mean.shape

    def clamped_logvar(self) -> Tensor:
        return T.clamp(self.logvar, -LOGVAR_LIMIT, LOGVAR_LIMIT)

    def variance(self) -> Tensor:
        return T.exp(self.clamped_logvar())


def kl_to_standard(q: DiagonalGaussian) -> Tensor:
    """KL(q || N(0, I)) summed over all dimensions; always >= 0."""
    lv = q.clamped_logvar()
    var = T.exp(lv)
    terms = T.mul(q.mean, q.mean) + var - 1.0 - lv
    return T.mul(T.reduce_sum(terms), 0.5)


def kl_between(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians of identical shape."""
    if q.shape != p.shape:
        raise ShapeError(f"KL shapes differ: {q.shape} vs {p.shape}")
    lv_q = q.clamped_logvar()
    lv_p = p.clamped_logvar()
    var_q = T.exp(lv_q)
    var_p = T.exp(lv_p)
    diff = q.mean - p.mean
    terms = lv_p - lv_q + T.div(var_q + T.mul(diff, diff), var_p) - 1.0
    return T.mul(T.reduce_sum(terms), 0.5)


def sample(q: DiagonalGaussian, noise) -> Tensor:
    """Reparameterized draw mean + std * noise; gradients reach both parameters."""
    noise = noise if isinstance(noise, Tensor) else Tensor(noise)
    if noise.shape != q.shape:
        raise ShapeError(f"noise shape {noise.shape} != Gaussian shape {q.shape}")
    std = T.exp(T.mul(q.clamped_logvar(), 0.5))
    return q.mean + T.mul(std, noise)


def _stacked(anchors) -> DiagonalGaussian:
    """Accepts a list of M Gaussians or one Gaussian whose leading axis is M."""
    if isinstance(anchors, DiagonalGaussian):
        return anchors
    means = T.stack([a.mean for a in anchors], axis=0)
    logvars = T.stack([a.logvar for a in anchors], axis=0)
    return DiagonalGaussian(means, logvars)


def poe_fuse(anchors, w) -> DiagonalGaussian:
    """Weighted geometric mean of M Gaussians, which is again Gaussian.

    Fused precision is the w-weighted sum of anchor precisions; the fused
    mean is the precision-weighted mean combination. w may be a length-M
    vector or a (B, M) batch; anchors are a list of M Gaussians (or a
    stacked Gaussian with leading axis M) of any common shape.
    """
    from .simplex import SimplexWeight  # local import avoids a cycle

    if isinstance(w, SimplexWeight):
        w = Tensor(w.w)
    elif not isinstance(w, Tensor):
        w = Tensor(w)
    bank = _stacked(anchors)
    m = bank.shape[0]
    if w.shape[-1] != m:
        raise ShapeError(f"{w.shape[-1]} weights for {m} anchors")
    batched = w.ndim == 2
    wm = w if batched else T.reshape(w, (1, m))

    feat_shape = bank.shape[1:]
    d = int(np.prod(feat_shape)) if feat_shape else 1
    prec = T.exp(T.mul(bank.clamped_logvar(), -1.0))
    prec_flat = T.reshape(prec, (m, d))
    mean_prec_flat = T.reshape(T.mul(bank.mean, prec), (m, d))

    fused_prec = T.matmul(wm, prec_flat)            # (B, d)
    fused_mp = T.matmul(wm, mean_prec_flat)         # (B, d)
    fused_logvar = T.mul(T.log(fused_prec), -1.0)
    fused_mean = T.div(fused_mp, fused_prec)

    out_shape = (wm.shape[0],) + feat_shape if batched else feat_shape
    return DiagonalGaussian(
        T.reshape(fused_mean, out_shape), T.reshape(fused_logvar, out_shape)
    )
