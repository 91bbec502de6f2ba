"""Training objectives: Laplacian reconstruction, cross-entropy plus Dice
segmentation, velocity and anchor KL regularizers, the Sinkhorn alignment
term on simplex weights, the pairwise geometry regularizer, and the total
weighted objective.

Sign convention: every function here returns a quantity to be minimized
(negated log-likelihoods for the reconstruction and segmentation terms),
so all terms enter the total with a plus sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffeo as D
from . import distributions
from . import tensor as T
from . import transport
from .distributions import DiagonalGaussian
from .model import ForwardBundle
from .tensor import Tensor

DICE_SMOOTH = 1e-5


@dataclass
class LossWeights:
    lambda1: float = 1.0   # reconstruction
    lambda2: float = 0.01  # velocity KL
    lambda3: float = 0.01  # anchor KL
    lambda4: float = 3.0   # Sinkhorn alignment
    lambda5: float = 1.0   # pairwise geometry
    epsilon: float = math.pi / 10.0
    sigma_prior: float = 1.0

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)
        if any((not np.isfinite(v)) or v < 0 for v in vals):
            raise ValueError(f"loss weights must be finite and non-negative: {vals}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class LossReport:
    seg: float
    recon_source: float
    recon_target: float
    vel_source: float
    vel_target: float
    anchor: float
    align: float
    geo: float
    total: float
    batch_source: int
    batch_target: int

    FIELDS = (
        "seg", "recon_source", "recon_target", "vel_source", "vel_target",
        "anchor", "align", "geo", "total",
    )

    def values(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def loss_recon(x: Tensor, recon: Tensor, scale: Tensor) -> Tensor:
    """Negative Laplacian log-likelihood per pixel, |x - recon|/b + ln(2b),
    averaged over all pixels (and the batch when present)."""
    if x.shape != recon.shape or x.shape != scale.shape:
        raise T.ShapeError(
            f"recon loss shapes differ: {x.shape}, {recon.shape}, {scale.shape}"
        )
    if np.any(scale.data <= 0.0):
        raise T.DomainError("non-positive Laplacian scale")
    resid = T.absolute(x - recon)
    return T.reduce_mean(T.div(resid, scale) + T.log(T.mul(scale, 2.0)))


def _log_softmax(logits: Tensor, axis: int) -> Tensor:
    m = np.max(logits.data, axis=axis, keepdims=True)
    shifted = logits - Tensor(np.broadcast_to(m, logits.shape).copy())
    lse = T.log(T.reduce_sum(T.exp(shifted), axes=axis, keepdims=True))
    return shifted - T.broadcast_to(lse, logits.shape)


def soft_dice(p: Tensor, q: Tensor, foreground_only: bool = True) -> Tensor:
    """Mean soft Dice between two class-probability maps (N,K,H,W).

    Per sample and per class (background channel 0 excluded by default),
    smoothed so empty classes stay finite.
    """
    if p.shape != q.shape:
        raise T.ShapeError(f"dice shapes differ: {p.shape} vs {q.shape}")
    lo = 1 if foreground_only else 0
    pf = p[:, lo:]
    qf = q[:, lo:]
    inter = T.reduce_sum(T.mul(pf, qf), axes=(-2, -1))
    sizes = T.reduce_sum(pf, axes=(-2, -1)) + T.reduce_sum(qf, axes=(-2, -1))
    dice = T.div(T.mul(inter, 2.0) + DICE_SMOOTH, sizes + DICE_SMOOTH)
    return T.reduce_mean(dice)


def loss_seg(y_onehot: Tensor, logits: Tensor) -> Tensor:
    """Mean pixel cross-entropy plus one minus mean foreground soft Dice."""
    if y_onehot.shape != logits.shape:
        raise T.ShapeError(f"labels {y_onehot.shape} vs logits {logits.shape}")
    axis = 1 if logits.ndim == 4 else 0
    logp = _log_softmax(logits, axis)
    ce = T.mul(T.reduce_mean(T.reduce_sum(T.mul(y_onehot, logp), axes=axis)), -1.0)
    probs = T.softmax(logits, axis=axis)
    dice = soft_dice(probs, y_onehot)
    return ce + (1.0 - dice)


def loss_vel(vel_posts: list[DiagonalGaussian], sigma_prior: float = 1.0) -> Tensor:
    """Sum over levels of KL(q(v^l) || N(0, sigma^2 I)), mean over the batch."""
    if not vel_posts:
        return Tensor(0.0)
    n = vel_posts[0].shape[0]
    prior_logvar = 2.0 * math.log(sigma_prior)
    total = None
    for q in vel_posts:
        prior = DiagonalGaussian(
            Tensor(np.zeros(q.shape)), Tensor(np.full(q.shape, prior_logvar))
        )
        term = distributions.kl_between(q, prior)
        total = term if total is None else total + term
    return T.mul(total, 1.0 / n)


def loss_atlas(w, bank) -> Tensor:
    """Diagnostic only: KL of each level's fused atlas posterior to N(0, I)."""
    total = None
    for l in range(1, bank.levels + 1):
        fused = distributions.poe_fuse(bank.level(l), w)
        term = distributions.kl_to_standard(fused)
        total = term if total is None else total + term
    return total


def loss_anchor(bank) -> Tensor:
    """Mean-over-anchors, summed-over-levels KL to the standard Gaussian.

    Independent of any image; exactly levels * anchors KL evaluations.
    """
    total = None
    for l in range(1, bank.levels + 1):
        level = bank.level(l)
        m = level.shape[0]
        level_sum = None
        for i in range(m):
            term = distributions.kl_to_standard(
                DiagonalGaussian(level.mean[i], level.logvar[i])
            )
            level_sum = term if level_sum is None else level_sum + term
        term = T.mul(level_sum, 1.0 / m)
        total = term if total is None else total + term
    return total


def loss_align(source_weights, target_weights, eps: float = transport.DEFAULT_EPSILON) -> Tensor:
    """Sinkhorn divergence between the two weight batches; delegates to the
    transport solver so the standalone value matches bit for bit."""
    return transport.sinkhorn_divergence(source_weights, target_weights, eps=eps)


def loss_geo(weights: Tensor, warped_labels: Tensor) -> Tensor:
    """Pairs the Fisher-Rao similarity of weights against label Dice.

    Sum over unordered pairs of [(1 - D_FR/pi) - Dice(y_i, y_j)]^2; gradients
    reach the weights and, through the warped labels, the transformations.
    Batches smaller than two contribute zero.
    """
    n = weights.shape[0]
    if n < 2:
        return Tensor(0.0)
    fr = transport.pairwise_fisher_rao_t(weights, weights)
    total = None
    for i in range(n):
        for j in range(i + 1, n):
            sim = soft_dice(warped_labels[i : i + 1], warped_labels[j : j + 1])
            term = (1.0 - T.mul(fr[i, j], 1.0 / math.pi)) - sim
            term = T.mul(term, term)
            total = term if total is None else total + term
    return total


def total_loss(
    source: ForwardBundle,
    target: ForwardBundle | None,
    source_images: Tensor,
    target_images: Tensor | None,
    source_labels_onehot: Tensor,
    bank,
    weights: LossWeights,
    align_on: bool = True,
    geo_on: bool = True,
    anchor_on: bool = True,
    vel_on: bool = True,
) -> tuple[Tensor, LossReport]:
    """Assembles the scalar training objective.

    The target bundle contributes reconstruction and velocity terms only; a
    missing target (source-only training) also disables alignment. Ablation
    flags zero individual terms without touching the others.
    """
    bs = source.batch
    bt = target.batch if target is not None else 0

    seg = loss_seg(source_labels_onehot, source.seg_logits)
    recon_s = loss_recon(source_images, source.recon, source.scale)
    zero = Tensor(0.0)
    recon_t = (
        loss_recon(target_images, target.recon, target.scale)
        if target is not None
        else zero
    )
    vel_s = loss_vel(source.vel_posts, weights.sigma_prior) if vel_on else zero
    vel_t = (
        loss_vel(target.vel_posts, weights.sigma_prior)
        if (target is not None and vel_on)
        else zero
    )
    anchor = loss_anchor(bank) if (anchor_on and weights.lambda3 > 0) else zero
    align = (
        loss_align(source.weights, target.weights, weights.epsilon)
        if (align_on and target is not None and weights.lambda4 > 0)
        else zero
    )
    if geo_on and weights.lambda5 > 0 and bs >= 2:
        warped = D.warp_label(source_labels_onehot, source.phi)
        geo = loss_geo(source.weights, warped)
    else:
        geo = zero

    total = (
        seg
        + T.mul(recon_s + recon_t, weights.lambda1)
        + T.mul(vel_s + vel_t, weights.lambda2)
        + T.mul(anchor, weights.lambda3)
        + T.mul(align, weights.lambda4)
        + T.mul(geo, weights.lambda5)
    )
    report = LossReport(
        seg=seg.item(),
        recon_source=recon_s.item(),
        recon_target=recon_t.item(),
        vel_source=vel_s.item(),
        vel_target=vel_t.item(),
        anchor=anchor.item(),
        align=align.item(),
        geo=geo.item(),
        total=total.item(),
        batch_source=bs,
        batch_target=bt,
    )
    return total, report
