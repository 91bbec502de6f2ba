"""Entropic optimal transport between uniform empirical distributions of
simplex weights, with the Fisher-Rao distance as ground cost, and the
debiased Sinkhorn divergence built from it.

The solver iterates in the log domain: with ground costs up to pi and
epsilon = pi/10, Gibbs kernel entries reach e^-10 and linear-domain scaling
would lose precision long before the marginals converge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .simplex import SimplexWeight, fisher_rao
from .tensor import Tensor

DEFAULT_EPSILON = math.pi / 10.0
DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 10_000
DEFAULT_UNROLL = 50


class SinkhornConvergenceError(RuntimeError):
    def __init__(self, violation: float, iterations: int):
        super().__init__(
            f"marginal violation {violation:.3e} after {iterations} iterations"
        )
        self.violation = violation
        self.iterations = iterations


@dataclass
class EmpiricalBatch:
    """Uniformly weighted atoms on the simplex."""

    atoms: list[SimplexWeight]

    def __post_init__(self):
        if len(self.atoms) < 1:
            raise ValueError("empty batch")
        m = len(self.atoms[0])
        if any(len(a) != m for a in self.atoms):
            raise ValueError("atoms have mixed dimensions")

    def __len__(self):
        return len(self.atoms)

    @property
    def masses(self) -> np.ndarray:
        b = len(self.atoms)
        return np.full(b, 1.0 / b)

    def as_matrix(self) -> np.ndarray:
        return np.stack([a.w for a in self.atoms], axis=0)


@dataclass
class CostMatrix:
    matrix: np.ndarray


@dataclass
class TransportPlan:
    matrix: np.ndarray
    f: np.ndarray
    g: np.ndarray
    iterations: int
    marginal_violation: float
    violation_history: list[float] = field(default_factory=list)


def cost_matrix(a: EmpiricalBatch, b: EmpiricalBatch) -> CostMatrix:
    """Pairwise Fisher-Rao distances; the diagonal of cost_matrix(A, A) is 0."""
    wa = a.as_matrix()
    wb = b.as_matrix()
    if wa.shape[1] != wb.shape[1]:
        raise ValueError("batches live on different simplices")
    out = np.empty((wa.shape[0], wb.shape[0]))
    for i in range(wa.shape[0]):
        for j in range(wb.shape[0]):
            out[i, j] = fisher_rao(a.atoms[i], b.atoms[j])
    return CostMatrix(out)


def _log_marginal_violation(logplan: np.ndarray, loga: np.ndarray, logb: np.ndarray) -> float:
    rows = np.exp(_np_lse(logplan, axis=1))
    cols = np.exp(_np_lse(logplan, axis=0))
    return float(
        max(np.max(np.abs(rows - np.exp(loga))), np.max(np.abs(cols - np.exp(logb))))
    )


def _np_lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _np_sinkhorn(
    cost: np.ndarray,
    loga: np.ndarray,
    logb: np.ndarray,
    eps: float,
    tol: float,
    max_iter: int,
):
    """Log-domain fixed point; returns potentials and the violation trace."""
    f = np.zeros(cost.shape[0])
    g = np.zeros(cost.shape[1])
    history: list[float] = []
    it = 0
    while it < max_iter:
        f = -eps * _np_lse(logb[None, :] + (g[None, :] - cost) / eps, axis=1)
        g = -eps * _np_lse(loga[:, None] + (f[:, None] - cost) / eps, axis=0)
        it += 1
        logplan = loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - cost) / eps
        v = _log_marginal_violation(logplan, loga, logb)
        history.append(v)
        if v <= tol:
            break
    return f, g, history, it


def _primal_value(
    plan: np.ndarray, cost: np.ndarray, f: np.ndarray, g: np.ndarray
) -> float:
    # eps * log(dplan / d(a x b)) = f_i + g_j - C_ij for the exponential plan
    return float(np.sum(plan * cost) + np.sum(plan * (f[:, None] + g[None, :] - cost)))


def entropic_ot(
    a: EmpiricalBatch,
    b: EmpiricalBatch,
    eps: float = DEFAULT_EPSILON,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> tuple[float, TransportPlan]:
    """Solves regularized transport between two uniform empirical batches.

    Returns the primal objective <C, plan> + eps * KL(plan || a x b) at the
    converged plan, plus the plan itself with its dual potentials.
    """
    if eps <= 0.0:
        raise ValueError(f"epsilon must be positive, got {eps}")
    c = cost_matrix(a, b).matrix
    loga = np.log(a.masses)
    logb = np.log(b.masses)
    f, g, history, it = _np_sinkhorn(c, loga, logb, eps, tol, max_iter)
    logplan = loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - c) / eps
    plan = np.exp(logplan)
    violation = history[-1]
    if violation > tol:
        raise SinkhornConvergenceError(violation, it)
    value = _primal_value(plan, c, f, g)
    return value, TransportPlan(plan, f, g, it, violation, history)


# ---- differentiable path ---------------------------------------------------


def _as_weight_tensor(batch) -> Tensor:
    if isinstance(batch, Tensor):
        if batch.ndim != 2:
            raise ValueError(f"weight batch tensor must be (B, M), got {batch.shape}")
        return batch
    if isinstance(batch, EmpiricalBatch):
        return Tensor(batch.as_matrix())
    raise TypeError(f"cannot interpret {type(batch).__name__} as a weight batch")


def pairwise_fisher_rao_t(wa: Tensor, wb: Tensor) -> Tensor:
    """Differentiable pairwise Fisher-Rao cost, 2*arccos(sqrt(wa) sqrt(wb)^T).

    The arccos argument is clamped to [-1, 1]; its gradient is defined as 0
    within 1e-12 of the endpoints, which covers the zero-distance diagonal of
    self-transport costs.
    """
    inner = T.matmul(T.sqrt(wa), T.transpose(T.sqrt(wb)))
    return T.mul(T.arccos_clamped(inner), 2.0)


def _ot_value_t(
    wa: Tensor,
    wb: Tensor,
    eps: float,
    tol: float,
    max_iter: int,
    unroll: int,
    self_term: bool = False,
) -> Tensor:
    """Entropic OT value, differentiable w.r.t. the atom coordinates.

    A non-differentiated log-domain warm start runs until the marginals
    converge, then `unroll` further iterations are replayed through the
    autodiff graph so the returned value carries exact gradients of the
    computed quantity. For self-transport the cost diagonal is pinned to
    its exact value 0, removing the rounding jitter of arccos near 1.
    """
    bs, bt = wa.shape[0], wb.shape[0]
    loga = np.full(bs, -math.log(bs))
    logb = np.full(bt, -math.log(bt))

    cost_t = pairwise_fisher_rao_t(wa, wb)
    if self_term:
        if bs != bt:
            raise ValueError("self-transport needs a square cost")
        cost_t = T.mul(cost_t, Tensor(1.0 - np.eye(bs)))
    c = cost_t.data

    warm_budget = max(max_iter - unroll, 0)
    f0, g0, history, _it = _np_sinkhorn(c, loga, logb, eps, tol, warm_budget)

    f = Tensor(f0)
    g = Tensor(g0)
    loga_col = Tensor(loga[:, None])
    logb_row = Tensor(logb[None, :])
    loga_b = T.broadcast_to(loga_col, (bs, bt))
    logb_b = T.broadcast_to(logb_row, (bs, bt))

    def col(v: Tensor) -> Tensor:
        return T.broadcast_to(T.reshape(v, (bs, 1)), (bs, bt))

    def row(v: Tensor) -> Tensor:
        return T.broadcast_to(T.reshape(v, (1, bt)), (bs, bt))

    for _ in range(unroll):
        f = T.mul(T.logsumexp(logb_b + T.mul(row(g) - cost_t, 1.0 / eps), axis=1), -eps)
        g = T.mul(T.logsumexp(loga_b + T.mul(col(f) - cost_t, 1.0 / eps), axis=0), -eps)

    shift = col(f) + row(g) - cost_t
    logplan = loga_b + logb_b + T.mul(shift, 1.0 / eps)
    plan = T.exp(logplan)
    violation = _log_marginal_violation(logplan.data, loga, logb)
    if violation > tol:
        raise SinkhornConvergenceError(violation, warm_budget + unroll)
    value = T.reduce_sum(T.mul(plan, cost_t)) + T.reduce_sum(T.mul(plan, shift))
    return value


def sinkhorn_divergence(
    a,
    b,
    eps: float = DEFAULT_EPSILON,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    unroll: int = DEFAULT_UNROLL,
) -> Tensor:
    """Debiased divergence OT(a,b) - OT(a,a)/2 - OT(b,b)/2 at one epsilon.

    Accepts EmpiricalBatch or (B, M) weight Tensors; with Tensor inputs the
    result is differentiable w.r.t. every atom coordinate.
    """
    if eps <= 0.0:
        raise ValueError(f"epsilon must be positive, got {eps}")
    wa = _as_weight_tensor(a)
    wb = _as_weight_tensor(b)
    # bit-identical batches make the cross term a self term; masking its
    # diagonal keeps the debiased value of coincident batches exactly zero
    coincident = wa.shape == wb.shape and np.array_equal(wa.data, wb.data)
    v_ab = _ot_value_t(wa, wb, eps, tol, max_iter, unroll, self_term=coincident)
    v_aa = _ot_value_t(wa, wa, eps, tol, max_iter, unroll, self_term=True)
    v_bb = _ot_value_t(wb, wb, eps, tol, max_iter, unroll, self_term=True)
    return v_ab - T.mul(v_aa + v_bb, 0.5)
