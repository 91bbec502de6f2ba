"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: exact-shape or scalar broadcasting only, 2-D matmul,
2-D convolution and bilinear grid sampling (both dispatched to the kernel
backend), the handful of elementwise and reduction ops the networks and
losses need. Everything is float64.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the operation."""


_GRAD_ENABLED = True

# arccos gradient is treated as 0 once the clamped argument is this close
# to +-1; the self-distance diagonal of transport cost matrices lands here.
ARCCOS_FLAT_MARGIN = 1e-12


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # ---- basic introspection -------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ---- autograd plumbing ---------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad over the whole graph.

        self must hold a single element. Each graph node is visited once,
        in reverse topological order.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method aliases used all over the model code
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def relu(self):
        return relu(self)

    def leaky_relu(self, alpha=0.2):
        return leaky_relu(self, alpha)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce_max(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # accumulation always builds a new array, so sharing g between tensors
    # is safe as long as nobody mutates .grad in place
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    """Exact-match or single-element broadcast; anything else is an error."""
    if a.shape == b.shape:
        return a.shape
    if a.size == 1:
        return b.shape
    if b.size == 1:
        return a.shape
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not match "
                     "(only exact-shape or scalar broadcast is supported)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse a gradient back onto a scalar-broadcast operand."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape else np.asarray(np.sum(g))


# ---- elementwise binary ops ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(-g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bwd)


# ---- elementwise unary ops -----------------------------------------------


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("log of negative value")
    out_data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    out_data = np.sqrt(a.data)

    def bwd(g):
        # subgradient 0 at exactly 0 so simplex vertices do not emit inf
        denom = 2.0 * out_data
        gx = np.where(denom > 0.0, g / np.where(denom > 0.0, denom, 1.0), 0.0)
        _accum(a, gx)

    return _make(out_data, (a,), bwd)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.abs(a.data)

    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return _make(out_data, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0.0))

    return _make(out_data, (a,), bwd)


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    out_data = np.where(a.data > 0.0, a.data, alpha * a.data)

    def bwd(g):
        _accum(a, g * np.where(a.data > 0.0, 1.0, alpha))

    return _make(out_data, (a,), bwd)


def arccos_clamped(a) -> Tensor:
    """arccos with the argument clipped to [-1, 1].

    Within ARCCOS_FLAT_MARGIN of the endpoints the derivative of arccos
    diverges; the gradient is defined as 0 there.
    """
    a = _as_tensor(a)
    if np.any(np.isnan(a.data)):
        raise DomainError("arccos of NaN")
    clipped = np.clip(a.data, -1.0, 1.0)
    out_data = np.arccos(clipped)

    def bwd(g):
        flat = np.abs(a.data) > 1.0 - ARCCOS_FLAT_MARGIN
        denom = np.sqrt(np.maximum(1.0 - clipped * clipped, ARCCOS_FLAT_MARGIN))
        _accum(a, np.where(flat, 0.0, -g / denom))

    return _make(out_data, (a,), bwd)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def bwd(g):
        _accum(a, g / (1.0 + np.exp(-a.data)))

    return _make(out_data, (a,), bwd)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clips values; gradient passes only where the input was inside [lo, hi]."""
    a = _as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def bwd(g):
        _accum(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make(out_data, (a,), bwd)


# ---- matmul / conv / sampling --------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def conv2d(x, weight, stride: int = 1, padding: int | None = None, bias=None) -> Tensor:
    """2-D cross-correlation. x is (C,H,W) or (N,C,H,W); weight is (Co,Ci,k,k).

    k must be odd; padding defaults to (k-1)//2 which preserves spatial size
    at stride 1. bias, when given, is a length-Co vector added per channel.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: got input {x.shape}, kernels {weight.shape}")
    n, ci, h, w = xd.shape
    co, ci_k, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernels must be square with odd size, got {kh}x{kw}")
    if ci != ci_k:
        raise ShapeError(f"conv2d channel mismatch: input {ci}, kernels expect {ci_k}")
    if padding is None:
        padding = (kh - 1) // 2
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d kernel larger than padded input")
    xc = np.ascontiguousarray(xd)
    wc = np.ascontiguousarray(weight.data)
    out_data = kernels.conv2d_forward(xc, wc, stride, padding)
    if bias is not None:
        if bias.shape != (co,):
            raise ShapeError(f"conv2d bias must be ({co},), got {bias.shape}")
        out_data += bias.data[:, None, None]

    def bwd(g):
        g4 = np.ascontiguousarray(g[None] if squeeze else g)
        gx, gw = kernels.conv2d_backward(xc, wc, g4, stride, padding)
        if x.requires_grad:
            _accum(x, gx[0] if squeeze else gx)
        if weight.requires_grad:
            _accum(weight, gw)
        if bias is not None and bias.requires_grad:
            _accum(bias, g4.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out_data[0] if squeeze else out_data, parents, bwd)
    return out


def grid_sample(img, coords, mode: str = "bilinear") -> Tensor:
    """Samples img at fractional pixel coordinates with clamp-to-edge borders.

    img: (C,H,W) or (N,C,H,W); coords: (2,Ho,Wo) or (N,2,Ho,Wo) holding
    absolute row/col positions. Bilinear mode is differentiable in both
    arguments, nearest only in the image.
    """
    img, coords = _as_tensor(img), _as_tensor(coords)
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"grid_sample: unknown mode {mode!r}")
    squeeze = img.ndim == 3
    im = img.data[None] if squeeze else img.data
    cd = coords.data[None] if coords.ndim == 3 else coords.data
    if im.ndim != 4 or cd.ndim != 4 or cd.shape[1] != 2:
        raise ShapeError(f"grid_sample: image {img.shape}, coords {coords.shape}")
    if im.shape[0] != cd.shape[0]:
        raise ShapeError("grid_sample: batch sizes differ")
    imc = np.ascontiguousarray(im)
    cdc = np.ascontiguousarray(cd)
    nearest = mode == "nearest"
    out_data = kernels.grid_sample_forward(imc, cdc, nearest)

    def bwd(g):
        g4 = np.ascontiguousarray(g[None] if squeeze else g)
        gi, gc = kernels.grid_sample_backward(imc, cdc, g4, nearest)
        if img.requires_grad:
            _accum(img, gi[0] if squeeze else gi)
        if coords.requires_grad:
            gcr = gc[0] if coords.ndim == 3 else gc
            _accum(coords, gcr)

    return _make(out_data[0] if squeeze else out_data, (img, coords), bwd)


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalizes each (sample, channel) slice over its spatial extent.

    Single fused graph node; pair with channel_affine for a learnable affine.
    """
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"instance_norm expects (C,H,W) or (N,C,H,W), got {x.shape}")
    axes = (-2, -1)
    mu = np.mean(x.data, axis=axes, keepdims=True)
    var = np.var(x.data, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = (x.data - mu) * inv

    def bwd(g):
        gm = np.mean(g, axis=axes, keepdims=True)
        gy = np.mean(g * out_data, axis=axes, keepdims=True)
        _accum(x, inv * (g - gm - out_data * gy))

    return _make(out_data, (x,), bwd)


def channel_affine(x, gain, shift) -> Tensor:
    """y[n,c] = x[n,c] * gain + shift with per-channel (C,) or per-sample
    per-channel (N,C) parameters; one fused node instead of a broadcast chain."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    if x.ndim != 4:
        raise ShapeError(f"channel_affine expects (N,C,H,W), got {x.shape}")
    n, c = x.shape[0], x.shape[1]
    if gain.shape != shift.shape or gain.shape not in ((c,), (n, c)):
        raise ShapeError(
            f"gain/shift must both be ({c},) or ({n},{c}), got {gain.shape}, {shift.shape}"
        )
    per_sample = gain.ndim == 2
    gview = gain.data[:, :, None, None] if per_sample else gain.data[None, :, None, None]
    sview = shift.data[:, :, None, None] if per_sample else shift.data[None, :, None, None]
    out_data = x.data * gview + sview

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * gview)
        sum_axes = (2, 3) if per_sample else (0, 2, 3)
        if gain.requires_grad:
            _accum(gain, np.sum(g * x.data, axis=sum_axes))
        if shift.requires_grad:
            _accum(shift, np.sum(g, axis=sum_axes))

    return _make(out_data, (x, gain, shift), bwd)


# ---- reductions -----------------------------------------------------------


def _norm_axes(axes, ndim: int):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"reduce axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce_sum(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    out_data = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), bwd)


def reduce_mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_data = np.mean(a.data, axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg / count, a.shape).copy())

    return _make(out_data, (a,), bwd)


def reduce_max(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    out_data = np.max(a.data, axis=axes, keepdims=True)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        mask = (a.data == out_data).astype(np.float64)
        mask /= np.sum(mask, axis=axes, keepdims=True)
        _accum(a, mask * gg)

    return _make(out_data if keepdims else np.squeeze(out_data, axis=axes), (a,), bwd)


def logsumexp(a, axis: int) -> Tensor:
    """Max-shifted log-sum-exp along one axis (fused single node)."""
    a = _as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(s), axis=axis)

    def bwd(g):
        _accum(a, np.expand_dims(g, axis) * (e / s))

    return _make(out_data, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along one axis."""
    a = _as_tensor(a)
    if np.any(np.isnan(a.data)):
        raise DomainError("softmax of NaN input")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        inner = np.sum(g * out_data, axis=axis, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _make(out_data, (a,), bwd)


# ---- shape ops -------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = np.reshape(a.data, shape)

    def bwd(g):
        _accum(a, np.reshape(g, a.shape))

    return _make(out_data, (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make(out_data, (a,), bwd)


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    a = _as_tensor(a)
    shape = tuple(shape)
    out_data = np.broadcast_to(a.data, shape).copy()
    lead = len(shape) - a.ndim
    if lead < 0:
        raise ShapeError(f"broadcast_to cannot drop dims: {a.shape} -> {shape}")
    summed_axes = tuple(range(lead)) + tuple(
        lead + i for i in range(a.ndim) if a.shape[i] == 1 and shape[lead + i] != 1
    )

    def bwd(g):
        gg = np.sum(g, axis=summed_axes, keepdims=True) if summed_axes else g
        _accum(a, np.reshape(gg, a.shape))

    return _make(out_data, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), bwd)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data[idx]
    if isinstance(out_data, np.ndarray) and out_data.base is not None:
        out_data = out_data.copy()

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[idx] = g
        _accum(a, gx)

    return _make(out_data, (a,), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return _make(out_data, tuple(tensors), bwd)
