"""Shared test utilities: finite-difference gradient checking."""

import numpy as np

from anchorseg.tensor import Tensor


def fd_gradient(f, x: Tensor, h=1e-5):
    """Central finite differences of a scalar-valued callable wrt x.data."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f().item()
        flat[i] = old - h
        fm = f().item()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_against_fd(f, x: Tensor, rtol=1e-6, h=1e-5):
    x.zero_grad()
    out = f()
    out.backward()
    num = fd_gradient(f, x, h)
    an = x.grad
    denom = np.maximum(np.maximum(np.abs(num), np.abs(an)), 1e-8)
    assert np.max(np.abs(num - an) / denom) <= rtol
