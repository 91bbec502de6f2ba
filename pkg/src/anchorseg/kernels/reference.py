"""Pure numpy implementations of the hot kernels.

conv2d goes through an im2col view plus a BLAS matmul; grid sampling uses
fancy indexing. These are the fallback when the compiled extension is not
built, and the ground truth the extension is tested against.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = as_strided(
        xp,
        shape=(n, c, ho, wo, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    return win


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _im2col(xp, k, stride, ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(out, 3, 1))


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, gout: np.ndarray, stride: int, pad: int
) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    _, _, ho, wo = gout.shape

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _im2col(xp, k, stride, ho, wo)
    # (n,c,ho,wo,k,k) x (n,co,ho,wo) contracted over n,ho,wo -> (c,k,k,co)
    gw = np.tensordot(win, gout, axes=([0, 2, 3], [0, 2, 3]))
    gw = np.ascontiguousarray(np.transpose(gw, (3, 0, 1, 2)))

    # grad wrt x: dilate gout by the stride, pad, correlate with flipped kernels
    if stride > 1:
        gd = np.zeros((n, co, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
        gd[:, :, ::stride, ::stride] = gout
    else:
        gd = gout
    # output of the transposed pass must land exactly on the padded input span
    hp, wp = h + 2 * pad, wd + 2 * pad
    add_h = hp - (gd.shape[2] + k - 1)
    add_w = wp - (gd.shape[3] + k - 1)
    gp = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1 + add_h), (k - 1, k - 1 + add_w)))
    wf = np.ascontiguousarray(np.transpose(w[:, :, ::-1, ::-1], (1, 0, 2, 3)))
    win_g = _im2col(gp, k, 1, hp, wp)
    gx_p = np.tensordot(win_g, wf, axes=([1, 4, 5], [1, 2, 3]))
    gx_p = np.moveaxis(gx_p, 3, 1)
    if pad:
        gx_p = gx_p[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gx_p), gw


def _bilinear_setup(img: np.ndarray, coords: np.ndarray):
    n, c, h, w = img.shape
    r = np.clip(coords[:, 0], 0.0, h - 1.0)
    cc = np.clip(coords[:, 1], 0.0, w - 1.0)
    r0 = np.minimum(np.floor(r), h - 2).astype(np.intp) if h > 1 else np.zeros_like(r, dtype=np.intp)
    c0 = np.minimum(np.floor(cc), w - 2).astype(np.intp) if w > 1 else np.zeros_like(cc, dtype=np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = r - r0
    wc = cc - c0
    return r, cc, r0, c0, r1, c1, wr, wc


def grid_sample_forward(img: np.ndarray, coords: np.ndarray, nearest: bool) -> np.ndarray:
    n, c, h, w = img.shape
    nidx = np.arange(n)[:, None, None]
    if nearest:
        r = np.clip(np.rint(coords[:, 0]), 0, h - 1).astype(np.intp)
        cc = np.clip(np.rint(coords[:, 1]), 0, w - 1).astype(np.intp)
        out = img[nidx, :, r, cc]
        return np.ascontiguousarray(np.moveaxis(out, 3, 1))
    _, _, r0, c0, r1, c1, wr, wc = _bilinear_setup(img, coords)
    v00 = img[nidx, :, r0, c0]
    v01 = img[nidx, :, r0, c1]
    v10 = img[nidx, :, r1, c0]
    v11 = img[nidx, :, r1, c1]
    wr_ = wr[..., None]
    wc_ = wc[..., None]
    out = (
        v00 * (1 - wr_) * (1 - wc_)
        + v01 * (1 - wr_) * wc_
        + v10 * wr_ * (1 - wc_)
        + v11 * wr_ * wc_
    )
    return np.ascontiguousarray(np.moveaxis(out, 3, 1))


def grid_sample_backward(
    img: np.ndarray, coords: np.ndarray, gout: np.ndarray, nearest: bool
) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = img.shape
    gimg = np.zeros_like(img)
    gcoords = np.zeros_like(coords)
    nidx = np.arange(n)[:, None, None]
    go = np.moveaxis(gout, 1, 3)  # (n,ho,wo,c)
    if nearest:
        r = np.clip(np.rint(coords[:, 0]), 0, h - 1).astype(np.intp)
        cc = np.clip(np.rint(coords[:, 1]), 0, w - 1).astype(np.intp)
        np.add.at(gimg, (nidx, slice(None), r, cc), go)
        return gimg, gcoords
    r, cc, r0, c0, r1, c1, wr, wc = _bilinear_setup(img, coords)
    wr_ = wr[..., None]
    wc_ = wc[..., None]
    np.add.at(gimg, (nidx, slice(None), r0, c0), go * (1 - wr_) * (1 - wc_))
    np.add.at(gimg, (nidx, slice(None), r0, c1), go * (1 - wr_) * wc_)
    np.add.at(gimg, (nidx, slice(None), r1, c0), go * wr_ * (1 - wc_))
    np.add.at(gimg, (nidx, slice(None), r1, c1), go * wr_ * wc_)

    v00 = img[nidx, :, r0, c0]
    v01 = img[nidx, :, r0, c1]
    v10 = img[nidx, :, r1, c0]
    v11 = img[nidx, :, r1, c1]
    dr = (v10 - v00) * (1 - wc_) + (v11 - v01) * wc_
    dc = (v01 - v00) * (1 - wr_) + (v11 - v10) * wr_
    # clamped coordinates carry no gradient
    in_r = (coords[:, 0] > 0.0) & (coords[:, 0] < h - 1.0)
    in_c = (coords[:, 1] > 0.0) & (coords[:, 1] < w - 1.0)
    gcoords[:, 0] = np.sum(go * dr, axis=-1) * in_r
    gcoords[:, 1] = np.sum(go * dc, axis=-1) * in_c
    return gimg, gcoords
