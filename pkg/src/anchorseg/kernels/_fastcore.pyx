# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: direct-loop 2-D convolution and bilinear sampling.

Same clamp and padding conventions as kernels/reference.py; summation order
differs, so cross-backend agreement is numerical, not bitwise. The stride-1
convolution paths walk raw row pointers so the innermost loops vectorize.
"""

import numpy as np

from libc.math cimport floor, rint


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t stride) noexcept nogil:
    # smallest i >= 0 with i*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t limit,
                           Py_ssize_t count) noexcept nogil:
    # one past the largest i < count with i*stride + off <= limit - 1
    cdef Py_ssize_t h = (limit - 1 - off) // stride + 1
    if h > count:
        h = count
    if h < 0:
        h = 0
    return h


cdef void _conv3x3_s1(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                      double[:, :, :, ::1] out) noexcept nogil:
    # same-pad 3x3 stride-1 fast path: row passes with the three column taps
    # fused and input channels blocked in pairs, so each output row is
    # updated once per channel pair
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0]
    cdef Py_ssize_t b, o, c, kh, oh, ow, ih, oh_lo, oh_hi, cpairs
    cdef double w0, w1, w2, u0, u1, u2
    cdef const double* xrow
    cdef const double* yrow
    cdef double* orow
    cpairs = ci - (ci % 2)
    for b in range(n):
        for o in range(co):
            for kh in range(3):
                oh_lo = 1 - kh if kh < 1 else 0
                oh_hi = h + 1 - kh if kh > 1 else h
                for c in range(0, cpairs, 2):
                    w0 = w[o, c, kh, 0]
                    w1 = w[o, c, kh, 1]
                    w2 = w[o, c, kh, 2]
                    u0 = w[o, c + 1, kh, 0]
                    u1 = w[o, c + 1, kh, 1]
                    u2 = w[o, c + 1, kh, 2]
                    for oh in range(oh_lo, oh_hi):
                        ih = oh + kh - 1
                        xrow = &x[b, c, ih, 0]
                        yrow = &x[b, c + 1, ih, 0]
                        orow = &out[b, o, oh, 0]
                        orow[0] += w1 * xrow[0] + w2 * xrow[1] + u1 * yrow[0] + u2 * yrow[1]
                        for ow in range(1, wd - 1):
                            orow[ow] += (w0 * xrow[ow - 1] + w1 * xrow[ow] + w2 * xrow[ow + 1]
                                         + u0 * yrow[ow - 1] + u1 * yrow[ow] + u2 * yrow[ow + 1])
                        orow[wd - 1] += (w0 * xrow[wd - 2] + w1 * xrow[wd - 1]
                                         + u0 * yrow[wd - 2] + u1 * yrow[wd - 1])
                if ci % 2:
                    c = ci - 1
                    w0 = w[o, c, kh, 0]
                    w1 = w[o, c, kh, 1]
                    w2 = w[o, c, kh, 2]
                    if w0 == 0.0 and w1 == 0.0 and w2 == 0.0:
                        continue
                    for oh in range(oh_lo, oh_hi):
                        ih = oh + kh - 1
                        xrow = &x[b, c, ih, 0]
                        orow = &out[b, o, oh, 0]
                        orow[0] += w1 * xrow[0] + w2 * xrow[1]
                        for ow in range(1, wd - 1):
                            orow[ow] += w0 * xrow[ow - 1] + w1 * xrow[ow] + w2 * xrow[ow + 1]
                        orow[wd - 1] += w0 * xrow[wd - 2] + w1 * xrow[wd - 1]


cdef void _conv3x3_s1_gw(const double[:, :, :, ::1] x, const double[:, :, :, ::1] gout,
                         double[:, :, :, ::1] gw) noexcept nogil:
    # kernel gradient for the same-pad 3x3 stride-1 case: three tap
    # reductions per (o, c, kh) sharing each gout row load; 4-way unrolled
    # so twelve accumulator chains hide the FMA latency
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = gout.shape[1]
    cdef Py_ssize_t b, o, c, kh, oh, ow, ih, oh_lo, oh_hi, m4
    cdef double a00, a01, a02, a03, a10, a11, a12, a13, a20, a21, a22, a23
    cdef double gv, g1, g2, g3
    cdef const double* xrow
    cdef const double* grow
    m4 = 1 + ((wd - 2) // 4) * 4
    for o in range(co):
        for c in range(ci):
            for kh in range(3):
                oh_lo = 1 - kh if kh < 1 else 0
                oh_hi = h + 1 - kh if kh > 1 else h
                a00 = a01 = a02 = a03 = 0.0
                a10 = a11 = a12 = a13 = 0.0
                a20 = a21 = a22 = a23 = 0.0
                for b in range(n):
                    for oh in range(oh_lo, oh_hi):
                        ih = oh + kh - 1
                        xrow = &x[b, c, ih, 0]
                        grow = &gout[b, o, oh, 0]
                        gv = grow[0]
                        a10 += gv * xrow[0]
                        a20 += gv * xrow[1]
                        for ow in range(1, m4, 4):
                            gv = grow[ow]
                            g1 = grow[ow + 1]
                            g2 = grow[ow + 2]
                            g3 = grow[ow + 3]
                            a00 += gv * xrow[ow - 1]
                            a10 += gv * xrow[ow]
                            a20 += gv * xrow[ow + 1]
                            a01 += g1 * xrow[ow]
                            a11 += g1 * xrow[ow + 1]
                            a21 += g1 * xrow[ow + 2]
                            a02 += g2 * xrow[ow + 1]
                            a12 += g2 * xrow[ow + 2]
                            a22 += g2 * xrow[ow + 3]
                            a03 += g3 * xrow[ow + 2]
                            a13 += g3 * xrow[ow + 3]
                            a23 += g3 * xrow[ow + 4]
                        for ow in range(m4, wd - 1):
                            gv = grow[ow]
                            a00 += gv * xrow[ow - 1]
                            a10 += gv * xrow[ow]
                            a20 += gv * xrow[ow + 1]
                        gv = grow[wd - 1]
                        a00 += gv * xrow[wd - 2]
                        a10 += gv * xrow[wd - 1]
                gw[o, c, kh, 0] = (a00 + a01) + (a02 + a03)
                gw[o, c, kh, 1] = (a10 + a11) + (a12 + a13)
                gw[o, c, kh, 2] = (a20 + a21) + (a22 + a23)


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - k) // stride + 1
    out_arr = np.zeros((n, co, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    if k == 3 and stride == 1 and pad == 1 and h >= 2 and wd >= 2:
        with nogil:
            _conv3x3_s1(x, w, out)
        return out_arr
    cdef Py_ssize_t b, o, c, kh, kw, oh, ow, ih_off, iw_off
    cdef Py_ssize_t oh_lo, oh_hi, ow_lo, ow_hi, ih
    cdef double wv
    with nogil:
        for b in range(n):
            for o in range(co):
                for c in range(ci):
                    for kh in range(k):
                        ih_off = kh - pad
                        oh_lo = _lo(ih_off, stride)
                        oh_hi = _hi(ih_off, stride, h, ho)
                        for kw in range(k):
                            wv = w[o, c, kh, kw]
                            if wv == 0.0:
                                continue
                            iw_off = kw - pad
                            ow_lo = _lo(iw_off, stride)
                            ow_hi = _hi(iw_off, stride, wd, wo)
                            if stride == 1:
                                for oh in range(oh_lo, oh_hi):
                                    xrow = &x[b, c, oh + ih_off, iw_off]
                                    orow = &out[b, o, oh, 0]
                                    for ow in range(ow_lo, ow_hi):
                                        orow[ow] += wv * xrow[ow]
                            else:
                                for oh in range(oh_lo, oh_hi):
                                    ih = oh * stride + ih_off
                                    for ow in range(ow_lo, ow_hi):
                                        out[b, o, oh, ow] += wv * x[b, c, ih, ow * stride + iw_off]
    return out_arr


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] gout, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    gx_arr = np.zeros((n, ci, h, wd), dtype=np.float64)
    gw_arr = np.zeros((co, ci, k, k), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef const double[:, :, :, ::1] wt
    if k == 3 and stride == 1 and pad == 1 and h >= 2 and wd >= 2:
        # input gradient is itself a same-pad 3x3 correlation of gout with
        # the spatially flipped, channel-transposed kernels
        wt_arr = np.ascontiguousarray(
            np.asarray(w)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        )
        wt = wt_arr
        with nogil:
            _conv3x3_s1(gout, wt, gx)
            _conv3x3_s1_gw(x, gout, gw)
        return gx_arr, gw_arr
    cdef Py_ssize_t b, o, c, kh, kw, oh, ow, ih_off, iw_off
    cdef Py_ssize_t oh_lo, oh_hi, ow_lo, ow_hi, ih, m4
    cdef double wv, acc, a0, a1, a2, a3
    cdef const double* xrow
    cdef const double* grow
    cdef double* gxrow
    with nogil:
        for b in range(n):
            for o in range(co):
                for c in range(ci):
                    for kh in range(k):
                        ih_off = kh - pad
                        oh_lo = _lo(ih_off, stride)
                        oh_hi = _hi(ih_off, stride, h, ho)
                        for kw in range(k):
                            wv = w[o, c, kh, kw]
                            iw_off = kw - pad
                            ow_lo = _lo(iw_off, stride)
                            ow_hi = _hi(iw_off, stride, wd, wo)
                            acc = 0.0
                            if stride == 1:
                                m4 = ow_lo + ((ow_hi - ow_lo) // 4) * 4
                                for oh in range(oh_lo, oh_hi):
                                    xrow = &x[b, c, oh + ih_off, iw_off]
                                    gxrow = &gx[b, c, oh + ih_off, iw_off]
                                    grow = &gout[b, o, oh, 0]
                                    # four accumulators hide the FMA latency chain
                                    a0 = 0.0
                                    a1 = 0.0
                                    a2 = 0.0
                                    a3 = 0.0
                                    for ow in range(ow_lo, m4, 4):
                                        a0 += grow[ow] * xrow[ow]
                                        a1 += grow[ow + 1] * xrow[ow + 1]
                                        a2 += grow[ow + 2] * xrow[ow + 2]
                                        a3 += grow[ow + 3] * xrow[ow + 3]
                                    for ow in range(m4, ow_hi):
                                        a0 += grow[ow] * xrow[ow]
                                    acc += (a0 + a1) + (a2 + a3)
                                    if wv != 0.0:
                                        for ow in range(ow_lo, ow_hi):
                                            gxrow[ow] += grow[ow] * wv
                            else:
                                for oh in range(oh_lo, oh_hi):
                                    ih = oh * stride + ih_off
                                    for ow in range(ow_lo, ow_hi):
                                        acc += gout[b, o, oh, ow] * x[b, c, ih, ow * stride + iw_off]
                                        gx[b, c, ih, ow * stride + iw_off] += gout[b, o, oh, ow] * wv
                            gw[o, c, kh, kw] += acc
    return gx_arr, gw_arr


def grid_sample_forward(const double[:, :, :, ::1] img, const double[:, :, :, ::1] coords, bint nearest):
    cdef Py_ssize_t n = img.shape[0], c = img.shape[1], h = img.shape[2], w = img.shape[3]
    cdef Py_ssize_t ho = coords.shape[2], wo = coords.shape[3]
    out_arr = np.empty((n, c, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, r0, c0, r1, c1
    cdef double r, cc, wr, wc
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    r = coords[b, 0, i, j]
                    cc = coords[b, 1, i, j]
                    if r < 0.0:
                        r = 0.0
                    elif r > h - 1:
                        r = h - 1
                    if cc < 0.0:
                        cc = 0.0
                    elif cc > w - 1:
                        cc = w - 1
                    if nearest:
                        r0 = <Py_ssize_t>rint(r)
                        c0 = <Py_ssize_t>rint(cc)
                        for ch in range(c):
                            out[b, ch, i, j] = img[b, ch, r0, c0]
                    else:
                        r0 = <Py_ssize_t>floor(r)
                        if r0 > h - 2:
                            r0 = h - 2
                        if r0 < 0:
                            r0 = 0
                        c0 = <Py_ssize_t>floor(cc)
                        if c0 > w - 2:
                            c0 = w - 2
                        if c0 < 0:
                            c0 = 0
                        r1 = r0 + 1 if r0 + 1 < h else h - 1
                        c1 = c0 + 1 if c0 + 1 < w else w - 1
                        wr = r - r0
                        wc = cc - c0
                        for ch in range(c):
                            out[b, ch, i, j] = (
                                img[b, ch, r0, c0] * (1.0 - wr) * (1.0 - wc)
                                + img[b, ch, r0, c1] * (1.0 - wr) * wc
                                + img[b, ch, r1, c0] * wr * (1.0 - wc)
                                + img[b, ch, r1, c1] * wr * wc
                            )
    return out_arr


def grid_sample_backward(const double[:, :, :, ::1] img, const double[:, :, :, ::1] coords,
                         const double[:, :, :, ::1] gout, bint nearest):
    cdef Py_ssize_t n = img.shape[0], c = img.shape[1], h = img.shape[2], w = img.shape[3]
    cdef Py_ssize_t ho = coords.shape[2], wo = coords.shape[3]
    gimg_arr = np.zeros((n, c, h, w), dtype=np.float64)
    gcoords_arr = np.zeros((n, 2, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] gimg = gimg_arr
    cdef double[:, :, :, ::1] gcoords = gcoords_arr
    cdef Py_ssize_t b, ch, i, j, r0, c0, r1, c1
    cdef double r, cc, wr, wc, g, dr, dc, rraw, craw
    cdef bint in_r, in_c
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    rraw = coords[b, 0, i, j]
                    craw = coords[b, 1, i, j]
                    r = rraw
                    cc = craw
                    if r < 0.0:
                        r = 0.0
                    elif r > h - 1:
                        r = h - 1
                    if cc < 0.0:
                        cc = 0.0
                    elif cc > w - 1:
                        cc = w - 1
                    if nearest:
                        r0 = <Py_ssize_t>rint(r)
                        c0 = <Py_ssize_t>rint(cc)
                        for ch in range(c):
                            gimg[b, ch, r0, c0] += gout[b, ch, i, j]
                        continue
                    r0 = <Py_ssize_t>floor(r)
                    if r0 > h - 2:
                        r0 = h - 2
                    if r0 < 0:
                        r0 = 0
                    c0 = <Py_ssize_t>floor(cc)
                    if c0 > w - 2:
                        c0 = w - 2
                    if c0 < 0:
                        c0 = 0
                    r1 = r0 + 1 if r0 + 1 < h else h - 1
                    c1 = c0 + 1 if c0 + 1 < w else w - 1
                    wr = r - r0
                    wc = cc - c0
                    in_r = 0.0 < rraw < h - 1.0
                    in_c = 0.0 < craw < w - 1.0
                    dr = 0.0
                    dc = 0.0
                    for ch in range(c):
                        g = gout[b, ch, i, j]
                        gimg[b, ch, r0, c0] += g * (1.0 - wr) * (1.0 - wc)
                        gimg[b, ch, r0, c1] += g * (1.0 - wr) * wc
                        gimg[b, ch, r1, c0] += g * wr * (1.0 - wc)
                        gimg[b, ch, r1, c1] += g * wr * wc
                        dr += g * ((img[b, ch, r1, c0] - img[b, ch, r0, c0]) * (1.0 - wc)
                                   + (img[b, ch, r1, c1] - img[b, ch, r0, c1]) * wc)
                        dc += g * ((img[b, ch, r0, c1] - img[b, ch, r0, c0]) * (1.0 - wr)
                                   + (img[b, ch, r1, c1] - img[b, ch, r1, c0]) * wr)
                    if in_r:
                        gcoords[b, 0, i, j] = dr
                    if in_c:
                        gcoords[b, 1, i, j] = dc
    return gimg_arr, gcoords_arr
