# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels.

Same contracts as the numpy backend: im2col/col2im feed the BLAS matmul
that stays on the Python side, pooling returns flat per-plane argmax
indices, and the sampler snaps near-integer pixel coordinates so
identity warps reproduce the input exactly.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor, rint, fabs

cnp.import_array()

ctypedef fused floating:
    float
    double

DEF SNAP_EPS = 1e-4


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ci, i, j, ki, kj, ih, iw, row
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((n * ho * wo, c * k * k), dtype=dtype)
    cdef floating[:, ::1] cols = out
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    for ci in range(c):
                        for ki in range(k):
                            ih = i * stride - pad + ki
                            if ih < 0 or ih >= h:
                                continue
                            for kj in range(k):
                                iw = j * stride - pad + kj
                                if iw < 0 or iw >= w:
                                    continue
                                cols[row, (ci * k + ki) * k + kj] = x[b, ci, ih, iw]
    return out


def col2im(floating[:, ::1] cols, int n, int c, int h, int w,
           int k, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t b, ci, i, j, ki, kj, ih, iw, row
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] x = out
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    for ci in range(c):
                        for ki in range(k):
                            ih = i * stride - pad + ki
                            if ih < 0 or ih >= h:
                                continue
                            for kj in range(k):
                                iw = j * stride - pad + kj
                                if iw < 0 or iw >= w:
                                    continue
                                x[b, ci, ih, iw] += cols[row, (ci * k + ki) * k + kj]
    return out


def maxpool_forward(floating[:, :, :, ::1] x, int k, int stride, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ci, i, j, ki, kj, ih, iw, best_idx
    cdef floating v, best
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y_arr = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = x[b, ci, i * stride, j * stride]
                        best_idx = i * stride * w + j * stride
                        for ki in range(k):
                            ih = i * stride + ki
                            for kj in range(k):
                                iw = j * stride + kj
                                v = x[b, ci, ih, iw]
                                if v > best:
                                    best = v
                                    best_idx = ih * w + iw
                        y[b, ci, i, j] = best
                        idx[b, ci, i, j] = best_idx
    return y_arr, idx_arr


def maxpool_backward(floating[:, :, :, ::1] gy, cnp.int64_t[:, :, :, ::1] idx,
                     int in_h, int in_w):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t b, ci, i, j, flat
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((n, c, in_h, in_w), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = out
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        flat = idx[b, ci, i, j]
                        gx[b, ci, flat // in_w, flat % in_w] += gy[b, ci, i, j]
    return out


cdef inline double _snap(double p) noexcept nogil:
    cdef double r = rint(p)
    if fabs(p - r) <= SNAP_EPS:
        return r
    return p


def bilinear_forward(floating[:, :, :, ::1] img, floating[:, :, :, ::1] grid):
    cdef Py_ssize_t n = img.shape[0], c = img.shape[1], h = img.shape[2], w = img.shape[3]
    cdef Py_ssize_t g = grid.shape[0], ho = grid.shape[1], wo = grid.shape[2]
    cdef Py_ssize_t b, ci, i, j, gi, x0, y0
    cdef double px, py, fx, fy, acc, v00, v01, v10, v11
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n, c, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    with nogil:
        for b in range(n):
            gi = 0 if g == 1 else b
            for i in range(ho):
                for j in range(wo):
                    px = _snap((<double> grid[gi, i, j, 0] + 1.0) * 0.5 * (w - 1))
                    py = _snap((<double> grid[gi, i, j, 1] + 1.0) * 0.5 * (h - 1))
                    x0 = <Py_ssize_t> floor(px)
                    y0 = <Py_ssize_t> floor(py)
                    fx = px - x0
                    fy = py - y0
                    for ci in range(c):
                        v00 = img[b, ci, y0, x0] if 0 <= y0 < h and 0 <= x0 < w else 0.0
                        v01 = img[b, ci, y0, x0 + 1] if 0 <= y0 < h and 0 <= x0 + 1 < w else 0.0
                        v10 = img[b, ci, y0 + 1, x0] if 0 <= y0 + 1 < h and 0 <= x0 < w else 0.0
                        v11 = img[b, ci, y0 + 1, x0 + 1] if 0 <= y0 + 1 < h and 0 <= x0 + 1 < w else 0.0
                        acc = (v00 * (1 - fx) + v01 * fx) * (1 - fy) \
                            + (v10 * (1 - fx) + v11 * fx) * fy
                        out[b, ci, i, j] = <floating> acc
    return out_arr


def bilinear_backward(floating[:, :, :, ::1] img, floating[:, :, :, ::1] grid,
                      floating[:, :, :, ::1] gy, bint need_image, bint need_grid):
    cdef Py_ssize_t n = img.shape[0], c = img.shape[1], h = img.shape[2], w = img.shape[3]
    cdef Py_ssize_t g = grid.shape[0], ho = grid.shape[1], wo = grid.shape[2]
    cdef Py_ssize_t b, ci, i, j, gi, x0, y0
    cdef double px, py, fx, fy, go, v00, v01, v10, v11, dpx, dpy
    cdef bint in00, in01, in10, in11
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gimg_arr = np.zeros((n, c, h, w), dtype=dtype) if need_image else None
    ggrid_arr = np.zeros((g, ho, wo, 2), dtype=np.float64) if need_grid else None
    cdef floating[:, :, :, ::1] gimg = gimg_arr if need_image else None
    cdef double[:, :, :, ::1] ggrid = ggrid_arr if need_grid else None
    with nogil:
        for b in range(n):
            gi = 0 if g == 1 else b
            for i in range(ho):
                for j in range(wo):
                    px = _snap((<double> grid[gi, i, j, 0] + 1.0) * 0.5 * (w - 1))
                    py = _snap((<double> grid[gi, i, j, 1] + 1.0) * 0.5 * (h - 1))
                    x0 = <Py_ssize_t> floor(px)
                    y0 = <Py_ssize_t> floor(py)
                    fx = px - x0
                    fy = py - y0
                    in00 = 0 <= y0 < h and 0 <= x0 < w
                    in01 = 0 <= y0 < h and 0 <= x0 + 1 < w
                    in10 = 0 <= y0 + 1 < h and 0 <= x0 < w
                    in11 = 0 <= y0 + 1 < h and 0 <= x0 + 1 < w
                    dpx = 0.0
                    dpy = 0.0
                    for ci in range(c):
                        go = <double> gy[b, ci, i, j]
                        if need_image:
                            if in00:
                                gimg[b, ci, y0, x0] += <floating> (go * (1 - fx) * (1 - fy))
                            if in01:
                                gimg[b, ci, y0, x0 + 1] += <floating> (go * fx * (1 - fy))
                            if in10:
                                gimg[b, ci, y0 + 1, x0] += <floating> (go * (1 - fx) * fy)
                            if in11:
                                gimg[b, ci, y0 + 1, x0 + 1] += <floating> (go * fx * fy)
                        if need_grid:
                            v00 = img[b, ci, y0, x0] if in00 else 0.0
                            v01 = img[b, ci, y0, x0 + 1] if in01 else 0.0
                            v10 = img[b, ci, y0 + 1, x0] if in10 else 0.0
                            v11 = img[b, ci, y0 + 1, x0 + 1] if in11 else 0.0
                            dpx += ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * go
                            dpy += ((v10 - v00) * (1 - fx) + (v11 - v01) * fx) * go
                    if need_grid:
                        ggrid[gi, i, j, 0] += dpx * 0.5 * (w - 1)
                        ggrid[gi, i, j, 1] += dpy * 0.5 * (h - 1)
    if need_grid:
        ggrid_arr = ggrid_arr.astype(dtype)
    return gimg_arr, ggrid_arr
