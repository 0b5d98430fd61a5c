"""Kernel backend backed by the compiled extension.

Convolutions keep the matmul in numpy (BLAS) and only push the
im2col/col2im gather/scatter into C; pooling and sampling run fully
compiled.  Importing this module raises ImportError when the extension
was not built, which the package __init__ catches to fall back.
"""

import numpy as np

from . import _fastkernels as fk

name = "cython"

SNAP_EPS = 1e-4


def _out_hw(h, w, k, stride, pad):
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"convolution window {k} does not fit input {h}x{w} with pad {pad}")
    return ho, wo


def conv2d_forward(x, w, bias, stride, pad):
    n, c, h, ww = x.shape
    f, cw, k, _ = w.shape
    if c != cw:
        raise ValueError(f"input has {c} channels, weight expects {cw}")
    ho, wo = _out_hw(h, ww, k, stride, pad)
    cols = fk.im2col(np.ascontiguousarray(x), k, stride, pad, ho, wo)
    y = cols @ w.reshape(f, -1).T
    if bias is not None:
        y += bias
    return np.ascontiguousarray(y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))


def conv2d_backward_weight(gy, x, k, stride, pad):
    n, f, ho, wo = gy.shape
    cols = fk.im2col(np.ascontiguousarray(x), k, stride, pad, ho, wo)
    gy_mat = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    return (gy_mat.T @ cols).reshape(f, x.shape[1], k, k)


def conv2d_backward_input(gy, w, in_h, in_w, stride, pad):
    n, f, ho, wo = gy.shape
    _, c, k, _ = w.shape
    gy_mat = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    gcols = np.ascontiguousarray(gy_mat @ w.reshape(f, -1))
    return fk.col2im(gcols, n, c, in_h, in_w, k, stride, pad, ho, wo)


def maxpool2d_forward(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"pool window {k} does not fit input {h}x{w}")
    return fk.maxpool_forward(np.ascontiguousarray(x), k, stride, ho, wo)


def maxpool2d_backward(gy, idx, in_h, in_w):
    return fk.maxpool_backward(np.ascontiguousarray(gy), np.ascontiguousarray(idx), in_h, in_w)


def bilinear_forward(img, grid):
    img = np.ascontiguousarray(img)
    grid = np.ascontiguousarray(grid, dtype=img.dtype)
    return fk.bilinear_forward(img, grid)


def bilinear_backward(img, grid, gy, need_image, need_grid):
    img = np.ascontiguousarray(img)
    grid = np.ascontiguousarray(grid, dtype=img.dtype)
    gy = np.ascontiguousarray(gy, dtype=img.dtype)
    return fk.bilinear_backward(img, grid, gy, need_image, need_grid)
