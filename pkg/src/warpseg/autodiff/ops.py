"""Differentiable operations for the networks and losses.

Each function runs its forward pass through numpy (or the compiled
kernels) and registers a closure that maps the output gradient to
parent gradients.  Saved context lives in the closure; nothing here
mutates its inputs.
"""

from __future__ import annotations

import numpy as np

from .. import kernels as K
from .tensor import Tensor, as_tensor, unbroadcast

# -- elementwise --------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward(gy):
        a._accumulate(gy * (a.data > 0))

    return Tensor._from_op(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(gy):
        a._accumulate(gy * out_data)

    return Tensor._from_op(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(gy):
        a._accumulate(gy / a.data)

    return Tensor._from_op(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(gy):
        a._accumulate(gy * (1.0 - out_data * out_data))

    return Tensor._from_op(out_data, (a,), backward)


def sin(a: Tensor) -> Tensor:
    out_data = np.sin(a.data)

    def backward(gy):
        a._accumulate(gy * np.cos(a.data))

    return Tensor._from_op(out_data, (a,), backward)


def cos(a: Tensor) -> Tensor:
    out_data = np.cos(a.data)

    def backward(gy):
        a._accumulate(gy * -np.sin(a.data))

    return Tensor._from_op(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    """Square root whose backward caps the denominator near zero.

    d sqrt/dx = 1/(2 sqrt x) diverges at 0; the cap keeps the product
    with an (itself vanishing) upstream factor at exactly 0 instead of
    nan when a perfectly matched loss term sits at the origin.
    """
    out_data = np.sqrt(a.data)

    def backward(gy):
        a._accumulate(gy * 0.5 / np.maximum(out_data, 1e-12))

    return Tensor._from_op(out_data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def backward(gy):
        a._accumulate(gy * np.sign(a.data))

    return Tensor._from_op(out_data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with gradient 1 on the closed interval [lo, hi].

    Inclusive bounds matter: heads initialized exactly on a bound (the
    full-image box) must still receive gradient.
    """
    out_data = np.clip(a.data, lo, hi)

    def backward(gy):
        a._accumulate(gy * ((a.data >= lo) & (a.data <= hi)))

    return Tensor._from_op(out_data, (a,), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.maximum(a.data, b.data)

    def backward(gy):
        mask = a.data >= b.data
        if a.requires_grad:
            a._accumulate(unbroadcast(gy * mask, a.data.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(gy * ~mask, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.minimum(a.data, b.data)

    def backward(gy):
        mask = a.data <= b.data
        if a.requires_grad:
            a._accumulate(unbroadcast(gy * mask, a.data.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(gy * ~mask, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward)


# -- shape juggling ------------------------------------------------------------


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(gy):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * gy.ndim
                sl[axis] = slice(a, b)
                t._accumulate(gy[tuple(sl)])

    return Tensor._from_op(out_data, tuple(tensors), backward)


def column(a: Tensor, j: int) -> Tensor:
    """a[:, j] of a 2-D tensor, as a 1-D tensor."""
    out_data = a.data[:, j].copy()

    def backward(gy):
        g = np.zeros_like(a.data)
        g[:, j] = gy
        a._accumulate(g)

    return Tensor._from_op(out_data, (a,), backward)


def channel(a: Tensor, c: int) -> Tensor:
    """a[:, c] of an [N,C,...] tensor, as an [N,...] tensor."""
    out_data = a.data[:, c].copy()

    def backward(gy):
        g = np.zeros_like(a.data)
        g[:, c] = gy
        a._accumulate(g)

    return Tensor._from_op(out_data, (a,), backward)


def stack1(cols) -> Tensor:
    """Stack 1-D tensors of length N into [N, len(cols)]."""
    cols = [as_tensor(c) for c in cols]
    out_data = np.stack([c.data for c in cols], axis=1)

    def backward(gy):
        for i, c in enumerate(cols):
            if c.requires_grad:
                c._accumulate(gy[:, i])

    return Tensor._from_op(out_data, tuple(cols), backward)


# -- dense / conv / pool -------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[N,D] @ w[M,D]^T + b[M]."""
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data

    def backward(gy):
        if x.requires_grad:
            x._accumulate(gy @ w.data)
        if w.requires_grad:
            w._accumulate(gy.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(gy.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out_data, parents, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    n, c, h, ww = x.data.shape
    k = w.data.shape[2]
    out_data = K.conv2d_forward(x.data, w.data, None if b is None else b.data, stride, pad)

    def backward(gy):
        gy = np.ascontiguousarray(gy)
        if x.requires_grad:
            x._accumulate(K.conv2d_backward_input(gy, w.data, h, ww, stride, pad))
        if w.requires_grad:
            w._accumulate(K.conv2d_backward_weight(gy, x.data, k, stride, pad))
        if b is not None and b.requires_grad:
            b._accumulate(gy.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out_data, parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 2) -> Tensor:
    """Adjoint of a stride-s, pad-0 conv2d; weight layout [Cin, Cout, k, k]."""
    n, cin, h, ww = x.data.shape
    if w.data.shape[0] != cin:
        raise ValueError(f"input has {cin} channels, weight expects {w.data.shape[0]}")
    k = w.data.shape[2]
    out_h = (h - 1) * stride + k
    out_w = (ww - 1) * stride + k
    out_data = K.conv2d_backward_input(x.data, w.data, out_h, out_w, stride, 0)
    if b is not None:
        out_data = out_data + b.data.reshape(1, -1, 1, 1)

    def backward(gy):
        gy = np.ascontiguousarray(gy)
        if x.requires_grad:
            x._accumulate(K.conv2d_forward(gy, w.data, None, stride, 0))
        if w.requires_grad:
            w._accumulate(K.conv2d_backward_weight(x.data, gy, k, stride, 0))
        if b is not None and b.requires_grad:
            b._accumulate(gy.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out_data, parents, backward)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    n, c, h, w = x.data.shape
    out_data, idx = K.maxpool2d_forward(x.data, k, stride)

    def backward(gy):
        x._accumulate(K.maxpool2d_backward(np.ascontiguousarray(gy), idx, h, w))

    return Tensor._from_op(out_data, (x,), backward)


# -- normalization / softmax ---------------------------------------------------


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    n, c, h, w = x.data.shape
    if n < 1:
        raise ValueError("batchnorm needs at least one item in the batch")
    m = n * h * w
    gshape = (1, c, 1, 1)
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(gshape)) * inv.reshape(gshape)
        # running stats track the unbiased variance, normalization the biased
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(gshape)) * inv.reshape(gshape)
    out_data = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def backward(gy):
        dbeta = gy.sum(axis=(0, 2, 3))
        dgamma = (gy * xhat).sum(axis=(0, 2, 3))
        if x.requires_grad:
            gsc = (gamma.data * inv).reshape(gshape)
            if training:
                dx = gsc * (gy - dbeta.reshape(gshape) / m - xhat * dgamma.reshape(gshape) / m)
            else:
                dx = gsc * gy
            x._accumulate(dx)
        if gamma.requires_grad:
            gamma._accumulate(dgamma)
        if beta.requires_grad:
            beta._accumulate(dbeta)

    return Tensor._from_op(out_data, (x, gamma, beta), backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1, stabilized by max subtraction."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(gy):
        dot = (gy * out_data).sum(axis=1, keepdims=True)
        x._accumulate(out_data * (gy - dot))

    return Tensor._from_op(out_data, (x,), backward)


# -- geometry ------------------------------------------------------------------


def _base_grid(h: int, w: int, dtype) -> np.ndarray:
    """[3, h, w] homogeneous coordinates, corners at ±1 exactly."""
    xs = np.linspace(-1.0, 1.0, w, dtype=np.float64)
    ys = np.linspace(-1.0, 1.0, h, dtype=np.float64)
    base = np.empty((3, h, w), dtype=np.float64)
    base[0] = xs[None, :]
    base[1] = ys[:, None]
    base[2] = 1.0
    return base.astype(dtype)


def affine_grid(theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Map a [N,2,3] (or [2,3]) matrix over the corner-aligned unit grid.

    grid[n,i,j] = theta[n] @ (x_j, y_i, 1); the last axis is (x, y).
    """
    if out_h < 2 or out_w < 2:
        raise ValueError("grid needs at least 2 points per axis")
    theta = as_tensor(theta)
    squeeze = theta.data.ndim == 2
    th = theta.data[None] if squeeze else theta.data
    base = _base_grid(out_h, out_w, th.dtype)
    out_data = np.einsum("nkm,mij->nijk", th, base)
    if squeeze:
        out_data = out_data[0]

    def backward(gy):
        g = gy[None] if squeeze else gy
        gth = np.einsum("nijk,mij->nkm", g, base)
        theta._accumulate(gth[0] if squeeze else gth)

    return Tensor._from_op(out_data, (theta,), backward)


def bilinear_sample(image: Tensor, grid: Tensor) -> Tensor:
    """Sample image[N,C,H,W] at grid[...,2] positions, zero outside.

    Accepts grid [H',W',2] (shared) or [N,H',W',2] (per item); output is
    [N,C,H',W'].  Exactly reproduces the input on the identity grid.
    """
    image = as_tensor(image)
    grid = as_tensor(grid)
    squeeze = grid.data.ndim == 3
    gr = grid.data[None] if squeeze else grid.data
    if gr.shape[0] not in (1, image.data.shape[0]):
        raise ValueError(f"grid batch {gr.shape[0]} does not match image batch {image.data.shape[0]}")
    gr = np.ascontiguousarray(gr, dtype=image.data.dtype)
    out_data = K.bilinear_forward(np.ascontiguousarray(image.data), gr)

    def backward(gy):
        gimg, ggrid = K.bilinear_backward(
            np.ascontiguousarray(image.data), gr, np.ascontiguousarray(gy),
            image.requires_grad, grid.requires_grad)
        if image.requires_grad:
            image._accumulate(gimg)
        if grid.requires_grad:
            grid._accumulate(ggrid[0] if squeeze else ggrid)

    return Tensor._from_op(out_data, (image, grid), backward)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear resize; identity when sizes already match."""
    ident = np.zeros((2, 3), dtype=x.data.dtype)
    ident[0, 0] = ident[1, 1] = 1.0
    grid = affine_grid(Tensor(ident), out_h, out_w)
    return bilinear_sample(x, grid)
