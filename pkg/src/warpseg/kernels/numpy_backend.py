"""Pure numpy implementation of the hot kernels.

This is the fallback backend used when the compiled extension is not
available; it is also the reference the extension is tested against.
Convolutions go through an im2col view plus one BLAS matmul, the
backward-input path uses the zero-dilation trick (so no scatter-add is
needed), and pooling/sampling backward passes scatter through a single
``np.bincount`` call.

All functions take and return plain C-contiguous float32/float64 arrays
and never touch the autodiff layer.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

name = "numpy"

# Sampling coordinates closer than this (in pixels) to a grid node are
# snapped onto it, which makes identity and integer-aligned warps exact
# even for float32 grids.
SNAP_EPS = 1e-4


def _im2col(x, k, stride, pad):
    """Return (cols[N*Ho*Wo, C*k*k], Ho, Wo) for a padded sliding window."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"convolution window {k} does not fit input {h}x{w} with pad {pad}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    view = as_strided(x, (n, ho, wo, c, k, k), (sn, stride * sh, stride * sw, sc, sh, sw))
    return np.ascontiguousarray(view).reshape(n * ho * wo, c * k * k), ho, wo


def conv2d_forward(x, w, bias, stride, pad):
    n = x.shape[0]
    f, c, k, _ = w.shape
    if x.shape[1] != c:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {c}")
    cols, ho, wo = _im2col(x, k, stride, pad)
    y = cols @ w.reshape(f, -1).T
    if bias is not None:
        y += bias
    return y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2).copy()


def conv2d_backward_weight(gy, x, k, stride, pad):
    n, f, ho, wo = gy.shape
    cols, ho2, wo2 = _im2col(x, k, stride, pad)
    assert (ho, wo) == (ho2, wo2)
    gy_mat = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    gw = gy_mat.T @ cols
    return gw.reshape(f, x.shape[1], k, k)


def conv2d_backward_input(gy, w, in_h, in_w, stride, pad):
    """Gradient w.r.t. the conv input.

    Implemented as a stride-1 valid convolution of the zero-dilated,
    zero-padded output gradient with the spatially flipped,
    channel-transposed weight.  The padding is asymmetric (k-1-pad on
    the leading side, whatever makes the result exactly in_h x in_w on
    the trailing side), so rows the forward windows never reached come
    out zero instead of being cut off.
    """
    n, f, ho, wo = gy.shape
    _, c, k, _ = w.shape
    if pad > k - 1:
        raise ValueError("padding larger than kernel-1 is not supported")
    lead = k - 1 - pad
    dil_h = (ho - 1) * stride + 1
    dil_w = (wo - 1) * stride + 1
    trail_h = in_h + pad - dil_h
    trail_w = in_w + pad - dil_w
    if trail_h < 0 or trail_w < 0:
        raise ValueError(f"gradient {ho}x{wo} is too large for a {in_h}x{in_w} input")
    buf = np.zeros((n, f, lead + dil_h + trail_h, lead + dil_w + trail_w), dtype=gy.dtype)
    buf[:, :, lead:lead + dil_h:stride, lead:lead + dil_w:stride] = gy
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_forward(buf, w_flip, None, 1, 0)


def maxpool2d_forward(x, k, stride):
    """Max over each window plus flat argmax indices into the H*W plane.

    Ties resolve to the first element in row-major window order.
    """
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"pool window {k} does not fit input {h}x{w}")
    sn, sc, sh, sw = x.strides
    win = as_strided(x, (n, c, ho, wo, k, k), (sn, sc, stride * sh, stride * sw, sh, sw))
    win = win.reshape(n, c, ho, wo, k * k)
    local = win.argmax(axis=-1)
    y = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    base_i = (np.arange(ho) * stride)[None, None, :, None]
    base_j = (np.arange(wo) * stride)[None, None, None, :]
    idx = (base_i + local // k) * w + (base_j + local % k)
    return np.ascontiguousarray(y), np.ascontiguousarray(idx.astype(np.int64))


def maxpool2d_backward(gy, idx, in_h, in_w):
    n, c = gy.shape[:2]
    plane = in_h * in_w
    offs = np.arange(n * c, dtype=np.int64)[:, None] * plane
    flat = (idx.reshape(n * c, -1) + offs).ravel()
    gx = np.bincount(flat, weights=gy.ravel(), minlength=n * c * plane)
    return gx.reshape(n, c, in_h, in_w).astype(gy.dtype)


def _grid_to_pixels(grid, h, w):
    """Normalized [-1,1] grid -> float64 pixel coords with node snapping."""
    px = (grid[..., 0].astype(np.float64) + 1.0) * 0.5 * (w - 1)
    py = (grid[..., 1].astype(np.float64) + 1.0) * 0.5 * (h - 1)
    for p in (px, py):
        r = np.rint(p)
        near = np.abs(p - r) <= SNAP_EPS
        p[near] = r[near]
    return px, py


def _corner_setup(px, py, h, w):
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            cx = x0 + dx
            cy = y0 + dy
            ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            corners.append((np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1), wgt * ok))
    return corners, fx, fy, x0, y0


def _gather(flat, lin, n, c, ho, wo):
    """flat[N,C,H*W] indexed by lin[G,Ho,Wo] -> [N,C,Ho,Wo]."""
    g = lin.shape[0]
    if g == 1:
        return flat[:, :, lin.reshape(-1)].reshape(n, c, ho, wo)
    return np.take_along_axis(flat, lin.reshape(g, 1, -1), axis=2).reshape(n, c, ho, wo)


def bilinear_forward(img, grid):
    """Sample img[N,C,H,W] at grid[G,Ho,Wo,2] (G == 1 or N), zero outside."""
    n, c, h, w = img.shape
    g, ho, wo = grid.shape[:3]
    px, py = _grid_to_pixels(grid, h, w)
    corners, _, _, _, _ = _corner_setup(px, py, h, w)
    flat = img.reshape(n, c, h * w)
    out = np.zeros((n, c, ho, wo), dtype=np.float64)
    for lin, wgt in corners:
        out += _gather(flat, lin, n, c, ho, wo) * wgt.reshape(g, 1, ho, wo)
    return out.astype(img.dtype)


def bilinear_backward(img, grid, gy, need_image, need_grid):
    n, c, h, w = img.shape
    g, ho, wo = grid.shape[:3]
    px, py = _grid_to_pixels(grid, h, w)
    corners, fx, fy, x0, y0 = _corner_setup(px, py, h, w)
    gimg = None
    ggrid = None
    gy64 = gy.astype(np.float64)
    if need_image:
        plane = h * w
        total = np.zeros(n * c * plane, dtype=np.float64)
        offs = (np.arange(n)[:, None] * c + np.arange(c)[None, :]).reshape(n, c, 1) * plane
        for lin, wgt in corners:
            idx = (np.broadcast_to(lin.reshape(g, 1, ho * wo), (n, c, ho * wo)) + offs).ravel()
            wv = (gy64 * wgt.reshape(g, 1, ho, wo)).ravel()
            total += np.bincount(idx, weights=wv, minlength=n * c * plane)
        gimg = total.reshape(n, c, h, w).astype(img.dtype)
    if need_grid:
        flat = img.reshape(n, c, h * w).astype(np.float64)

        def masked(cx, cy):
            ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            lin = np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)
            return _gather(flat, lin, n, c, ho, wo) * ok.reshape(g, 1, ho, wo)

        v00 = masked(x0, y0)
        v01 = masked(x0 + 1, y0)
        v10 = masked(x0, y0 + 1)
        v11 = masked(x0 + 1, y0 + 1)
        fxr = fx.reshape(g, 1, ho, wo)
        fyr = fy.reshape(g, 1, ho, wo)
        dpx = ((v01 - v00) * (1 - fyr) + (v11 - v10) * fyr) * gy64
        dpy = ((v10 - v00) * (1 - fxr) + (v11 - v01) * fxr) * gy64
        # sum over channels (and over the batch if the grid is shared)
        red = (1,) if g == n else (0, 1)
        gx = dpx.sum(axis=red) * 0.5 * (w - 1)
        gyy = dpy.sum(axis=red) * 0.5 * (h - 1)
        ggrid = np.stack([gx.reshape(g, ho, wo), gyy.reshape(g, ho, wo)], axis=-1).astype(grid.dtype)
    return gimg, ggrid
