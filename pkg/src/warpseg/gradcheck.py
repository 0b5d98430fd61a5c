"""Central-difference validation of every differentiable op and objective.

Each check builds a small double-precision graph, reduces it to a scalar
through a fixed random weighting, backpropagates, and compares every
input's analytic gradient against symmetric finite differences.  Inputs
are sampled away from the kinks of piecewise operations (relu at zero,
clip at its bounds, pooling ties, integer-aligned sampling grids) so the
comparison happens where the derivative exists.

`run(quick=True)` covers one representative configuration per op;
the full run adds stride/padding/broadcast variants and the three
training objectives end to end.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import geometry, losses
from .autodiff import Tensor, ops
from .nets import build_pose_stn

OP_TOL = 1e-5
COMPOSED_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return np.isfinite(self.rel_err) and self.rel_err < self.tol


def numeric_grad(forward, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Symmetric finite differences of scalar `forward()` wrt array x (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = forward()
        flat[i] = keep - h
        fm = forward()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def compare(build, tol: float, h: float = 1e-6) -> float:
    """Max relative gradient error over every requires-grad input of `build`.

    `build()` must return (inputs, forward) where forward() -> scalar Tensor
    recomputed from the current contents of each input's array.
    """
    inputs, forward = build()
    out = forward()
    if out.size != 1:
        raise ValueError(f"forward must reduce to a scalar, got shape {out.shape}")
    for t in inputs:
        t.grad = None
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad)
        numeric = numeric_grad(lambda: float(forward().item()), t.data, h)
        scale = max(float(np.abs(analytic).max(initial=0.0)),
                    float(np.abs(numeric).max(initial=0.0)), 1.0)
        worst = max(worst, float(np.abs(analytic - numeric).max(initial=0.0)) / scale)
    return worst


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, dtype=np.float64)


def _away_from(rng, *shape, margin=0.2, lo=0.2, hi=1.0):
    """Values with |v| in [lo, hi]: clear of the kink at zero."""
    mag = rng.uniform(lo, hi, shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor(mag * sign, requires_grad=True, dtype=np.float64)


def _cases(quick: bool):
    """Yield (name, tol, build) triples."""
    r = np.random.default_rng(20240 + (1 if quick else 0))

    # ---- elementwise / arithmetic ------------------------------------------------
    def case_binary(name, fn):
        def build():
            a = _t(r, 3, 4)
            b = _t(r, 3, 4, lo=0.3, hi=1.2)
            w = r.standard_normal((3, 4))
            return [a, b], lambda: (fn(a, b) * Tensor(w)).sum()
        return name, OP_TOL, build

    yield case_binary("add", lambda a, b: a + b)
    yield case_binary("sub", lambda a, b: a - b)
    yield case_binary("mul", lambda a, b: a * b)
    yield case_binary("div", lambda a, b: a / b)

    def build_broadcast():
        a = _t(r, 2, 3, 4)
        b = _t(r, 1, 3, 1)
        w = r.standard_normal((2, 3, 4))
        return [a, b], lambda: ((a * b + b) * Tensor(w)).sum()
    yield "broadcast", OP_TOL, build_broadcast

    def build_scalar_mix():
        a = _t(r, 3, 3)
        return [a], lambda: ((a * 2.5 - 1.0) / 3.0 + (-a)).sum()
    yield "scalar-arith", OP_TOL, build_scalar_mix

    def build_pow():
        a = _t(r, 3, 3, lo=0.3, hi=1.5)
        return [a], lambda: (a ** 3).sum()
    yield "pow", OP_TOL, build_pow

    def build_neg_rsub_rdiv():
        a = _t(r, 2, 3, lo=0.4, hi=1.4)
        return [a], lambda: (1.0 - a).sum() + (2.0 / a).sum()
    yield "rsub-rdiv", OP_TOL, build_neg_rsub_rdiv

    for name, fn, kw in [
        ("relu", ops.relu, dict()),
        ("exp", ops.exp, dict()),
        ("tanh", ops.tanh, dict()),
        ("sin", ops.sin, dict()),
        ("cos", ops.cos, dict()),
        ("absolute", ops.absolute, dict()),
    ]:
        def build(fn=fn):
            a = _away_from(r, 3, 4)
            w = r.standard_normal((3, 4))
            return [a], lambda: (fn(a) * Tensor(w)).sum()
        yield name, OP_TOL, build

    def build_log():
        a = _t(r, 3, 4, lo=0.2, hi=2.0)
        w = r.standard_normal((3, 4))
        return [a], lambda: (ops.log(a) * Tensor(w)).sum()
    yield "log", OP_TOL, build_log

    def build_sqrt():
        a = _t(r, 3, 4, lo=0.2, hi=2.0)
        w = r.standard_normal((3, 4))
        return [a], lambda: (ops.sqrt(a) * Tensor(w)).sum()
    yield "sqrt", OP_TOL, build_sqrt

    def build_clip():
        # interior and exterior points, all at distance >= 0.1 from the bounds
        vals = np.concatenate([r.uniform(-0.4, 0.4, 8), r.uniform(0.6, 1.2, 4),
                               r.uniform(-1.2, -0.6, 4)])
        a = Tensor(vals.reshape(4, 4), requires_grad=True, dtype=np.float64)
        w = r.standard_normal((4, 4))
        return [a], lambda: (ops.clip(a, -0.5, 0.5) * Tensor(w)).sum()
    yield "clip", OP_TOL, build_clip

    def build_minmax():
        a = _t(r, 3, 4)
        b = Tensor(a.data + np.where(r.random((3, 4)) < 0.5, 0.3, -0.3),
                   requires_grad=True, dtype=np.float64)
        w = r.standard_normal((3, 4))
        return [a, b], lambda: ((ops.maximum(a, b) + ops.minimum(a, b))
                                * Tensor(w)).sum()
    yield "maximum-minimum", OP_TOL, build_minmax

    # ---- shape / selection ---------------------------------------------------------
    def build_reshape_mean_sum():
        a = _t(r, 2, 3, 4)
        w = r.standard_normal((4, 6))
        return [a], lambda: (a.reshape(4, 6) * Tensor(w)).mean() + a.sum() * 0.1
    yield "reshape-mean-sum", OP_TOL, build_reshape_mean_sum

    def build_axis_reductions():
        a = _t(r, 3, 4, 5)
        w0 = r.standard_normal((4, 5))
        w1 = r.standard_normal((3, 1, 5))
        return [a], lambda: ((a.sum(axis=0) * Tensor(w0)).sum()
                             + (a.mean(axis=1, keepdims=True) * Tensor(w1)).sum())
    yield "reductions-axis", OP_TOL, build_axis_reductions

    def build_column_stack():
        a = _t(r, 5, 3)
        return [a], lambda: (ops.stack1([ops.column(a, 0) * 2.0,
                                         ops.column(a, 2)]).sum())
    yield "column-stack1", OP_TOL, build_column_stack

    def build_channel_concat():
        a = _t(r, 2, 3, 4, 4)
        b = _t(r, 2, 2, 4, 4)
        w = r.standard_normal((2, 5, 4, 4))
        return [a, b], lambda: ((ops.concat([a, b], axis=1) * Tensor(w)).sum()
                                + ops.channel(a, 1).sum())
    yield "channel-concat", OP_TOL, build_channel_concat

    # ---- dense / conv stack ----------------------------------------------------------
    def build_linear():
        x = _t(r, 3, 4)
        w = _t(r, 5, 4)
        b = _t(r, 5)
        ww = r.standard_normal((3, 5))
        return [x, w, b], lambda: (ops.linear(x, w, b) * Tensor(ww)).sum()
    yield "linear", OP_TOL, build_linear

    conv_variants = [("conv2d-s1p1", 1, 1)]
    if not quick:
        conv_variants += [("conv2d-s2p1", 2, 1), ("conv2d-s1p0", 1, 0)]
    for name, stride, pad in conv_variants:
        def build(stride=stride, pad=pad):
            x = _t(r, 2, 2, 5, 5)
            w = _t(r, 3, 2, 3, 3, lo=-0.5, hi=0.5)
            b = _t(r, 3)
            def fwd():
                y = ops.conv2d(x, w, b, stride=stride, pad=pad)
                return (y * Tensor(np.random.default_rng(7).standard_normal(y.shape))).sum()
            return [x, w, b], fwd
        yield name, OP_TOL, build

    def build_convT():
        x = _t(r, 2, 3, 4, 4)
        w = _t(r, 3, 2, 2, 2, lo=-0.5, hi=0.5)
        b = _t(r, 2)
        def fwd():
            y = ops.conv_transpose2d(x, w, b, stride=2)
            return (y * Tensor(np.random.default_rng(8).standard_normal(y.shape))).sum()
        return [x, w, b], fwd
    yield "conv-transpose2d", OP_TOL, build_convT

    def build_maxpool():
        base = r.uniform(-1, 1, (2, 2, 6, 6))
        # unique values guarantee a tie-free, stable argmax under perturbation
        jitter = np.arange(base.size).reshape(base.shape) * 1e-3
        x = Tensor(base + jitter, requires_grad=True, dtype=np.float64)
        def fwd():
            y = ops.maxpool2d(x, 2, 2)
            return (y * Tensor(np.random.default_rng(9).standard_normal(y.shape))).sum()
        return [x], fwd
    yield "maxpool2d", OP_TOL, build_maxpool

    def build_batchnorm_train():
        x = _t(r, 3, 2, 4, 4)
        gamma = _t(r, 2, lo=0.5, hi=1.5)
        beta = _t(r, 2)
        running_mean = np.zeros(2)
        running_var = np.ones(2)
        def fwd():
            y = ops.batchnorm2d(x, gamma, beta, running_mean.copy(),
                                running_var.copy(), training=True)
            return (y * Tensor(np.random.default_rng(10).standard_normal(y.shape))).sum()
        return [x, gamma, beta], fwd
    yield "batchnorm-train", OP_TOL, build_batchnorm_train

    def build_batchnorm_eval():
        x = _t(r, 2, 2, 3, 3)
        gamma = _t(r, 2, lo=0.5, hi=1.5)
        beta = _t(r, 2)
        rm = r.uniform(-0.2, 0.2, 2)
        rv = r.uniform(0.8, 1.2, 2)
        def fwd():
            y = ops.batchnorm2d(x, gamma, beta, rm, rv, training=False)
            return (y * Tensor(np.random.default_rng(11).standard_normal(y.shape))).sum()
        return [x, gamma, beta], fwd
    yield "batchnorm-eval", OP_TOL, build_batchnorm_eval

    def build_softmax():
        x = _t(r, 2, 3, 3, 3, lo=-2.0, hi=2.0)
        w = r.standard_normal((2, 3, 3, 3))
        return [x], lambda: (ops.softmax_channels(x) * Tensor(w)).sum()
    yield "softmax-channels", OP_TOL, build_softmax

    upsample_variants = [("upsample-2x", 8, 8)]
    if not quick:
        upsample_variants.append(("upsample-odd", 7, 5))
    for name, oh, ow in upsample_variants:
        def build(oh=oh, ow=ow):
            x = _t(r, 1, 2, 4, 4)
            def fwd():
                y = ops.upsample_bilinear(x, oh, ow)
                return (y * Tensor(np.random.default_rng(12).standard_normal(y.shape))).sum()
            return [x], fwd
        yield name, OP_TOL, build

    # ---- geometry --------------------------------------------------------------------
    def build_affine_grid():
        theta = Tensor(np.array([[[0.9, 0.1, 0.05], [-0.1, 1.1, -0.02]],
                                 [[1.2, 0.0, 0.10], [0.0, 0.8, 0.04]]]),
                       requires_grad=True, dtype=np.float64)
        w = r.standard_normal((2, 5, 4, 2))
        return [theta], lambda: (ops.affine_grid(theta, 5, 4) * Tensor(w)).sum()
    yield "affine-grid", OP_TOL, build_affine_grid

    def build_bilinear_sample():
        img = _t(r, 2, 2, 6, 6)
        # strictly inside the frame and clear of the cell boundaries
        cells = r.integers(0, 5, (2, 4, 4, 2))
        frac = r.uniform(0.25, 0.75, (2, 4, 4, 2))
        grid_px = cells + frac
        grid = Tensor(grid_px / 5.0 * 2.0 - 1.0, requires_grad=True,
                      dtype=np.float64)
        w = r.standard_normal((2, 2, 4, 4))
        return [img, grid], lambda: (ops.bilinear_sample(img, grid)
                                     * Tensor(w)).sum()
    yield "bilinear-sample", OP_TOL, build_bilinear_sample

    def build_similarity_theta():
        angle = _t(r, 3, lo=-0.5, hi=0.5)
        sx = _t(r, 3, lo=0.7, hi=1.3)
        sy = _t(r, 3, lo=0.7, hi=1.3)
        tx = _t(r, 3, lo=-0.3, hi=0.3)
        ty = _t(r, 3, lo=-0.3, hi=0.3)
        w = r.standard_normal((3, 2, 3))
        return [angle, sx, sy, tx, ty], lambda: (
            geometry.similarity_to_theta(angle, sx, sy, tx, ty) * Tensor(w)).sum()
    yield "similarity-to-theta", OP_TOL, build_similarity_theta

    def build_square_box():
        x0 = _t(r, 3, lo=-0.8, hi=-0.4)
        y0 = _t(r, 3, lo=-0.8, hi=-0.4)
        x1 = _t(r, 3, lo=0.1, hi=0.7)
        y1 = _t(r, 3, lo=0.1, hi=0.7)
        w = r.standard_normal((3, 2, 3))
        def fwd():
            a, b, c, d = geometry.enforce_square_min_t(x0, y0, x1, y1, 0.5)
            return (geometry.bbox_to_theta(a, b, c, d) * Tensor(w)).sum()
        return [x0, y0, x1, y1], fwd
    yield "square-box-to-theta", OP_TOL, build_square_box

    if quick:
        return

    # ---- composed objectives ----------------------------------------------------------
    def build_overlap_objective():
        h = _t(r, 2, 1, 6, 6, lo=0.05, hi=0.95)
        ref = (r.random((1, 1, 6, 6)) < 0.4).astype(np.float64)
        return [h], lambda: losses.stn1_loss(h, ref).total
    yield "objective-pose-overlap", COMPOSED_TOL, build_overlap_objective

    def build_crop_objective():
        h = _t(r, 2, 1, 6, 6, lo=0.05, hi=0.95)
        t_crop = (r.random((2, 1, 6, 6)) < 0.4).astype(np.float64)
        theta2 = Tensor(np.array([[[0.6, 0.0, 0.1], [0.0, 0.6, -0.1]],
                                  [[0.8, 0.0, 0.0], [0.0, 0.8, 0.2]]]),
                        requires_grad=True, dtype=np.float64)
        theta_t = np.array([[[0.7, 0.0, 0.05], [0.0, 0.7, -0.05]],
                            [[0.75, 0.0, 0.1], [0.0, 0.75, 0.15]]])
        return [h, theta2], lambda: losses.stn2_loss(h, t_crop, theta2, theta_t).total
    yield "objective-crop", COMPOSED_TOL, build_crop_objective

    def build_segmentation_objective():
        logits0 = _t(r, 2, 3, 8, 8, lo=-1.5, hi=1.5)
        logits1 = _t(r, 2, 3, 4, 4, lo=-1.5, hi=1.5)
        labels = r.integers(0, 3, (2, 8, 8)).astype(np.uint8)
        theta1 = np.array([[[0.95, 0.05, 0.02], [-0.05, 1.05, -0.03]],
                           [[1.10, 0.00, 0.05], [0.00, 0.90, 0.00]]])
        theta2 = np.array([[[0.70, 0.00, 0.10], [0.00, 0.70, -0.10]],
                           [[0.80, 0.00, 0.00], [0.00, 0.80, 0.05]]])
        def fwd():
            preds = [ops.softmax_channels(logits0), ops.softmax_channels(logits1)]
            return losses.unet_loss(preds, theta1, theta2, labels,
                                    out_h=8, out_w=8, restore=True).total
        return [logits0, logits1], fwd
    yield "objective-segmentation", COMPOSED_TOL, build_segmentation_objective

    def build_pose_net_end_to_end():
        net = build_pose_stn(8, seed=5, dtype=np.float64)
        # a nonzero head moves the sampling grid off the integer lattice,
        # where the sampler's derivative exists
        head_rng = np.random.default_rng(99)
        net.loc.head.b.data[...] = head_rng.uniform(-0.2, 0.2, 5)
        x = _t(r, 1, 2, 8, 8, lo=0.1, hi=1.0)
        ref = (head_rng.random((1, 1, 8, 8)) < 0.5).astype(np.float64)
        def fwd():
            theta, wimg, wmask = net(x)
            return losses.stn1_loss(wmask, ref).total + wimg.sum() * 0.01
        return [x], fwd
    yield "objective-pose-net-input", COMPOSED_TOL, build_pose_net_end_to_end


def run(quick: bool = False) -> list:
    results = []
    for name, tol, build in _cases(quick):
        t0 = time.perf_counter()
        try:
            rel = compare(build, tol)
        except Exception as exc:  # noqa: BLE001 - report the op as failed, keep going
            rel = float("inf")
            results.append(CheckResult(f"{name} ({exc})", rel, tol,
                                       time.perf_counter() - t0))
            continue
        results.append(CheckResult(name, rel, tol, time.perf_counter() - t0))
    return results


def format_results(results) -> str:
    lines = [f"{'check':<34} {'rel err':>12} {'tol':>8} {'time':>7}  status"]
    for res in results:
        lines.append(f"{res.name:<34} {res.rel_err:>12.3e} {res.tol:>8.0e} "
                     f"{res.seconds:>6.2f}s  {'ok' if res.ok else 'FAIL'}")
    n_bad = sum(not res.ok for res in results)
    lines.append(f"{len(results)} checks, {n_bad} failing")
    return "\n".join(lines)
