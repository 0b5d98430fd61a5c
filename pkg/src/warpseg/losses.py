"""Training objectives and evaluation overlap scores.

Three minimized quantities:

- pose loss: 100 minus the soft overlap score between the warped
  foreground mask and the reference mask,
- crop loss: per-pixel L1 between predicted and target crops plus the
  root of the batch-mean squared matrix difference,
- segmentation loss: deep-supervised sum over decoder levels, weights
  1/2^n, of cross entropy plus (100 - soft overlap) computed after the
  prediction is warped back to the original frame.

Soft overlap uses squared-magnitude denominators (sum h^2 + sum t^2)
scaled to [0, 100], with 1e-5 smoothing in numerator and denominator so
empty-vs-empty scores as a perfect match.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .autodiff import Tensor, as_tensor
from .autodiff import ops

DICE_EPS = 1e-5
PROB_FLOOR = 1e-7


@dataclass
class LossValue:
    """Scalar graph tensor plus detached sub-terms for logging."""
    total: Tensor
    components: dict = field(default_factory=dict)

    def item(self) -> float:
        return self.total.item()


def soft_dice(h, t) -> Tensor:
    """Soft overlap score in [0, 100] over all elements of h and t."""
    h = as_tensor(h)
    t = as_tensor(t)
    if h.shape != t.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {t.shape}")
    inter = (h * t).sum()
    denom = (h * h).sum() + (t * t).sum()
    return (inter * 2.0 + DICE_EPS) / (denom + DICE_EPS) * 100.0


def soft_dice_per_item(h: Tensor, t) -> Tensor:
    """Soft overlap per batch item: [N, ...] -> [N]."""
    t = as_tensor(t)
    if h.shape != t.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {t.shape}")
    n = h.shape[0]
    hf = h.reshape(n, -1)
    tf = t.reshape(n, -1)
    inter = (hf * tf).sum(axis=1)
    denom = (hf * hf).sum(axis=1) + (tf * tf).sum(axis=1)
    return (inter * 2.0 + DICE_EPS) / (denom + DICE_EPS) * 100.0


def stn1_loss(h_mask: Tensor, ref_mask) -> LossValue:
    """Minimized pose objective: 100 - mean per-item soft overlap.

    ref_mask may be a single [1,1,S,S] reference broadcast over the
    batch or a per-item stack of the same shape as h_mask.
    """
    ref = as_tensor(ref_mask)
    if ref.shape != h_mask.shape:
        if ref.shape[0] == 1 and ref.shape[1:] == h_mask.shape[1:]:
            ref = Tensor(np.repeat(ref.data, h_mask.shape[0], axis=0))
        else:
            raise ValueError(f"shape mismatch {h_mask.shape} vs {ref.shape}")
    dice = soft_dice_per_item(h_mask, ref).mean()
    total = 100.0 - dice
    return LossValue(total, {"soft_dice": float(dice.item())})


def stn2_loss(h_crop: Tensor, t_crop, theta2: Tensor, theta_t) -> LossValue:
    """Crop objective: mean absolute pixel error plus the root of the
    batch-mean squared matrix difference."""
    t_crop = as_tensor(t_crop)
    theta_t = as_tensor(theta_t)
    if h_crop.shape != t_crop.shape:
        raise ValueError(f"crop shape mismatch {h_crop.shape} vs {t_crop.shape}")
    if theta2.shape != theta_t.shape:
        raise ValueError(f"matrix shape mismatch {theta2.shape} vs {theta_t.shape}")
    if h_crop.shape[0] != theta2.shape[0]:
        raise ValueError(f"batch mismatch: {h_crop.shape[0]} crops, {theta2.shape[0]} matrices")
    l1 = ops.absolute(h_crop - t_crop).mean()
    d = theta2 - theta_t
    l2 = ops.sqrt((d * d).sum() * (1.0 / theta2.shape[0]))
    total = l1 + l2
    return LossValue(total, {"l1": float(l1.item()), "l2": float(l2.item())})


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean -log p(true class); probs [N,C,H,W] already softmaxed."""
    labels = np.asarray(labels)
    n, c = probs.shape[0], probs.shape[1]
    if labels.shape != (n,) + probs.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match probs {probs.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label values outside [0, {c})")
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    np.put_along_axis(onehot, labels[:, None].astype(np.int64), 1.0, axis=1)
    logp = ops.log(ops.clip(probs, PROB_FLOOR, 1.0))
    return -((as_tensor(onehot) * logp).sum() * (1.0 / (labels.size)))


def _as_theta_batch(theta, n: int) -> np.ndarray:
    """Accept AffineMap2D, [2,3] or [N,2,3]; return float64 [N,2,3]."""
    if isinstance(theta, geometry.AffineMap2D):
        arr = theta.m[None]
    else:
        arr = np.asarray(theta, dtype=np.float64)
        if arr.shape == (2, 3):
            arr = arr[None]
    if arr.shape == (1, 2, 3) and n > 1:
        arr = np.repeat(arr, n, axis=0)
    if arr.shape != (n, 2, 3):
        raise ValueError(f"expected [N,2,3] matrices, got {arr.shape}")
    return arr


def restore_grids(theta1, theta2, n: int, out_h: int, out_w: int,
                  dtype=np.float32) -> np.ndarray:
    """Per-item sampling grids [N,H,W,2] for crop-frame -> original frame."""
    t1 = _as_theta_batch(theta1, n)
    t2 = _as_theta_batch(theta2, n)
    grids = np.empty((n, out_h, out_w, 2), dtype=dtype)
    for i in range(n):
        r = geometry.restore_map(geometry.AffineMap2D(t1[i]), geometry.AffineMap2D(t2[i]))
        grids[i] = geometry.affine_grid_np(r, out_h, out_w)
    return grids


def foreground_soft_dice(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over foreground classes and batch items of the soft overlap."""
    c = probs.shape[1]
    terms = []
    for cls in range(1, c):
        target = (labels == cls).astype(probs.data.dtype)
        terms.append(soft_dice_per_item(ops.channel(probs, cls), target))
    return ops.stack1(terms).mean()


def unet_loss(preds, theta1, theta2, labels: np.ndarray,
              out_h: int | None = None, out_w: int | None = None,
              restore: bool = True) -> LossValue:
    """Deep-supervised segmentation objective.

    preds[k] is the softmax output of supervised decoder level k
    (level 0 = full crop resolution, each next one halved).  Every level
    is upsampled to level-0 resolution, warped to the original frame
    through the inverse maps, and scored against the labels there.
    Weights are 1/2^k.  Set restore=False to compare at crop resolution
    against crop-frame labels instead.
    """
    if not preds:
        raise ValueError("need at least one prediction level")
    n = preds[0].shape[0]
    labels = np.asarray(labels)
    if out_h is None:
        out_h, out_w = labels.shape[-2:]
    p0h, p0w = preds[0].shape[2], preds[0].shape[3]
    if restore:
        grids = restore_grids(theta1, theta2, n, out_h, out_w, preds[0].data.dtype)
        grid_t = Tensor(grids)
    total = None
    ce_sum = 0.0
    dice_sum = 0.0
    for k, p in enumerate(preds):
        if p.shape[0] != n or p.shape[1] != preds[0].shape[1]:
            raise ValueError(f"level {k} has inconsistent shape {p.shape}")
        if (p.shape[2], p.shape[3]) != (p0h, p0w):
            p = ops.upsample_bilinear(p, p0h, p0w)
        if restore:
            p = ops.bilinear_sample(p, grid_t)
        ce = cross_entropy(p, labels)
        dice = foreground_soft_dice(p, labels)
        term = ce + (100.0 - dice)
        w = 0.5 ** k
        total = term * w if total is None else total + term * w
        ce_sum += w * ce.item()
        dice_sum += float(dice.item())
    return LossValue(total, {"ce": ce_sum, "mean_fg_soft_dice": dice_sum / len(preds)})


def hard_dice(pred: np.ndarray, ref: np.ndarray, cls: int) -> float:
    """2|A n B| / (|A| + |B|) * 100 on the binarized class masks.

    Both masks empty counts as 100: an absent structure correctly
    predicted absent is a success.
    """
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    known = np.union1d(np.unique(ref), np.unique(pred))
    if cls < 0 or (known.size and cls > max(known.max(), 2)):
        raise ValueError(f"unknown class id {cls}")
    a = pred == cls
    b = ref == cls
    sa, sb = int(a.sum()), int(b.sum())
    if sa == 0 and sb == 0:
        return 100.0
    return 200.0 * int((a & b).sum()) / (sa + sb)
