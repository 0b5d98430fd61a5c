"""Per-case preprocessing: crop, resample, clip, z-score, square canvas.

The chain (in this order, each step optional only where stated):

1. crop to the bounding box of nonzero image pixels,
2. resample to the target pixel size (bilinear image, nearest labels),
3. compute the foreground mask: largest 4-connected component of
   above-background pixels, holes filled,
4. clip intensities to the [0.5, 99.5] percentiles of foreground pixels
   (linear interpolation between order statistics),
5. z-score with foreground mean/std,
6. pad or center-crop to a square canvas; padded image pixels take the
   normalized minimum (what background clips to), labels and mask 0.

Everything needed to put a prediction back into the original frame is
recorded in the returned case's metadata under "prep".
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import geometry
from .data import Case

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
STD_FLOOR = 1e-8


def foreground_mask(image: np.ndarray, threshold: float | None = None,
                    case_id: str = "?") -> np.ndarray:
    """Largest 4-connected above-threshold component, holes filled.

    The default threshold is the image minimum, so "background" means
    exactly the darkest value.
    """
    image = np.asarray(image)
    thr = float(image.min()) if threshold is None else float(threshold)
    above = image > thr
    if not above.any():
        raise ValueError(f"case {case_id}: empty foreground (threshold {thr})")
    lab, n = ndimage.label(above, structure=FOUR_CONN)
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    keep = lab == sizes.argmax()
    return ndimage.binary_fill_holes(keep).astype(np.uint8)


def _nonzero_bbox(image: np.ndarray, case_id: str):
    rows = np.flatnonzero(image.any(axis=1))
    cols = np.flatnonzero(image.any(axis=0))
    if rows.size == 0:
        raise ValueError(f"case {case_id}: image is entirely zero")
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def _to_canvas(arr: np.ndarray, side: int, fill):
    """Symmetric pad / center crop to side x side; returns (out, r0, c0).

    (r0, c0) locate the array's top-left corner on the canvas; negative
    values mean the array was cropped by that much instead.
    """
    h, w = arr.shape
    out = np.full((side, side), fill, dtype=arr.dtype)
    r0 = (side - h) // 2
    c0 = (side - w) // 2
    src_r = slice(max(0, -r0), max(0, -r0) + min(h, side))
    src_c = slice(max(0, -c0), max(0, -c0) + min(w, side))
    dst_r = slice(max(0, r0), max(0, r0) + min(h, side))
    dst_c = slice(max(0, c0), max(0, c0) + min(w, side))
    out[dst_r, dst_c] = arr[src_r, src_c]
    return out, r0, c0


def preprocess_case(raw: Case, target_pixel_size: float | None = None,
                    side: int | None = None) -> Case:
    """Normalize one case; see the module docstring for the chain."""
    target = raw.pixel_size if target_pixel_size is None else float(target_pixel_size)
    if target <= 0:
        raise ValueError(f"target pixel size must be positive, got {target}")
    image = np.asarray(raw.image, dtype=np.float64)
    labels = np.asarray(raw.labels, dtype=np.uint8)
    orig_shape = image.shape

    r0, r1, c0, c1 = _nonzero_bbox(image, raw.id)
    image = image[r0:r1, c0:c1]
    labels = labels[r0:r1, c0:c1]

    factor = raw.pixel_size / target
    rh = max(2, int(round(image.shape[0] * factor)))
    rw = max(2, int(round(image.shape[1] * factor)))
    if (rh, rw) != image.shape:
        image = geometry.resize_np(image, rh, rw, "bilinear")
        labels = geometry.resize_np(labels, rh, rw, "nearest")

    mask = foreground_mask(image, case_id=raw.id)
    fg = image[mask.astype(bool)]
    lo, hi = np.percentile(fg, [0.5, 99.5])
    image = np.clip(image, lo, hi)
    mu = float(image[mask.astype(bool)].mean())
    sd = float(image[mask.astype(bool)].std())
    if sd < STD_FLOOR:
        raise ValueError(f"case {raw.id}: degenerate foreground std {sd:.2e}")
    image = (image - mu) / sd
    pad_value = (lo - mu) / sd

    if side is None:
        side = max(image.shape)
    image, pr, pc = _to_canvas(image.astype(np.float32), side, np.float32(pad_value))
    labels, _, _ = _to_canvas(labels, side, np.uint8(0))
    mask, _, _ = _to_canvas(mask, side, np.uint8(0))

    meta = dict(raw.meta)
    meta["prep"] = {
        "orig_shape": list(orig_shape),
        "crop": [int(r0), int(c0), int(r1 - r0), int(c1 - c0)],
        "resampled_shape": [int(rh), int(rw)],
        "canvas_offset": [int(pr), int(pc)],
        "pad_value": float(pad_value),
    }
    return Case(id=raw.id, image=image, labels=labels, mask=mask,
                pixel_size=target, meta=meta)


def restore_to_original(labels: np.ndarray, prep: dict) -> np.ndarray:
    """Map side x side label predictions back to the original frame.

    Un-pads to the resampled shape, nearest-resizes back to the cropped
    shape, then pastes into a zero canvas of the original shape.
    """
    labels = np.asarray(labels)
    rh, rw = prep["resampled_shape"]
    pr, pc = prep["canvas_offset"]
    side = labels.shape[0]
    # inverse of _to_canvas
    buf = np.zeros((rh, rw), dtype=labels.dtype)
    src_r = slice(max(0, pr), max(0, pr) + min(rh, side))
    src_c = slice(max(0, pc), max(0, pc) + min(rw, side))
    dst_r = slice(max(0, -pr), max(0, -pr) + min(rh, side))
    dst_c = slice(max(0, -pc), max(0, -pc) + min(rw, side))
    buf[dst_r, dst_c] = labels[src_r, src_c]
    r0, c0, ch, cw = prep["crop"]
    if (rh, rw) != (ch, cw):
        buf = geometry.resize_np(buf, ch, cw, "nearest")
    out = np.zeros(tuple(prep["orig_shape"]), dtype=labels.dtype)
    out[r0:r0 + ch, c0:c0 + cw] = buf
    return out
