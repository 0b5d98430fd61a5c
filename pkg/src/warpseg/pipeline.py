"""End-to-end inference with inverse restoration, plus the augmentation baseline.

`infer` runs one raw case through the full chain: intensity/canvas
normalization, pose/size normalization, ROI cropping, segmentation, then
restoration of the class probabilities back through the inverse of both
geometric transforms before the argmax, and finally paste-back into the
case's original frame.  Probabilities (not argmaxed labels) are warped
back so the crop boundary does not leave nearest-neighbour artifacts.

`augment` is the comparator used by the augmented-baseline training mode:
a random similarity warp plus intensity jitter applied consistently to
image, labels and mask (nearest-neighbour for the discrete channels).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry, losses, preprocess
from .autodiff import Tensor, no_grad
from .autodiff import ops
from .data import Case
from .nets import CropSTN, PoseSTN, UNet

MODES = ("plain", "stn1", "stn1+stn2")


@dataclass
class SegResult:
    """Prediction for one case, mapped back to the case's original frame."""

    case_id: str
    prediction: np.ndarray            # uint8 labels, original frame
    dice: dict                        # class name -> hard overlap in [0, 100]
    theta1: np.ndarray | None = None  # [2,3] pose map (None in plain mode)
    theta2: np.ndarray | None = None  # [2,3] crop map (None without the crop stage)
    seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    def validate(self, case: Case):
        if self.prediction.shape != case.labels.shape:
            raise ValueError(
                f"{self.case_id}: prediction shape {self.prediction.shape} "
                f"does not match the original frame {case.labels.shape}")
        for name, value in self.dice.items():
            if not (0.0 <= value <= 100.0):
                raise ValueError(f"{self.case_id}: {name} overlap {value} out of [0, 100]")


def check_compatible(stn1, stn2, unet: UNet, mode: str, patch: int | None):
    """Validate checkpoints against the requested mode before any compute.

    Returns (side, patch): the working canvas side and the segmenter's
    input side.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "plain":
        if stn1 is not None or stn2 is not None:
            raise ValueError("plain mode takes no transformer checkpoints")
        return unet.spec.side, unet.spec.side
    if stn1 is None:
        raise ValueError(f"mode {mode!r} needs a trained pose network")
    side = stn1.side
    if mode == "stn1":
        if stn2 is not None:
            raise ValueError("mode 'stn1' takes no crop checkpoint")
        if unet.spec.side != side:
            raise ValueError(
                f"segmenter expects side {unet.spec.side}, pose network works at {side}")
        return side, side
    if stn2 is None:
        raise ValueError("mode 'stn1+stn2' needs a trained crop network")
    if stn2.side != side:
        raise ValueError(
            f"crop network side {stn2.side} does not match pose network side {side}")
    patch = int(patch) if patch is not None else unet.spec.side
    if patch not in (side, side // 2, side // 4):
        raise ValueError(f"patch {patch} must be the side {side} or side/2 or side/4")
    if unet.spec.side != patch:
        raise ValueError(
            f"segmenter expects side {unet.spec.side}, crop patch is {patch}")
    return side, patch


def infer(case: Case, stn1: PoseSTN | None, stn2: CropSTN | None, unet: UNet,
          mode: str, patch: int | None = None) -> SegResult:
    """Segment one raw case and restore the result to its original frame."""
    side, patch = check_compatible(stn1, stn2, unet, mode, patch)
    t0 = time.perf_counter()
    prep = preprocess.preprocess_case(case, side=side)
    unet.eval()
    if stn1 is not None:
        stn1.eval()
    if stn2 is not None:
        stn2.eval()
    t1 = t2 = None
    with no_grad():
        if mode == "plain":
            x = Tensor(prep.image[None, None].astype(np.float32))
            preds = unet(x)
        else:
            stacked = np.stack([prep.image, prep.mask.astype(np.float32)])[None]
            theta1, wimg, _ = stn1(Tensor(stacked.astype(np.float32)))
            t1 = theta1.data
            if mode == "stn1":
                preds = unet(wimg)
            else:
                theta2, crop, _ = stn2(wimg, patch)
                t2 = theta2.data
                preds = unet(crop)
        p = preds[0]
        if mode != "plain":
            grids = losses.restore_grids(
                t1, t2 if t2 is not None else geometry.AffineMap2D.identity(),
                1, side, side, p.data.dtype)
            p = ops.bilinear_sample(p, Tensor(grids))
    seg = np.argmax(p.data, axis=1)[0].astype(np.uint8)
    labels_orig = preprocess.restore_to_original(seg, prep.meta["prep"])
    result = SegResult(
        case_id=case.id,
        prediction=labels_orig,
        dice={"kidney": losses.hard_dice(labels_orig, case.labels, 1),
              "tumor": losses.hard_dice(labels_orig, case.labels, 2)},
        theta1=None if t1 is None else t1[0].copy(),
        theta2=None if t2 is None else t2[0].copy(),
        seconds=time.perf_counter() - t0,
    )
    result.validate(case)
    return result


def evaluate_cases(cases, stn1, stn2, unet: UNet, mode: str,
                   patch: int | None = None):
    """Run `infer` over raw cases; -> (results, per-class mean/std summary)."""
    results = [infer(c, stn1, stn2, unet, mode, patch) for c in cases]
    summary = summarize_dice(results)
    return results, summary


def summarize_dice(results) -> dict:
    """Mean and standard deviation per class over a list of SegResults."""
    out = {}
    for cls in ("kidney", "tumor"):
        vals = np.array([r.dice[cls] for r in results], dtype=np.float64)
        out[cls] = {"mean": float(vals.mean()), "std": float(vals.std()),
                    "n": int(vals.size)}
    out["mean"] = (out["kidney"]["mean"] + out["tumor"]["mean"]) / 2.0
    return out


# -- augmentation baseline --------------------------------------------------------


@dataclass(frozen=True)
class AugmentRanges:
    """Same pose family the phantom generator draws from, plus intensity jitter."""

    angle_deg: float = 30.0
    scale_range: tuple = (0.6, 1.4)
    translate_frac: float = 0.2
    intensity_scale: float = 0.1
    intensity_shift: float = 0.1


def augment(case: Case, rng: np.random.Generator,
            ranges: AugmentRanges = AugmentRanges()) -> Case:
    """Random similarity warp + intensity jitter, consistent across channels.

    Labels and mask are warped with nearest-neighbour interpolation so
    the label set is preserved; the image fills with the case's
    normalization pad value so augmented background matches the
    untouched background.  All-zero ranges reproduce the case exactly.
    """
    angle = np.deg2rad(rng.uniform(-ranges.angle_deg, ranges.angle_deg))
    lo, hi = ranges.scale_range
    sx = rng.uniform(lo, hi)
    sy = rng.uniform(lo, hi)
    tx = rng.uniform(-ranges.translate_frac, ranges.translate_frac) * 2.0
    ty = rng.uniform(-ranges.translate_frac, ranges.translate_frac) * 2.0
    gain = 1.0 + rng.uniform(-ranges.intensity_scale, ranges.intensity_scale)
    bias = rng.uniform(-ranges.intensity_shift, ranges.intensity_shift)

    mp = geometry.similarity_to_map(
        geometry.SimilarityParams(angle, sx, sy, tx, ty))
    h, w = case.image.shape
    fill = float(case.meta.get("prep", {}).get("pad_value", 0.0))
    image = geometry.warp_image_np(
        case.image.astype(np.float64), mp, h, w, "bilinear", fill=fill)
    image = (image * gain + bias).astype(np.float32)
    labels = geometry.warp_image_np(case.labels, mp, h, w, "nearest", fill=0)
    mask = geometry.warp_image_np(case.mask, mp, h, w, "nearest", fill=0)
    return Case(id=case.id, image=image, labels=labels.astype(np.uint8),
                mask=mask.astype(np.uint8), pixel_size=case.pixel_size,
                meta=case.meta)
