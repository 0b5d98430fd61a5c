"""Optimization loops: pose normalizer, ROI cropper, then the UNet.

The three networks train sequentially.  The pose normalizer learns to
warp every foreground mask onto a chosen reference mask; the cropper
then learns, with the pose network frozen, to regress the tight square
box around the labeled organs; the UNet finally trains on the (frozen)
normalized or cropped stream.  SGD uses Nesterov momentum, decoupled
weight decay added to the gradient, and a polynomial learning-rate
decay.  Every loop is a deterministic function of (config, data, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from . import geometry, losses
from .autodiff import ActivationMeter, Tensor, no_grad
from .autodiff import ops
from .nets import (CropSTN, DivergenceError, PoseSTN, UNet, UNetSpec,
                   build_crop_stn, build_pose_stn, build_unet)

MODES = ("plain", "stn1", "stn1+stn2")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    stn1_lr: float = 3e-4   # calibrated: the pose head sees O(100) gradients
    stn2_lr: float = 1e-3   # calibrated: the box head sees O(1) gradients
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    stn_epochs: int = 50
    unet_min_epochs: int = 50
    unet_max_epochs: int = 80
    poly_exponent: float = 0.9
    patience: int = 15
    min_delta: float = 0.1
    batch_size: int = 12
    patch: int | None = None    # ROI side in pixels; None means full frame
    f0: int = 8                 # UNet stem width
    seed: int = 0
    joint: bool = False         # fine-tune the STNs through the UNet loss

    def __post_init__(self):
        if min(self.lr0, self.stn1_lr, self.stn2_lr) <= 0 \
                or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("bad optimizer settings")
        if min(self.stn_epochs, self.unet_min_epochs, self.batch_size, self.f0) < 1:
            raise ValueError("epoch/batch/width settings must be positive")
        if self.unet_max_epochs < self.unet_min_epochs:
            raise ValueError("unet_max_epochs < unet_min_epochs")
        if self.patience < 0 or self.min_delta < 0 or self.poly_exponent <= 0:
            raise ValueError("bad early-stopping settings")


def check_patch(patch: int, side: int) -> int:
    if patch not in (side, side // 2, side // 4):
        raise ValueError(f"patch {patch} must be one of {side}/{side // 2}/{side // 4}")
    return patch


def poly_lr(epoch: int, max_epochs: int, lr0: float, exponent: float = 0.9) -> float:
    if not 0 <= epoch <= max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs}]")
    return lr0 * (1.0 - epoch / max_epochs) ** exponent


def sgd_step(params: dict, velocity: dict, lr: float, momentum: float = 0.99,
             nesterov: bool = True, weight_decay: float = 3e-5):
    """One in-place update.  params maps path -> Tensor with .grad set."""
    for name in params:
        p = params[name]
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        step = g + momentum * v if nesterov else v
        p.data -= (lr * step).astype(p.data.dtype, copy=False)


GRAD_CLIP_NORM = 5.0


def clip_grad_norm(params: dict, max_norm: float = GRAD_CLIP_NORM) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm.  With heavy momentum a single epoch of
    same-sign gradients can accumulate into a step large enough to throw
    a regression head past its saturation region; bounding the step
    keeps the box optimization inside the well-conditioned zone.
    """
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.dtype.str.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class RunLog:
    """Per-epoch training records plus a final summary, JSONL on disk."""
    kind: str
    records: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def add(self, record: dict):
        if self.records and record["epoch"] != self.records[-1]["epoch"] + 1:
            raise ValueError(f"epoch {record['epoch']} breaks monotone numbering")
        self.records.append(record)

    def save(self, path):
        with open(path, "w") as f:
            f.write(json.dumps({"run": self.kind, "version": 1}) + "\n")
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            f.write(json.dumps({"final": self.final}, sort_keys=True) + "\n")

    @staticmethod
    def load(path) -> "RunLog":
        with open(path) as f:
            lines = [json.loads(line) for line in f if line.strip()]
        if not lines or "run" not in lines[0]:
            raise ValueError(f"{path}: not a run log")
        log = RunLog(lines[0]["run"])
        for doc in lines[1:]:
            if "final" in doc:
                log.final = doc["final"]
            else:
                log.add(doc)
        return log


# -- batch plumbing -----------------------------------------------------------------


def _rng_for(seed: int, tag: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, epoch]))


def _derived_seed(seed: int, tag: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, tag, epoch]).generate_state(1)[0])


def _shuffled_batches(ids: list, batch_size: int, rng) -> list:
    order = list(ids)
    rng.shuffle(order)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _stack(cases, with_mask: bool):
    imgs = np.stack([c.image for c in cases])[:, None].astype(np.float32)
    if not with_mask:
        return imgs
    masks = np.stack([c.mask for c in cases])[:, None].astype(np.float32)
    return np.concatenate([imgs, masks], axis=1)


class _DivergenceGuard:
    """Raise after three consecutive non-finite step losses."""

    def __init__(self, what: str):
        self.what = what
        self.streak = 0
        self.last_finite_state = None

    def check(self, value: float, model):
        if math.isfinite(value):
            self.streak = 0
            return
        self.streak += 1
        if self.streak >= 3:
            err = DivergenceError(
                f"{self.what}: loss non-finite for {self.streak} consecutive steps")
            err.last_finite_state = self.last_finite_state
            raise err

    def snapshot(self, model):
        if self.streak == 0:
            self.last_finite_state = model.state_dict()


# -- pose normalizer ------------------------------------------------------------------


def evaluate_stn1(stn1: PoseSTN, cases, ref_mask: np.ndarray,
                  batch_size: int = 32) -> float:
    """Mean overlap score of warped foreground masks vs the reference."""
    stn1.eval()
    total, n = 0.0, 0
    with no_grad():
        for i in range(0, len(cases), batch_size):
            chunk = cases[i:i + batch_size]
            _, _, wmask = stn1(Tensor(_stack(chunk, with_mask=True)))
            lv = losses.stn1_loss(wmask, ref_mask[None, None])
            total += (100.0 - lv.item()) * len(chunk)
            n += len(chunk)
    return total / n


def train_stn1(cfg: TrainConfig, train_cases, val_cases, reference):
    """Teach the pose network to warp every mask onto the reference mask."""
    side = train_cases[0].image.shape[0]
    stn1 = build_pose_stn(side, seed=cfg.seed)
    params = dict(stn1.named_parameters())
    velocity: dict = {}
    ref_mask = reference.mask.astype(np.float32)
    log = RunLog("stn1")
    guard = _DivergenceGuard("stn1 training")
    guard.snapshot(stn1)
    t0 = time.perf_counter()
    ids = list(range(len(train_cases)))
    for epoch in range(cfg.stn_epochs):
        lr = poly_lr(epoch, cfg.stn_epochs, cfg.stn1_lr, cfg.poly_exponent)
        stn1.train()
        rng = _rng_for(cfg.seed, 11, epoch)
        epoch_loss, steps = 0.0, 0
        for batch in _shuffled_batches(ids, cfg.batch_size, rng):
            x = Tensor(_stack([train_cases[i] for i in batch], with_mask=True))
            stn1.zero_grad()
            lv = losses.stn1_loss(stn1(x)[2], ref_mask[None, None])
            lv.total.backward()
            guard.check(lv.item(), stn1)
            sgd_step(params, velocity, lr, cfg.momentum, cfg.nesterov,
                     cfg.weight_decay)
            epoch_loss += lv.item()
            steps += 1
        guard.snapshot(stn1)
        val = evaluate_stn1(stn1, val_cases, ref_mask, cfg.batch_size)
        log.add({"epoch": epoch, "lr": lr, "train_loss": epoch_loss / steps,
                 "val_soft_dice": val,
                 "seconds": round(time.perf_counter() - t0, 3)})
    state = stn1.state_dict()
    log.final = {"checkpoint_sha256": state_checksum(state),
                 "val_soft_dice": log.records[-1]["val_soft_dice"],
                 "seconds_total": round(time.perf_counter() - t0, 3)}
    return stn1, log


# -- ROI cropper ---------------------------------------------------------------------


def crop_target(labels_warped: np.ndarray, side: int, min_side: float):
    """Tight square box around nonzero labels, as (box vector, map, ok).

    Empty labels fall back to the full frame so the case still
    contributes a sane regression target.
    """
    ys, xs = np.nonzero(labels_warped)
    if len(ys) == 0:
        box = geometry.BBox(-1.0, -1.0, 1.0, 1.0)
    else:
        scale = 2.0 / (side - 1)
        box = geometry.BBox(-1.0 + scale * xs.min(), -1.0 + scale * ys.min(),
                            -1.0 + scale * xs.max(), -1.0 + scale * ys.max())
    box = geometry.enforce_square_min(box, min_side)
    return box, geometry.bbox_to_crop_map(box)


def _stn2_targets(cases, theta1: np.ndarray, wimg: np.ndarray, patch: int,
                  min_side: float):
    """Target boxes and crops from each case's own labels, pose-normalized."""
    n, side = wimg.shape[0], wimg.shape[2]
    theta_t = np.empty((n, 2, 3), dtype=np.float32)
    t_crop = np.empty((n, 1, patch, patch), dtype=np.float32)
    for i, case in enumerate(cases):
        mp = geometry.AffineMap2D(theta1[i])
        wl = geometry.warp_image_np(case.labels.astype(np.float64), mp,
                                    side, side, mode="nearest")
        _, crop_map = crop_target(wl > 0, side, min_side)
        theta_t[i] = crop_map.m
        t_crop[i, 0] = geometry.warp_image_np(
            wimg[i, 0].astype(np.float64), crop_map, patch, patch)
    return theta_t, t_crop


def _pose_outputs(stn1: PoseSTN, cases):
    stn1.eval()
    with no_grad():
        theta1, wimg, _ = stn1(Tensor(_stack(cases, with_mask=True)))
    return theta1.data, wimg.data


def evaluate_stn2(stn2: CropSTN, stn1: PoseSTN, cases, patch: int,
                  batch_size: int = 32) -> float:
    stn2.eval()
    total, n = 0.0, 0
    with no_grad():
        for i in range(0, len(cases), batch_size):
            chunk = cases[i:i + batch_size]
            theta1, wimg = _pose_outputs(stn1, chunk)
            theta_t, t_crop = _stn2_targets(chunk, theta1, wimg, patch,
                                            stn2.min_side)
            theta2, crop, _ = stn2(Tensor(wimg), patch)
            total += losses.stn2_loss(crop, t_crop, theta2, theta_t).item() * len(chunk)
            n += len(chunk)
    return total / n


def train_stn2(cfg: TrainConfig, train_cases, val_cases, stn1: PoseSTN):
    """Teach the cropper to find organ boxes; the pose network stays frozen."""
    side = train_cases[0].image.shape[0]
    patch = check_patch(cfg.patch or side, side)
    stn2 = build_crop_stn(side, seed=cfg.seed)
    params = dict(stn2.named_parameters())
    velocity: dict = {}
    log = RunLog("stn2")
    guard = _DivergenceGuard("stn2 training")
    guard.snapshot(stn2)
    t0 = time.perf_counter()
    ids = list(range(len(train_cases)))
    for epoch in range(cfg.stn_epochs):
        lr = poly_lr(epoch, cfg.stn_epochs, cfg.stn2_lr, cfg.poly_exponent)
        stn2.train()
        rng = _rng_for(cfg.seed, 22, epoch)
        epoch_loss, steps = 0.0, 0
        for batch in _shuffled_batches(ids, cfg.batch_size, rng):
            chunk = [train_cases[i] for i in batch]
            theta1, wimg = _pose_outputs(stn1, chunk)
            theta_t, t_crop = _stn2_targets(chunk, theta1, wimg, patch,
                                            stn2.min_side)
            stn2.zero_grad()
            theta2, crop, _ = stn2(Tensor(wimg), patch)
            lv = losses.stn2_loss(crop, t_crop, theta2, theta_t)
            lv.total.backward()
            guard.check(lv.item(), stn2)
            clip_grad_norm(params)
            sgd_step(params, velocity, lr, cfg.momentum, cfg.nesterov,
                     cfg.weight_decay)
            epoch_loss += lv.item()
            steps += 1
        guard.snapshot(stn2)
        val = evaluate_stn2(stn2, stn1, val_cases, patch, cfg.batch_size)
        log.add({"epoch": epoch, "lr": lr, "train_loss": epoch_loss / steps,
                 "val_loss": val,
                 "seconds": round(time.perf_counter() - t0, 3)})
    state = stn2.state_dict()
    log.final = {"checkpoint_sha256": state_checksum(state),
                 "val_loss": log.records[-1]["val_loss"],
                 "seconds_total": round(time.perf_counter() - t0, 3)}
    return stn2, log


# -- UNet ---------------------------------------------------------------------------


def _identity_theta():
    return geometry.AffineMap2D.identity()


def frozen_inputs(cases, mode: str, stn1, stn2, patch: int):
    """Input grid for the UNet plus the per-item transforms that made it."""
    labels = np.stack([c.labels for c in cases])
    if mode == "plain":
        return _stack(cases, with_mask=False), labels, None, None
    with no_grad():
        theta1, wimg, _ = stn1(Tensor(_stack(cases, with_mask=True)))
        if mode == "stn1":
            return wimg.data, labels, theta1.data, None
        theta2, crop, _ = stn2(wimg, patch)
        return crop.data, labels, theta1.data, theta2.data


def evaluate_unet(unet: UNet, cases, mode: str, stn1, stn2, patch: int,
                  batch_size: int = 16) -> dict:
    """Mean restored hard overlap per organ class on held-out cases."""
    unet.eval()
    if stn1 is not None:
        stn1.eval()
    if stn2 is not None:
        stn2.eval()
    side = cases[0].image.shape[0]
    kidney, tumor = [], []
    with no_grad():
        for i in range(0, len(cases), batch_size):
            chunk = cases[i:i + batch_size]
            x, _, t1, t2 = frozen_inputs(chunk, mode, stn1, stn2, patch)
            preds = unet(Tensor(x))
            p = preds[0]
            if mode != "plain":
                grids = losses.restore_grids(
                    t1, t2 if t2 is not None else _identity_theta(),
                    len(chunk), side, side, p.data.dtype)
                p = ops.bilinear_sample(p, Tensor(grids))
            seg = np.argmax(p.data, axis=1).astype(np.uint8)
            for j, case in enumerate(chunk):
                kidney.append(losses.hard_dice(seg[j], case.labels, 1))
                tumor.append(losses.hard_dice(seg[j], case.labels, 2))
    k, t = float(np.mean(kidney)), float(np.mean(tumor))
    return {"kidney": k, "tumor": t, "mean": (k + t) / 2.0}


def train_unet(cfg: TrainConfig, train_cases, val_cases, mode: str,
               stn1: PoseSTN | None = None, stn2: CropSTN | None = None,
               index=None, augment=None):
    """Deep-supervised segmentation training on the configured stream.

    mode selects the frozen front end: "plain" feeds raw frames,
    "stn1" pose-normalized frames, "stn1+stn2" cropped patches.  When
    `index` is given, batches follow the tissue-quota policy; otherwise
    they are plain shuffles.  `augment` is an optional (case, rng) ->
    case hook applied to training draws only.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode != "plain" and stn1 is None:
        raise ValueError(f"mode {mode!r} needs a trained pose network")
    if mode == "stn1+stn2" and stn2 is None:
        raise ValueError("mode 'stn1+stn2' needs a trained crop network")
    side = train_cases[0].image.shape[0]
    patch = check_patch(cfg.patch or side, side)
    unet_side = patch if mode == "stn1+stn2" else side
    spec = UNetSpec(side=unet_side, f0=cfg.f0)
    unet = build_unet(spec, seed=cfg.seed)
    params = dict(unet.named_parameters())
    if cfg.joint:
        if stn1 is not None:
            params.update({"stn1." + k: v for k, v in stn1.named_parameters()})
        if stn2 is not None:
            params.update({"stn2." + k: v for k, v in stn2.named_parameters()})
    velocity: dict = {}
    if not cfg.joint:
        # frozen front ends must not drift (batch-norm running stats)
        if stn1 is not None:
            stn1.eval()
        if stn2 is not None:
            stn2.eval()
    by_id = {c.id: c for c in train_cases}
    log = RunLog(f"unet[{mode}]")
    guard = _DivergenceGuard("unet training")
    guard.snapshot(unet)
    t0 = time.perf_counter()
    best, best_state, best_epoch, stale = -np.inf, None, -1, 0
    activation_bytes = None
    stop_epoch = cfg.unet_max_epochs
    ident = _identity_theta()

    for epoch in range(cfg.unet_max_epochs):
        lr = poly_lr(epoch, cfg.unet_max_epochs, cfg.lr0, cfg.poly_exponent)
        unet.train()
        if cfg.joint:
            if stn1 is not None:
                stn1.train()
            if stn2 is not None:
                stn2.train()
        if index is not None:
            batches = list(datamod.oversampled_batches(
                index, cfg.batch_size, _derived_seed(cfg.seed, 33, epoch)))
            batches = [[by_id[i] for i in b] for b in batches]
        else:
            rng_b = _rng_for(cfg.seed, 33, epoch)
            batches = [[train_cases[i] for i in b]
                       for b in _shuffled_batches(list(range(len(train_cases))),
                                                  cfg.batch_size, rng_b)]
        aug_rng = _rng_for(cfg.seed, 44, epoch)
        epoch_loss, steps = 0.0, 0
        for chunk in batches:
            if augment is not None:
                chunk = [augment(c, aug_rng) for c in chunk]
            unet.zero_grad()
            if cfg.joint and mode != "plain":
                stn1.zero_grad()
                if stn2 is not None:
                    stn2.zero_grad()
                labels = np.stack([c.labels for c in chunk])
                theta1, wimg, _ = stn1(Tensor(_stack(chunk, with_mask=True)))
                if mode == "stn1":
                    x_t, t1, t2 = wimg, theta1.data, None
                else:
                    theta2, crop, _ = stn2(wimg, patch)
                    x_t, t1, t2 = crop, theta1.data, theta2.data
            else:
                x, labels, t1, t2 = frozen_inputs(chunk, mode, stn1, stn2, patch)
                x_t = Tensor(x)
            if activation_bytes is None:
                with ActivationMeter() as meter:
                    preds = unet(x_t)
                activation_bytes = meter.bytes
            else:
                preds = unet(x_t)
            lv = losses.unet_loss(
                preds, t1 if t1 is not None else ident,
                t2 if t2 is not None else ident, labels,
                out_h=side, out_w=side, restore=(mode != "plain"))
            lv.total.backward()
            guard.check(lv.item(), unet)
            sgd_step(params, velocity, lr, cfg.momentum, cfg.nesterov,
                     cfg.weight_decay)
            epoch_loss += lv.item()
            steps += 1
        guard.snapshot(unet)
        val = evaluate_unet(unet, val_cases, mode, stn1, stn2, patch,
                            cfg.batch_size)
        if val["mean"] > best + cfg.min_delta:
            best, best_epoch, stale = val["mean"], epoch, 0
            best_state = unet.state_dict()
        else:
            stale += 1
        log.add({"epoch": epoch, "lr": lr, "train_loss": epoch_loss / max(steps, 1),
                 "val_dice": val,
                 "seconds": round(time.perf_counter() - t0, 3)})
        if epoch + 1 >= cfg.unet_min_epochs and stale >= cfg.patience:
            stop_epoch = epoch + 1
            break

    if best_state is not None:
        unet.load_state_dict(best_state)
    state = unet.state_dict()
    log.final = {"checkpoint_sha256": state_checksum(state),
                 "best_epoch": best_epoch, "best_val_mean_dice": best,
                 "epochs_run": stop_epoch,
                 "unet_activation_bytes": activation_bytes,
                 "seconds_total": round(time.perf_counter() - t0, 3)}
    return unet, log
