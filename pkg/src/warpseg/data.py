"""Synthetic abdominal phantoms, dataset persistence, batch policy.

A phantom is an analytic scene in normalized [-1,1]^2 coordinates: an
elliptical abdomen (smooth intensity, slightly wider than tall so
orientation is observable) containing 0-2 elliptical kidneys (label 1),
optionally one tumor blob inside a kidney (label 2), and sometimes a
dark internal cavity.  A random similarity draw (rotation, anisotropic
scale, translation) poses the scene; pixels are evaluated analytically
at the inversely mapped positions, so labels are exact and the stored
pose parameters are exactly the transform an ideal pose normalizer
should regress.  Pixel noise is added after evaluation and is never
warped.

Case file layout (little-endian):
    bytes 0-3  magic "WSEG"
    bytes 4-5  format version (u16) = 1
    bytes 6-9  metadata length L (u32)
    L bytes    JSON metadata: id, shape, pixel_size, pose, flags, extras
    then raw arrays in order: image (f32), labels (u8), mask (u8),
    each shape[0]*shape[1] elements, C order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry

CASE_MAGIC = b"WSEG"
CASE_VERSION = 1


@dataclass
class Case:
    id: str
    image: np.ndarray          # [H,W] float32
    labels: np.ndarray         # [H,W] uint8, {0,1,2}
    mask: np.ndarray           # [H,W] uint8 foreground
    pixel_size: float = 1.0
    meta: dict = field(default_factory=dict)

    def validate(self):
        if self.image.shape != self.labels.shape or self.image.shape != self.mask.shape:
            raise ValueError(f"case {self.id}: image {self.image.shape}, labels "
                             f"{self.labels.shape}, mask {self.mask.shape} differ")
        bad = set(np.unique(self.labels)) - {0, 1, 2}
        if bad:
            raise ValueError(f"case {self.id}: unexpected label values {sorted(bad)}")
        if self.pixel_size <= 0:
            raise ValueError(f"case {self.id}: pixel_size {self.pixel_size} <= 0")
        return self

    @property
    def has_kidney(self) -> bool:
        return bool((self.labels == 1).any() or (self.labels == 2).any())

    @property
    def has_tumor(self) -> bool:
        return bool((self.labels == 2).any())


@dataclass(frozen=True)
class PhantomConfig:
    side: int = 64
    angle_deg: float = 30.0          # pose angle ~ U(-a, a)
    scale_range: tuple = (0.6, 1.4)  # common scale, then per-axis jitter
    translate_frac: float = 0.2     # of the half-side, per axis
    kidney_count: tuple = (1, 2)
    kidney_size: tuple = (0.14, 0.22)  # semi-minor axis, normalized units
    tumor_frac: tuple = (0.45, 0.8)    # tumor radius as fraction of kidney minor
    tumor_prob: float = 0.8
    cavity_prob: float = 0.25
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.side not in (64, 128, 256, 512):
            raise ValueError(f"side must be one of 64/128/256/512, got {self.side}")
        for name, rng_ in (("scale_range", self.scale_range),
                           ("kidney_size", self.kidney_size),
                           ("tumor_frac", self.tumor_frac)):
            if rng_[0] > rng_[1]:
                raise ValueError(f"{name} is empty: {rng_}")
        if self.kidney_count[0] > self.kidney_count[1]:
            raise ValueError(f"kidney_count is empty: {self.kidney_count}")


def _ellipse(px, py, cx, cy, ax, ay, angle=0.0):
    """Boolean field: inside the rotated ellipse."""
    ca, sa = math.cos(angle), math.sin(angle)
    u = (px - cx) * ca + (py - cy) * sa
    v = -(px - cx) * sa + (py - cy) * ca
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def generate_phantom(cfg: PhantomConfig, index: int) -> Case:
    """Deterministic phantom: same (cfg, index) -> bit-identical case."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    # scene randomness is drawn in a fixed order; keep it that way
    angle = math.radians(rng.uniform(-cfg.angle_deg, cfg.angle_deg))
    s_common = rng.uniform(*cfg.scale_range)
    sx = float(np.clip(s_common * rng.uniform(0.9, 1.1), *cfg.scale_range))
    sy = float(np.clip(s_common * rng.uniform(0.9, 1.1), *cfg.scale_range))
    tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * 2.0
    ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * 2.0
    pose = geometry.SimilarityParams(angle, sx, sy, tx, ty)

    n_kid = int(rng.integers(cfg.kidney_count[0], cfg.kidney_count[1] + 1))
    spots = [(-0.32, 0.06), (0.30, 0.02)]
    rng.shuffle(spots)
    kidneys = []
    for i in range(n_kid):
        kcx, kcy = spots[i]
        kcx += rng.uniform(-0.04, 0.04)
        kcy += rng.uniform(-0.04, 0.04)
        kminor = rng.uniform(*cfg.kidney_size)
        kmajor = kminor * rng.uniform(1.4, 1.8)
        kang = rng.uniform(-0.5, 0.5)
        kidneys.append((kcx, kcy, kminor, kmajor, kang))
    tumor = None
    if kidneys and rng.random() < cfg.tumor_prob:
        kcx, kcy, kminor, kmajor, kang = kidneys[int(rng.integers(len(kidneys)))]
        # center drawn inside the kidney's inner half so the blob stays on it
        du = rng.uniform(-0.4, 0.4) * kminor
        dv = rng.uniform(-0.4, 0.4) * kmajor
        ca, sa = math.cos(kang), math.sin(kang)
        tcx = kcx + du * ca - dv * sa
        tcy = kcy + du * sa + dv * ca
        tr = rng.uniform(*cfg.tumor_frac) * kminor
        tumor = (tcx, tcy, tr)
    cavity = None
    if rng.random() < cfg.cavity_prob:
        cavity = (rng.uniform(-0.15, 0.15), rng.uniform(-0.25, 0.1),
                  rng.uniform(0.06, 0.12), rng.uniform(0.10, 0.18))

    # evaluate the canonical scene at inversely mapped pixel positions
    side = cfg.side
    pose_map = geometry.similarity_to_map(pose)
    inv = geometry.invert(pose_map)
    grid = geometry.affine_grid_np(inv, side, side)  # where each pixel looks
    px, py = grid[..., 0], grid[..., 1]

    ab_ax, ab_ay = 0.78, 0.60
    inside = _ellipse(px, py, 0.0, 0.0, ab_ax, ab_ay)
    r2 = (px / ab_ax) ** 2 + (py / ab_ay) ** 2
    image = np.where(inside, 0.45 + 0.4 * (1.0 - r2) + 0.05 * np.cos(3.0 * px) * np.cos(2.0 * py), 0.0)
    labels = np.zeros((side, side), dtype=np.uint8)
    for kcx, kcy, kminor, kmajor, kang in kidneys:
        kin = _ellipse(px, py, kcx, kcy, kminor, kmajor, kang) & inside
        image = np.where(kin, image + 0.25, image)
        labels[kin] = 1
    if tumor is not None:
        tcx, tcy, tr = tumor
        tin = _ellipse(px, py, tcx, tcy, tr, tr) & inside
        image = np.where(tin, image - 0.45, image)
        labels[tin] = 2
    if cavity is not None:
        ccx, ccy, cax, cay = cavity
        cin = _ellipse(px, py, ccx, ccy, cax, cay) & inside
        # carve the cavity to exact background level, but never through a kidney
        cin &= labels == 0
        image[cin] = 0.0
    mask = inside.astype(np.uint8)

    if cfg.noise > 0:
        image = image + rng.normal(0.0, cfg.noise, image.shape) * (image > 0)
    image = np.clip(image, 0.0, None).astype(np.float32)

    case = Case(
        id=f"phantom_{cfg.seed:04d}_{index:05d}",
        image=image, labels=labels, mask=mask, pixel_size=1.0,
        meta={
            "pose": {"angle": pose.angle, "scale_x": pose.scale_x,
                     "scale_y": pose.scale_y, "t_x": pose.t_x, "t_y": pose.t_y},
            "flags": {"has_kidney": bool(labels.max() >= 1), "has_tumor": bool((labels == 2).any())},
        },
    )
    return case.validate()


# -- persistence ---------------------------------------------------------------


def write_case(path, case: Case):
    case.validate()
    meta = {
        "id": case.id,
        "shape": list(case.image.shape),
        "pixel_size": case.pixel_size,
        **case.meta,
    }
    blob = json.dumps(meta).encode()
    with open(path, "wb") as f:
        f.write(CASE_MAGIC)
        f.write(struct.pack("<HI", CASE_VERSION, len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(case.image, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(case.labels, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(case.mask, dtype=np.uint8).tobytes())


def read_case(path) -> Case:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 10 or raw[:4] != CASE_MAGIC:
        raise ValueError(f"{path}: not a case file (bad magic at offset 0)")
    version, mlen = struct.unpack("<HI", raw[4:10])
    if version != CASE_VERSION:
        raise ValueError(f"{path}: unsupported case version {version}")
    if len(raw) < 10 + mlen:
        raise ValueError(f"{path}: truncated metadata at offset {len(raw)}")
    meta = json.loads(raw[10:10 + mlen].decode())
    h, w = meta.pop("shape")
    n = h * w
    need = 10 + mlen + n * 4 + 2 * n
    if len(raw) != need:
        raise ValueError(f"{path}: payload is {len(raw)} bytes, expected {need}"
                         f" (truncation at offset {min(len(raw), need)})")
    off = 10 + mlen
    image = np.frombuffer(raw[off:off + 4 * n], dtype="<f4").reshape(h, w).copy()
    off += 4 * n
    labels = np.frombuffer(raw[off:off + n], dtype=np.uint8).reshape(h, w).copy()
    off += n
    mask = np.frombuffer(raw[off:off + n], dtype=np.uint8).reshape(h, w).copy()
    case = Case(id=meta.pop("id"), image=image, labels=labels, mask=mask,
                pixel_size=float(meta.pop("pixel_size")), meta=meta)
    return case.validate()


# -- dataset index ----------------------------------------------------------------


@dataclass
class DatasetIndex:
    """Case ids with tissue flags and train/val/test assignment."""
    entries: list  # of dicts: {"id", "has_kidney", "has_tumor", "split"}

    def ids(self, split: str | None = None) -> list:
        return [e["id"] for e in self.entries if split is None or e["split"] == split]

    def entry(self, case_id: str) -> dict:
        for e in self.entries:
            if e["id"] == case_id:
                return e
        raise KeyError(case_id)

    def validate(self):
        seen = set()
        for e in self.entries:
            if e["id"] in seen:
                raise ValueError(f"duplicate case id {e['id']}")
            seen.add(e["id"])
            if e["split"] not in ("train", "val", "test"):
                raise ValueError(f"{e['id']}: unknown split {e['split']}")
        return self


SPLIT_FRACTIONS = {"train": 0.72, "val": 0.18, "test": 0.10}


def build_index(cases, seed: int = 0, fractions: dict = SPLIT_FRACTIONS) -> DatasetIndex:
    """Assign splits by shuffled proportion; flags come from the labels."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1CE]))
    order = list(range(len(cases)))
    rng.shuffle(order)
    n = len(cases)
    n_train = int(round(n * fractions["train"]))
    n_val = int(round(n * fractions["val"]))
    entries = []
    for rank, i in enumerate(order):
        split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        c = cases[i]
        entries.append({"id": c.id, "has_kidney": c.has_kidney,
                        "has_tumor": c.has_tumor, "split": split})
    entries.sort(key=lambda e: e["id"])
    return DatasetIndex(entries).validate()


def save_index(path, index: DatasetIndex):
    index.validate()
    with open(path, "w") as f:
        json.dump({"version": 1, "cases": index.entries}, f, indent=1)


def load_index(path) -> DatasetIndex:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != 1:
        raise ValueError(f"{path}: unsupported index version {doc.get('version')}")
    return DatasetIndex(doc["cases"]).validate()


def generate_dataset(cfg: PhantomConfig, count: int, out_dir,
                     fractions: dict = SPLIT_FRACTIONS) -> DatasetIndex:
    """Write `count` phantoms plus index.json into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(count):
        case = generate_phantom(cfg, i)
        write_case(out / f"{case.id}.wseg", case)
        cases.append(case)
    index = build_index(cases, seed=cfg.seed, fractions=fractions)
    save_index(out / "index.json", index)
    return index


def case_path(data_dir, case_id: str) -> Path:
    return Path(data_dir) / f"{case_id}.wseg"


# -- reference selection -----------------------------------------------------------


def pose_distance(meta_pose: dict) -> float:
    """L2 distance of stored pose parameters from the canonical pose."""
    return float(np.sqrt(
        meta_pose["angle"] ** 2
        + (meta_pose["scale_x"] - 1.0) ** 2
        + (meta_pose["scale_y"] - 1.0) ** 2
        + meta_pose["t_x"] ** 2
        + meta_pose["t_y"] ** 2))


def select_reference(cases, override_id: str | None = None) -> Case:
    """The case whose stored pose is closest to canonical.

    Cases without pose metadata (imported real data) require override_id.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("cannot select a reference from an empty case set")
    if override_id is not None:
        for c in cases:
            if c.id == override_id:
                return c
        raise KeyError(f"reference id {override_id} not in the case set")
    best, best_d = None, np.inf
    for c in cases:
        if "pose" not in c.meta:
            raise ValueError(f"case {c.id} lacks pose metadata; pass override_id")
        d = pose_distance(c.meta["pose"])
        if d < best_d:
            best, best_d = c, d
    return best


# -- oversampled batch stream --------------------------------------------------------


def oversampled_batches(index: DatasetIndex, batch_size: int, seed: int,
                        split: str = "train"):
    """One epoch of id-batches with guaranteed tissue representation.

    Every batch carries at least ceil(B/3) kidney-bearing and ceil(B/3)
    tumor-bearing ids; every id of the split appears in at least one
    batch.  Deterministic in (index, batch_size, seed).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    ids = index.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    flags = {e["id"]: (bool(e["has_kidney"]), bool(e["has_tumor"]))
             for e in index.entries}
    kidney_pool = [i for i in ids if flags[i][0]]
    tumor_pool = [i for i in ids if flags[i][1]]
    b = min(batch_size, len(ids))
    quota = math.ceil(b / 3)
    if not kidney_pool:
        raise ValueError("oversampling needs at least one kidney-bearing case")
    if not tumor_pool:
        raise ValueError("oversampling needs at least one tumor-bearing case")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4]))
    queue = list(ids)
    rng.shuffle(queue)
    guard = 0
    max_batches = 10 * (len(ids) // b + 2)

    def draw(pool, batch, count):
        fresh = [i for i in pool if i not in batch]
        if len(fresh) >= count:
            pick = rng.choice(len(fresh), size=count, replace=False)
            return [fresh[int(j)] for j in pick]
        # tiny pools: allow repeats rather than fail
        pick = rng.choice(len(pool), size=count, replace=True)
        return [pool[int(j)] for j in pick]

    while queue:
        guard += 1
        if guard > max_batches:
            raise ValueError(
                f"batch constraints unsatisfiable: batch size {b} leaves no room "
                f"for plain cases after {quota}+{quota} quota slots")
        batch = [queue.pop(0) for _ in range(min(b, len(queue)))]
        owed = [True] * len(batch)  # queue members still owed an appearance
        while len(batch) < b:
            batch.append(ids[int(rng.integers(len(ids)))])
            owed.append(False)
        for want_tumor in (True, False):
            have = sum(1 for i in batch if flags[i][1 if want_tumor else 0])
            deficit = quota - have
            if deficit <= 0:
                continue
            # evict the most expendable members: random fillers before queue
            # members (else a plain queue tail is evicted and re-queued
            # forever), plain before single-flag
            order = sorted(range(len(batch)),
                           key=lambda j: (owed[j],
                                          flags[batch[j]][0] + flags[batch[j]][1]))
            evict = [j for j in order if not flags[batch[j]][1 if want_tumor else 0]][:deficit]
            pool = tumor_pool if want_tumor else kidney_pool
            newcomers = draw(pool, batch, deficit)
            for j, new in zip(evict, newcomers):
                if owed[j]:
                    queue.append(batch[j])
                batch[j] = new
                owed[j] = False
        yield list(batch)
