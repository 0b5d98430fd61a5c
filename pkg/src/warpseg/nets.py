"""The three networks: pose STN, crop STN, and a deep-supervised UNet.

A tiny module system (explicit registration via attribute assignment)
carries named parameters and running-stat buffers; state dicts are flat
name->array maps, which is also the checkpoint layout.

Initialization contracts that tests rely on:
- Both STN heads start with zero weights and a bias encoding the
  identity: angle 0, log-scales 0, translations 0 for the pose net, the
  full-image box (-1,-1,1,1) for the crop net.  A fresh pipeline is
  therefore an exact no-op around the UNet.
- Raw scales pass through exp (positive, 0 -> 1); raw box coordinates
  pass through a clamp to [-1,1] whose gradient is 1 on the closed
  interval, so the full-image init still learns.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import geometry
from .autodiff import Tensor
from .autodiff import ops

CHECKPOINT_MAGIC = b"WNET"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Non-finite activations or losses during training."""


def ensure_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.isfinite(arr).sum())
        raise DivergenceError(f"{name} has {bad} non-finite values (shape {arr.shape})")


# -- module system -------------------------------------------------------------


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def add_param(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(np.ascontiguousarray(arr), requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, arr: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(arr)
        self._buffers[name] = arr
        return arr

    def named_parameters(self, prefix: str = ""):
        for n, t in self._params.items():
            yield prefix + n, t
        for mn, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{mn}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for n, b in self._buffers.items():
            yield prefix + n, b
        for mn, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{mn}.")

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict:
        out = {n: t.data.copy() for n, t in self.named_parameters()}
        out.update({n: b.copy() for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict):
        mine = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(mine) | set(bufs)) - set(state)
        extra = set(state) - (set(mine) | set(bufs))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, t in mine.items():
            if t.data.shape != state[n].shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {t.data.shape}")
            t.data = np.ascontiguousarray(state[n], dtype=t.data.dtype)
        for n, b in bufs.items():
            if b.shape != state[n].shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {b.shape}")
            b[...] = state[n]

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        self.stride, self.pad = stride, pad
        rng = rng or np.random.default_rng()
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = self.add_param("w", rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype))
        self.b = self.add_param("b", np.zeros(cout, dtype=dtype))

    def forward(self, x):
        return ops.conv2d(x, self.w, self.b, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 2, stride: int = 2,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        self.stride = stride
        rng = rng or np.random.default_rng()
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = self.add_param("w", rng.normal(0.0, std, (cin, cout, k, k)).astype(dtype))
        self.b = self.add_param("b", np.zeros(cout, dtype=dtype))

    def forward(self, x):
        return ops.conv_transpose2d(x, self.w, self.b, self.stride)


class BatchNorm2d(Module):
    def __init__(self, c: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = self.add_param("gamma", np.ones(c, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(c, dtype=dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(c, dtype=dtype))

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                               self.running_var, self.training, self.eps, self.momentum)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        std = np.sqrt(2.0 / din)
        self.w = self.add_param("w", rng.normal(0.0, std, (dout, din)).astype(dtype))
        self.b = self.add_param("b", np.zeros(dout, dtype=dtype))

    def forward(self, x):
        return ops.linear(x, self.w, self.b)


# -- localization networks -----------------------------------------------------


class LocalizationNet(Module):
    """Two conv blocks with pooling (spatial /4), then two dense layers.

    The head starts at zero weights with a caller-supplied bias so the
    initial regression is a constant of the caller's choosing.
    """

    def __init__(self, in_ch: int, out_dim: int, side: int, head_bias,
                 rng: np.random.Generator, widths=(8, 16), hidden: int = 64,
                 dtype=np.float32):
        super().__init__()
        if side % 4 != 0:
            raise ValueError(f"input side {side} must be divisible by 4")
        self.side = side
        w1, w2 = widths
        self.conv1 = Conv2d(in_ch, w1, 3, 1, 1, rng, dtype)
        self.bn1 = BatchNorm2d(w1, dtype)
        self.conv2 = Conv2d(w1, w2, 3, 1, 1, rng, dtype)
        self.bn2 = BatchNorm2d(w2, dtype)
        flat = w2 * (side // 4) ** 2
        self.fc = Linear(flat, hidden, rng, dtype)
        self.head = Linear(hidden, out_dim, rng, dtype)
        self.head.w.data[...] = 0.0
        self.head.b.data[...] = np.asarray(head_bias, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = ops.maxpool2d(ops.relu(self.bn1(self.conv1(x))), 2, 2)
        h = ops.maxpool2d(ops.relu(self.bn2(self.conv2(h))), 2, 2)
        h = h.reshape(h.shape[0], -1)
        h = ops.relu(self.fc(h))
        return self.head(h)


ANGLE_BOUND = math.pi
LOG_SCALE_BOUND = math.log(4.0)
SHIFT_BOUND = 1.5


def _bounded(col: Tensor, bound: float) -> Tensor:
    """Smooth saturation to (-bound, bound); exact zero stays zero."""
    return ops.tanh(col * (1.0 / bound)) * bound


class PoseSTN(Module):
    """Regresses 5 similarity parameters and warps image and mask.

    The raw head outputs saturate smoothly (angle within a half turn,
    scales within [1/4, 4], shifts within 1.5 frame halves) so a bad
    optimization step can never warp the scene fully out of view, which
    would zero the gradient and kill training for good.
    """

    def __init__(self, side: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.side = side
        self.loc = LocalizationNet(2, 5, side, np.zeros(5), rng, dtype=dtype)

    def forward(self, x: Tensor):
        """x: [N,2,S,S] image+mask -> (theta [N,2,3], warped image, warped mask)."""
        raw = self.loc(x)
        ensure_finite("pose regression", raw.data)
        angle = _bounded(ops.column(raw, 0), ANGLE_BOUND)
        sx = ops.exp(_bounded(ops.column(raw, 1), LOG_SCALE_BOUND))
        sy = ops.exp(_bounded(ops.column(raw, 2), LOG_SCALE_BOUND))
        tx = _bounded(ops.column(raw, 3), SHIFT_BOUND)
        ty = _bounded(ops.column(raw, 4), SHIFT_BOUND)
        theta = geometry.similarity_to_theta(angle, sx, sy, tx, ty)
        grid = ops.affine_grid(theta, self.side, self.side)
        img = ops.channel(x, 0).reshape(-1, 1, self.side, self.side)
        mask = ops.channel(x, 1).reshape(-1, 1, self.side, self.side)
        return theta, ops.bilinear_sample(img, grid), ops.bilinear_sample(mask, grid)


BOX_SLACK = 0.25
BOX_LEAK = 0.01


def _soft_frame_limit(x: Tensor, slack: float = BOX_SLACK,
                      leak: float = BOX_LEAK) -> Tensor:
    """Identity on [-1,1], soft saturation toward ±(1+slack) beyond.

    A hard clip here would zero the gradient of any corner pushed past
    the frame by one optimizer step; at the full-frame starting box that
    freezes the whole head permanently.  The tanh tail alone is not
    enough either: a large overshoot saturates it to exactly 1.0 in
    float32 and the gradient underflows to zero, which is just the hard
    clip's failure again.  The linear leak keeps the tail's derivative
    at least `leak` no matter how far a corner flies, so the head can
    always be pulled back.
    """
    hard = ops.clip(x, -1.0, 1.0)
    over = x - hard
    return hard + ops.tanh(over * (1.0 / slack)) * slack + over * leak


class CropSTN(Module):
    """Regresses a square ROI box and crops it to a patch."""

    def __init__(self, side: int, rng: np.random.Generator, dtype=np.float32,
                 min_side: float = 0.5):
        super().__init__()
        self.side = side
        self.min_side = min_side
        self.loc = LocalizationNet(1, 4, side, np.array([-1.0, -1.0, 1.0, 1.0]),
                                   rng, dtype=dtype)

    def forward(self, h: Tensor, patch: int):
        """h: [N,1,S,S] -> (theta2 [N,2,3], crop [N,1,patch,patch], box [N,4])."""
        raw = self.loc(h)
        ensure_finite("box regression", raw.data)
        raw = _soft_frame_limit(raw)
        x0, y0 = ops.column(raw, 0), ops.column(raw, 1)
        x1, y1 = ops.column(raw, 2), ops.column(raw, 3)
        x0, y0, x1, y1 = geometry.enforce_square_min_t(x0, y0, x1, y1, self.min_side)
        theta2 = geometry.bbox_to_theta(x0, y0, x1, y1)
        grid = ops.affine_grid(theta2, patch, patch)
        crop = ops.bilinear_sample(h, grid)
        return theta2, crop, ops.stack1([x0, y0, x1, y1])


# -- UNet ------------------------------------------------------------------------


@dataclass(frozen=True)
class UNetSpec:
    side: int
    f0: int = 32
    classes: int = 3
    bottleneck: int = 8
    skip_min: int = 32
    cap: int = 512

    def __post_init__(self):
        if self.side < 2 * self.bottleneck:
            raise ValueError(f"side {self.side} too small for a {self.bottleneck} bottleneck")
        d = np.log2(self.side / self.bottleneck)
        if d != int(d):
            raise ValueError(f"side {self.side} is not a power-of-two multiple of {self.bottleneck}")

    @property
    def depth(self) -> int:
        """Number of downsamplings from side to the bottleneck."""
        return int(np.log2(self.side // self.bottleneck))

    def channels(self, level: int) -> int:
        """Feature count at encoder level `level` (size side / 2^level)."""
        return min(self.f0 * 2 ** level, self.cap)

    def level_sizes(self) -> list:
        return [self.side // 2 ** i for i in range(self.depth + 1)]

    def supervised_levels(self) -> list:
        """Decoder levels (0 = full crop size) that carry a loss head.

        Level 0 is the network output and always has one; deeper levels
        join while their size stays >= skip_min.
        """
        return [i for i in range(self.depth)
                if i == 0 or self.side // 2 ** i >= self.skip_min]

    def to_dict(self) -> dict:
        return {"side": self.side, "f0": self.f0, "classes": self.classes,
                "bottleneck": self.bottleneck, "skip_min": self.skip_min, "cap": self.cap}


class _EncoderLevel(Module):
    def __init__(self, cin, cmid, cdown, rng, dtype):
        super().__init__()
        self.conv_a = Conv2d(cin, cmid, 3, 1, 1, rng, dtype)
        self.bn_a = BatchNorm2d(cmid, dtype)
        self.conv_b = Conv2d(cmid, cdown, 3, 2, 1, rng, dtype)
        self.bn_b = BatchNorm2d(cdown, dtype)

    def forward(self, x):
        skip = ops.relu(self.bn_a(self.conv_a(x)))
        down = ops.relu(self.bn_b(self.conv_b(skip)))
        return skip, down


class _DecoderLevel(Module):
    def __init__(self, cin, cout, has_skip, rng, dtype):
        super().__init__()
        self.has_skip = has_skip
        self.up = ConvTranspose2d(cin, cout, 2, 2, rng, dtype)
        self.bn_up = BatchNorm2d(cout, dtype)
        merged = cout * 2 if has_skip else cout
        self.conv = Conv2d(merged, cout, 3, 1, 1, rng, dtype)
        self.bn = BatchNorm2d(cout, dtype)

    def forward(self, x, skip):
        h = ops.relu(self.bn_up(self.up(x)))
        if self.has_skip:
            h = ops.concat([h, skip], axis=1)
        return ops.relu(self.bn(self.conv(h)))


class UNet(Module):
    """Encoder to an 8x8 bottleneck, decoder with skips at sizes >= 32,
    softmax heads (1x1 conv) at every skip-bearing decoder level."""

    def __init__(self, spec: UNetSpec, rng: np.random.Generator, dtype=np.float32,
                 in_ch: int = 1):
        super().__init__()
        self.spec = spec
        d = spec.depth
        self.encoders = []
        cin = in_ch
        for i in range(d):
            enc = _EncoderLevel(cin, spec.channels(i), spec.channels(i + 1), rng, dtype)
            setattr(self, f"enc{i}", enc)
            self.encoders.append(enc)
            cin = spec.channels(i + 1)
        cb = spec.channels(d)
        self.bott_conv1 = Conv2d(cb, cb, 3, 1, 1, rng, dtype)
        self.bott_bn1 = BatchNorm2d(cb, dtype)
        self.bott_conv2 = Conv2d(cb, cb, 3, 1, 1, rng, dtype)
        self.bott_bn2 = BatchNorm2d(cb, dtype)
        self.decoders = []
        sizes = spec.level_sizes()
        for i in reversed(range(d)):
            dec = _DecoderLevel(spec.channels(i + 1), spec.channels(i),
                                sizes[i] >= spec.skip_min, rng, dtype)
            setattr(self, f"dec{i}", dec)
            self.decoders.append(dec)
        self.heads = []
        for i in spec.supervised_levels():
            head = Conv2d(spec.channels(i), spec.classes, 1, 1, 0, rng, dtype)
            setattr(self, f"head{i}", head)
            self.heads.append((i, head))

    def forward(self, x: Tensor):
        """[N,in,P,P] -> softmax predictions, full resolution first."""
        if x.shape[2] != self.spec.side or x.shape[3] != self.spec.side:
            raise ValueError(f"expected {self.spec.side}^2 input, got {x.shape}")
        skips = []
        h = x
        for enc in self.encoders:
            skip, h = enc(h)
            skips.append(skip)
        h = ops.relu(self.bott_bn1(self.bott_conv1(h)))
        h = ops.relu(self.bott_bn2(self.bott_conv2(h)))
        feats = {}
        for dec, i in zip(self.decoders, reversed(range(len(self.encoders)))):
            h = dec(h, skips[i])
            feats[i] = h
        preds = []
        for i, head in self.heads:
            preds.append(ops.softmax_channels(head(feats[i])))
        return preds


def unet_parameter_count(spec: UNetSpec, in_ch: int = 1) -> int:
    """Closed-form trainable parameter count of UNet(spec).

    conv k: cout*cin*k^2 + cout; bn: 2c; transposed conv: as conv.
    """
    total = 0

    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    def bn(c):
        return 2 * c

    cin = in_ch
    d = spec.depth
    for i in range(d):
        cmid, cdown = spec.channels(i), spec.channels(i + 1)
        total += conv(cin, cmid, 3) + bn(cmid) + conv(cmid, cdown, 3) + bn(cdown)
        cin = cdown
    cb = spec.channels(d)
    total += 2 * (conv(cb, cb, 3) + bn(cb))
    sizes = spec.level_sizes()
    for i in range(d):
        cout = spec.channels(i)
        cup = spec.channels(i + 1)
        total += conv(cup, cout, 2) + bn(cout)
        merged = cout * 2 if sizes[i] >= spec.skip_min else cout
        total += conv(merged, cout, 3) + bn(cout)
    for i in spec.supervised_levels():
        total += conv(spec.channels(i), spec.classes, 1)
    return total


def localization_parameter_count(in_ch: int, out_dim: int, side: int,
                                 widths=(8, 16), hidden: int = 64) -> int:
    w1, w2 = widths
    total = w1 * in_ch * 9 + w1 + 2 * w1
    total += w2 * w1 * 9 + w2 + 2 * w2
    flat = w2 * (side // 4) ** 2
    total += hidden * flat + hidden
    total += out_dim * hidden + out_dim
    return total


# -- factories -------------------------------------------------------------------


def build_pose_stn(side: int, seed: int = 0, dtype=np.float32) -> PoseSTN:
    return PoseSTN(side, np.random.default_rng(np.random.SeedSequence([seed, 1])), dtype)


def build_crop_stn(side: int, seed: int = 0, dtype=np.float32,
                   min_side: float = 0.5) -> CropSTN:
    return CropSTN(side, np.random.default_rng(np.random.SeedSequence([seed, 2])),
                   dtype, min_side)


def build_unet(spec: UNetSpec, seed: int = 0, dtype=np.float32) -> UNet:
    return UNet(spec, np.random.default_rng(np.random.SeedSequence([seed, 3])), dtype)


# -- checkpoint format -----------------------------------------------------------
#
# Layout (little-endian throughout):
#   bytes 0-3   magic "WNET"
#   bytes 4-5   format version (u16)
#   bytes 6-9   header length L (u32)
#   L bytes     JSON header: {"kind": str, "spec": {...},
#                "arrays": [{"name": str, "shape": [...], "dtype": "<f4"|"<f8"}]}
#   then each array's raw bytes, C order, in listed order.


def save_checkpoint(path, kind: str, spec: dict, state: dict):
    arrays = []
    blobs = []
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        if arr.dtype == np.float32:
            dt = "<f4"
        elif arr.dtype == np.float64:
            dt = "<f8"
        else:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        arrays.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        blobs.append(arr.astype(dt).tobytes())
    header = json.dumps({"kind": kind, "spec": spec, "arrays": arrays}).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def net_from_checkpoint(path):
    """Rebuild a network from a checkpoint file; -> (kind, net)."""
    kind, spec, state = load_checkpoint(path)
    if kind == "stn1":
        net = build_pose_stn(int(spec["side"]))
    elif kind == "stn2":
        net = build_crop_stn(int(spec["side"]), min_side=spec.get("min_side", 0.5))
    elif kind == "unet":
        net = build_unet(UNetSpec(**spec))
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
    net.load_state_dict(state)
    return kind, net


def load_checkpoint(path):
    """-> (kind, spec dict, name->array state dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 10 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 10 + hlen:
        raise ValueError(f"{path}: truncated header at offset {len(raw)}")
    header = json.loads(raw[10:10 + hlen].decode())
    state = {}
    off = 10 + hlen
    for meta in header["arrays"]:
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        nbytes = count * dt.itemsize
        if len(raw) < off + nbytes:
            raise ValueError(f"{path}: truncated payload at offset {off}")
        state[meta["name"]] = np.frombuffer(
            raw[off:off + nbytes], dtype=dt).reshape(meta["shape"]).copy()
        off += nbytes
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    return header["kind"], header["spec"], state
