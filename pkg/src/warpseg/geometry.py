"""2D affine maps over normalized coordinates and differentiable warping.

Conventions, fixed once and relied on everywhere:

- Coordinates live in [-1, 1]^2 with corner alignment: pixel (0, 0) sits
  at (-1, -1), pixel (W-1, H-1) at (1, 1).  The identity warp is exact.
- Maps act by pull-back: sample(I, m)(g) = I(m @ g).  Consequently
  sample(sample(I, a), b) == sample(I, compose(a, b)) with
  compose(a, b) = a @ b (b hits the grid point first).
- Restoring a crop-frame prediction to the original frame therefore
  samples through compose(invert(theta2), invert(theta1)).

The module has two faces: plain numpy (dataset generation, evaluation)
and Tensor functions (graph-recorded, used inside the networks).  Tests
pin them against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .autodiff import Tensor
from .autodiff import ops

DET_EPS = 1e-8


class SingularMapError(ValueError):
    """Linear part of an affine map is not invertible."""


@dataclass(frozen=True)
class SimilarityParams:
    """angle (radians), per-axis scales, translation in normalized units."""
    angle: float = 0.0
    scale_x: float = 1.0
    scale_y: float = 1.0
    t_x: float = 0.0
    t_y: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([self.angle, self.scale_x, self.scale_y, self.t_x, self.t_y])


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box corners in normalized coordinates."""
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)


class AffineMap2D:
    """2x3 matrix acting on homogeneous normalized coordinates."""

    __slots__ = ("m",)

    def __init__(self, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine map must be 2x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine map has non-finite entries")
        self.m = m

    @staticmethod
    def identity() -> "AffineMap2D":
        return AffineMap2D(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    def as3(self) -> np.ndarray:
        return np.vstack([self.m, [0.0, 0.0, 1.0]])

    def det(self) -> float:
        return float(self.m[0, 0] * self.m[1, 1] - self.m[0, 1] * self.m[1, 0])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform points [..., 2] -> [..., 2]."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.m[:, :2].T + self.m[:, 2]

    def __repr__(self):
        return f"AffineMap2D({self.m.tolist()})"


def similarity_to_map(p: SimilarityParams) -> AffineMap2D:
    """Rotation-then-scale factorization of the 5 similarity parameters."""
    vec = p.as_vector()
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"non-finite similarity parameters: {vec}")
    if p.scale_x <= 0 or p.scale_y <= 0:
        raise ValueError(f"scales must be positive, got {p.scale_x}, {p.scale_y}")
    c, s = np.cos(p.angle), np.sin(p.angle)
    return AffineMap2D([[p.scale_x * c, -p.scale_y * s, p.t_x],
                        [p.scale_x * s, p.scale_y * c, p.t_y]])


def invert(mp: AffineMap2D) -> AffineMap2D:
    if abs(mp.det()) <= DET_EPS:
        raise SingularMapError(f"map is singular (|det| = {abs(mp.det()):.2e})")
    a = np.linalg.inv(mp.as3())
    return AffineMap2D(a[:2])


def compose(a: AffineMap2D, b: AffineMap2D) -> AffineMap2D:
    """a @ b: sampling through the result applies b to the grid first."""
    return AffineMap2D((a.as3() @ b.as3())[:2])


def restore_map(theta1: AffineMap2D, theta2: AffineMap2D) -> AffineMap2D:
    """Crop frame back to the original frame: theta2^-1 then theta1^-1."""
    return compose(invert(theta2), invert(theta1))


# -- bounding boxes ------------------------------------------------------------


def enforce_square_min(b: BBox, min_side: float = 0.5) -> BBox:
    """Square the box at max(width, height, min_side), keep the center,
    then shift it inward so it lies inside [-1, 1]^2 whenever it fits.

    Repairs any raw box (even inverted corners: a non-positive extent is
    simply overridden by min_side).  A box wider than the frame cannot
    fit; it is centered on the frame instead.  Idempotent.
    """
    side = max(b.width, b.height, min_side)
    cx, cy = b.center
    half = side / 2.0
    room = max(1.0 - half, 0.0)
    cx = min(max(cx, -room), room)
    cy = min(max(cy, -room), room)
    return BBox(cx - half, cy - half, cx + half, cy + half)


def bbox_to_crop_map(b: BBox) -> AffineMap2D:
    """Scaling+translation map whose sampling fills the grid with the box."""
    if not (b.x0 < b.x1 and b.y0 < b.y1):
        raise ValueError(f"degenerate box {b}")
    sx = b.width / 2.0
    sy = b.height / 2.0
    if abs(sx - sy) > 1e-9:
        raise ValueError(f"box must be square, got extents {b.width} x {b.height}")
    cx, cy = b.center
    return AffineMap2D([[sx, 0.0, cx], [0.0, sx, cy]])


# -- numpy grids and warps -------------------------------------------------------


def affine_grid_np(mp: AffineMap2D, out_h: int, out_w: int) -> np.ndarray:
    """[out_h, out_w, 2] sampling positions; last axis is (x, y)."""
    if out_h < 2 or out_w < 2:
        raise ValueError("grid needs at least 2 points per axis")
    xs = np.linspace(-1.0, 1.0, out_w)
    ys = np.linspace(-1.0, 1.0, out_h)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx, gy], axis=-1)
    return mp.apply(pts)


def grid_to_pixels(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Normalized grid [..., 2] -> pixel coordinates (x, y), float64."""
    g = np.asarray(grid, dtype=np.float64)
    px = (g[..., 0] + 1.0) * 0.5 * (w - 1)
    py = (g[..., 1] + 1.0) * 0.5 * (h - 1)
    return np.stack([px, py], axis=-1)


def warp_image_np(img: np.ndarray, mp: AffineMap2D, out_h: int, out_w: int,
                  mode: str = "bilinear", fill: float = 0.0) -> np.ndarray:
    """Warp a [H,W] or [C,H,W] array through mp (pull-back sampling)."""
    arr = np.asarray(img)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    c, h, w = arr.shape
    grid = affine_grid_np(mp, out_h, out_w)
    if mode == "bilinear":
        x = arr[None].astype(np.float64)
        if fill != 0.0:
            x = x - fill
        out = K.bilinear_forward(np.ascontiguousarray(x), grid[None])[0]
        if fill != 0.0:
            out = out + fill
        out = out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)
    elif mode == "nearest":
        px = grid_to_pixels(grid, h, w)
        ix = np.rint(px[..., 0]).astype(np.int64)
        iy = np.rint(px[..., 1]).astype(np.int64)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        ix = np.clip(ix, 0, w - 1)
        iy = np.clip(iy, 0, h - 1)
        out = arr[:, iy, ix]
        out = np.where(inside[None], out, np.asarray(fill, dtype=arr.dtype))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out[0] if squeeze else out


def resize_np(img: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear",
              fill: float = 0.0) -> np.ndarray:
    """Corner-aligned resize through the identity map."""
    return warp_image_np(img, AffineMap2D.identity(), out_h, out_w, mode, fill)


# -- Tensor (graph) variants -----------------------------------------------------


def affine_grid(theta, out_h: int, out_w: int) -> Tensor:
    """Differentiable grid from a [2,3] / [N,2,3] tensor or an AffineMap2D."""
    if isinstance(theta, AffineMap2D):
        theta = Tensor(theta.m)
    return ops.affine_grid(theta, out_h, out_w)


def bilinear_sample(image, grid) -> Tensor:
    """Differentiable pull-back sampling; see ops.bilinear_sample."""
    return ops.bilinear_sample(image, grid)


def warp_tensor(image: Tensor, mp: AffineMap2D, out_h: int, out_w: int) -> Tensor:
    """Warp through a fixed (non-learned) map inside the graph."""
    grid = ops.affine_grid(Tensor(mp.m.astype(image.dtype)), out_h, out_w)
    return ops.bilinear_sample(image, grid)


def similarity_to_theta(angle: Tensor, scale_x: Tensor, scale_y: Tensor,
                        t_x: Tensor, t_y: Tensor) -> Tensor:
    """Batched differentiable similarity_to_map: five [N] -> [N,2,3]."""
    c = ops.cos(angle)
    s = ops.sin(angle)
    rows = ops.stack1([scale_x * c, -1.0 * (scale_y * s), t_x,
                       scale_x * s, scale_y * c, t_y])
    return rows.reshape(-1, 2, 3)


def enforce_square_min_t(x0: Tensor, y0: Tensor, x1: Tensor, y1: Tensor,
                         min_side: float = 0.5):
    """Tensor version of enforce_square_min over a batch of raw boxes.

    The side is deliberately left uncapped: clamping it to the frame
    width would route the gradient of an overshooting box into a
    constant and freeze the upstream regressor.  An over-wide box keeps
    a live scale gradient and gets pulled back by the loss.
    """
    n = x0.shape[0]
    side = ops.maximum(ops.maximum(x1 - x0, y1 - y0),
                       Tensor(np.full(n, min_side, dtype=x0.dtype)))
    half = side * 0.5
    cx = (x0 + x1) * 0.5
    cy = (y0 + y1) * 0.5
    # shift inward: clamp each center into +-(1 - half), an empty window
    # (center pinned to 0) once the box is wider than the frame
    room = ops.relu(half * -1.0 + 1.0)
    cx = ops.maximum(ops.minimum(cx, room), room * -1.0)
    cy = ops.maximum(ops.minimum(cy, room), room * -1.0)
    return cx - half, cy - half, cx + half, cy + half


def bbox_to_theta(x0: Tensor, y0: Tensor, x1: Tensor, y1: Tensor) -> Tensor:
    """Batched differentiable bbox_to_crop_map: four [N] -> [N,2,3]."""
    n = x0.shape[0]
    s = (x1 - x0) * 0.5
    cx = (x0 + x1) * 0.5
    cy = (y0 + y1) * 0.5
    zero = Tensor(np.zeros(n, dtype=x0.dtype))
    rows = ops.stack1([s, zero, cx, zero, s, cy])
    return rows.reshape(-1, 2, 3)
