"""Portable graymap/pixmap IO and contour overlays for qualitative review.

Binary P5 (PGM) and P6 (PPM) with maxval 255; `overlay` draws reference
contours in green/cyan and predicted contours in red/yellow over the
intensity image so reference and prediction are distinguishable per class.
"""

from __future__ import annotations

import numpy as np

OVERLAY_COLORS = {
    ("reference", 1): (0, 200, 0),      # kidney reference: green
    ("reference", 2): (0, 200, 200),    # tumor reference: cyan
    ("predicted", 1): (230, 30, 30),    # kidney prediction: red
    ("predicted", 2): (240, 220, 40),   # tumor prediction: yellow
}


def write_pgm(path, gray: np.ndarray):
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"need a uint8 [H,W] array, got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"need a uint8 [H,W,3] array, got {rgb.dtype} {rgb.shape}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read back a P5/P6 file written by this module; -> [H,W] or [H,W,3]."""
    with open(path, "rb") as f:
        raw = f.read()
    fields = raw.split(maxsplit=4)
    if len(fields) < 5 or fields[0] not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    channels = 1 if fields[0] == b"P5" else 3
    data = raw[len(raw) - h * w * channels:]
    arr = np.frombuffer(data, dtype=np.uint8)
    if arr.size != h * w * channels:
        raise ValueError(f"{path}: truncated pixel payload")
    return arr.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def to_gray8(image: np.ndarray) -> np.ndarray:
    """Min-max scale any real-valued image to uint8."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-12:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.clip((img - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)


def contour_mask(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels: set pixels with at least one 4-neighbour outside."""
    m = np.asarray(mask).astype(bool)
    inner = m.copy()
    inner[1:, :] &= m[:-1, :]
    inner[:-1, :] &= m[1:, :]
    inner[:, 1:] &= m[:, :-1]
    inner[:, :-1] &= m[:, 1:]
    # frame pixels of the mask are boundary by definition
    inner[0, :] = inner[-1, :] = False
    inner[:, 0] = inner[:, -1] = False
    return m & ~inner


def overlay(image: np.ndarray, reference: np.ndarray,
            predicted: np.ndarray) -> np.ndarray:
    """Prediction and reference contours over the intensity image -> RGB."""
    reference = np.asarray(reference)
    predicted = np.asarray(predicted)
    if image.shape != reference.shape or image.shape != predicted.shape:
        raise ValueError("image, reference and predicted shapes must match")
    rgb = np.repeat(to_gray8(image)[:, :, None], 3, axis=2)
    for (kind, cls), color in OVERLAY_COLORS.items():
        labels = reference if kind == "reference" else predicted
        edge = contour_mask(labels == cls)
        rgb[edge] = np.asarray(color, dtype=np.uint8)
    return rgb
