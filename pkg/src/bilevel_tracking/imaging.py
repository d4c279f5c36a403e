"""Synthetic test images and minimal image I/O (binary PGM and CSV matrices).

The synthetic generators stand in for external data: a piecewise-constant
ellipse phantom for the MRI experiment and a piecewise-smooth scene for the
deconvolution experiment, both with values in [0, 1].
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "synthetic_phantom",
    "synthetic_scene",
    "read_pgm",
    "write_pgm",
    "read_csv_image",
    "load_image",
    "crop_center",
]


def _ellipse(n1, n2, cy, cx, ry, rx, angle_deg):
    """Boolean mask of an ellipse in normalised [-1, 1]^2 coordinates."""
    yy, xx = np.meshgrid(np.linspace(-1, 1, n1), np.linspace(-1, 1, n2), indexing="ij")
    t = np.deg2rad(angle_deg)
    yr = (yy - cy) * np.cos(t) - (xx - cx) * np.sin(t)
    xr = (yy - cy) * np.sin(t) + (xx - cx) * np.cos(t)
    return (yr / ry) ** 2 + (xr / rx) ** 2 <= 1.0


def synthetic_phantom(n1: int, n2: int, variant: int = 0) -> np.ndarray:
    """Piecewise-constant head-phantom-like image in [0, 1].

    ``variant`` jitters the interior structures so a small training stack has
    distinct but similar members.
    """
    rng = np.random.default_rng(1000 + variant)
    img = np.zeros((n1, n2))
    img[_ellipse(n1, n2, 0.0, 0.0, 0.86, 0.72, 0.0)] = 0.85
    img[_ellipse(n1, n2, 0.0, 0.0, 0.78, 0.64, 0.0)] = 0.35
    for _ in range(4):
        cy, cx = rng.uniform(-0.35, 0.35, size=2)
        ry, rx = rng.uniform(0.08, 0.28, size=2)
        level = rng.uniform(0.15, 0.95)
        img[_ellipse(n1, n2, cy, cx, ry, rx, rng.uniform(0, 180))] = level
    img[_ellipse(n1, n2, 0.42, 0.0, 0.10, 0.16, 0.0)] = 0.05
    return np.clip(img, 0.0, 1.0)


def synthetic_scene(n1: int, n2: int) -> np.ndarray:
    """Piecewise-smooth scene with edges at many orientations, in [0, 1].

    Curved boundaries and oblique stripes matter here: identifying the
    edge-adjacent vs diagonal blur weights needs image gradients that are not
    all axis-aligned.
    """
    yy, xx = np.meshgrid(np.linspace(0, 1, n1), np.linspace(0, 1, n2), indexing="ij")
    img = 0.30 + 0.25 * xx + 0.1 * yy  # oblique background ramp
    img[_ellipse(n1, n2, -0.35, -0.3, 0.35, 0.25, 30.0)] = 0.92  # tilted ellipse
    img[_ellipse(n1, n2, 0.05, 0.45, 0.16, 0.16, 0.0)] = 0.12  # dark disc
    # 45-degree stripes in the lower-left quadrant
    stripes = (np.sin(10 * np.pi * (xx + yy)) > 0.4) & (yy > 0.55) & (xx < 0.5)
    img[stripes] = 0.80
    # steeper stripes crossing the other way
    stripes2 = (np.sin(7 * np.pi * (2 * xx - yy)) > 0.5) & (yy > 0.6) & (xx > 0.55)
    img[stripes2] = 0.20
    # wedge with non-axis-aligned straight edges
    wedge = (yy < 0.45) & (yy > 0.15) & (xx > 0.55 + 0.45 * (yy - 0.15)) & (xx < 0.98)
    img[wedge] = 0.65
    img[_ellipse(n1, n2, 0.55, -0.55, 0.1, 0.22, -40.0)] = 0.45
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PGM / CSV ingestion


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM image, 8- or 16-bit, rescaled to [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return raw.reshape(height, width).astype(float) / maxval


def write_pgm(path, img: np.ndarray, maxval: int = 255):
    """Write a [0, 1] image as binary 8-bit PGM."""
    arr = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    q = np.round(arr * maxval).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(q.tobytes())


def read_csv_image(path) -> np.ndarray:
    """Read a plain CSV matrix and rescale to [0, 1] if needed."""
    arr = np.loadtxt(path, delimiter=",", dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a 2-d matrix")
    lo, hi = arr.min(), arr.max()
    if lo < 0.0 or hi > 1.0:
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    return arr


def load_image(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".pgm"):
        return read_pgm(path)
    return read_csv_image(path)


def crop_center(img: np.ndarray, n1: int, n2: int) -> np.ndarray:
    if img.shape[0] < n1 or img.shape[1] < n2:
        raise ValueError(f"image {img.shape} smaller than requested crop {(n1, n2)}")
    r0 = (img.shape[0] - n1) // 2
    c0 = (img.shape[1] - n2) // 2
    return img[r0 : r0 + n1, c0 : c0 + n2]
