"""Annotations, part sticks, sliding-window labels, cropping and augmentation.

Coordinates: joints are ``(x, y)`` normalized to the bounding box, so
``(0, 0)`` is the top-left corner and ``(1, 1)`` the bottom-right. Window
labels are computed in the pixel frame of the 112x112 crop regardless of the
resolution the image is stored at.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, InvalidShapeError

JOINT_NAMES = ("nose", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist")
PART_NAMES = ("head", "l_shoulder", "r_shoulder", "l_upper_arm", "r_upper_arm", "l_lower_arm", "r_lower_arm")
PART_JOINTS = np.array([(0, 1), (1, 2), (1, 3), (2, 4), (3, 5), (4, 6), (5, 7)])
# index maps applied when the image is mirrored horizontally
JOINT_MIRROR = np.array([0, 1, 3, 2, 5, 4, 7, 6])
PART_MIRROR = np.array([0, 2, 1, 4, 3, 6, 5])

BETA = 0.3
CROP = 112
SOURCE = 128


@dataclass(frozen=True)
class WindowGrid:
    """``per_axis**2`` square windows spread evenly over a ``crop``-pixel box.

    Window ``l = j * per_axis + i`` has top-left corner
    ``(i * step, j * step)`` with ``step = (crop - side) / (per_axis - 1)``.
    """
    crop: float = CROP
    side: float = 30.0
    per_axis: int = 8

    @property
    def step(self) -> float:
        return (self.crop - self.side) / (self.per_axis - 1)

    @property
    def count(self) -> int:
        return self.per_axis * self.per_axis

    @property
    def windows(self) -> np.ndarray:
        """(count, 4) array of ``(x0, y0, x1, y1)``."""
        k = np.arange(self.per_axis) * self.step
        x0 = np.tile(k, self.per_axis)
        y0 = np.repeat(k, self.per_axis)
        return np.stack([x0, y0, x0 + self.side, y0 + self.side], axis=1)


DEFAULT_GRID = WindowGrid()


def sticks_from_joints(joints) -> np.ndarray:
    """(..., 8, 2) joints -> (..., 7, 2, 2) stick endpoints."""
    joints = np.asarray(joints, dtype=float)
    if joints.shape[-2:] != (len(JOINT_NAMES), 2):
        raise InvalidShapeError(f"joints must end in (8, 2), got {joints.shape}")
    return joints[..., PART_JOINTS, :]


def clipped_lengths(a, b, windows) -> np.ndarray:
    """Length of segment ``a -> b`` inside closed rectangles, vectorized.

    Liang-Barsky parametric clipping; arguments broadcast, with points ending
    in 2 and windows ending in 4 (``x0, y0, x1, y1``).
    """
    a, b, windows = np.asarray(a, float), np.asarray(b, float), np.asarray(windows, float)
    dx = b[..., 0] - a[..., 0]
    dy = b[..., 1] - a[..., 1]
    ps = (-dx, dx, -dy, dy)
    qs = (a[..., 0] - windows[..., 0], windows[..., 2] - a[..., 0],
          a[..., 1] - windows[..., 1], windows[..., 3] - a[..., 1])
    shape = np.broadcast_shapes(dx.shape, windows.shape[:-1])
    u0 = np.zeros(shape)
    u1 = np.ones(shape)
    outside = np.zeros(shape, dtype=bool)
    for p, q in zip(ps, qs):
        p, q = np.broadcast_to(p, shape), np.broadcast_to(q, shape)
        parallel = p == 0
        outside |= parallel & (q < 0)
        r = q / np.where(parallel, 1.0, p)
        u0 = np.where(p < 0, np.maximum(u0, r), u0)
        u1 = np.where(p > 0, np.minimum(u1, r), u1)
    frac = np.where(outside, 0.0, np.clip(u1 - u0, 0.0, None))
    return frac * np.hypot(dx, dy)


def clip_segment_to_window(a, b, window) -> float:
    return float(clipped_lengths(a, b, window))


def indicator_map(sticks_px, grid: WindowGrid = DEFAULT_GRID, beta: float = BETA) -> np.ndarray:
    """Binary (..., parts, windows) labels: 1 where more than ``beta`` of a stick is inside.

    ``sticks_px`` are in the crop's pixel frame. Zero-length sticks never fire.
    """
    sticks_px = np.asarray(sticks_px, float)
    a = sticks_px[..., :, None, 0, :]
    b = sticks_px[..., :, None, 1, :]
    inside = clipped_lengths(a, b, grid.windows)
    d = sticks_px[..., 1, :] - sticks_px[..., 0, :]
    total = np.hypot(d[..., 0], d[..., 1])
    return (inside > beta * total[..., None]).astype(np.uint8)


def indicators_from_joints(joints, grid: WindowGrid = DEFAULT_GRID, beta: float = BETA) -> np.ndarray:
    return indicator_map(sticks_from_joints(joints) * grid.crop, grid, beta)


@dataclass
class AnnotatedSample:
    image: np.ndarray                   # (3, S, S) in [0, 1]
    joints: np.ndarray                  # (8, 2) normalized
    normalizer: np.ndarray | None = None  # (2, 2): l_hip, r_shoulder
    indicators: np.ndarray | None = field(default=None, repr=False)
    name: str = ""

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=float)
        if self.joints.shape != (len(JOINT_NAMES), 2):
            raise InvalidShapeError(f"joints must be (8, 2), got {self.joints.shape}")
        if self.normalizer is not None:
            self.normalizer = np.asarray(self.normalizer, dtype=float).reshape(2, 2)
        if self.indicators is None:
            self.indicators = indicators_from_joints(self.joints)

    @property
    def sticks(self) -> np.ndarray:
        return sticks_from_joints(self.joints)


def crop_and_resize(image, bbox, out_size: int = SOURCE, joints_px=None):
    """Bilinear resample of ``bbox = (x0, y0, x1, y1)`` to ``out_size`` squared.

    Pixel ``i`` covers ``[i, i + 1)``; reads outside the image clamp to the
    border. With ``joints_px`` (pixel coordinates in the source) the joints are
    returned normalized to the crop as a second value.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise InvalidShapeError(f"image must be (C, H, W), got {image.shape}")
    _, h, w = image.shape
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if not (x1 > x0 and y1 > y0):
        raise InvalidArgumentError(f"degenerate bounding box {bbox}")
    if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        raise InvalidArgumentError(f"bounding box {bbox} does not intersect the {w}x{h} image")
    u = np.arange(out_size) + 0.5
    xs = x0 + u * ((x1 - x0) / out_size) - 0.5
    ys = y0 + u * ((y1 - y0) / out_size) - 0.5
    xf, yf = np.floor(xs), np.floor(ys)
    fx, fy = xs - xf, ys - yf
    xa = np.clip(xf.astype(int), 0, w - 1)
    xb = np.clip(xf.astype(int) + 1, 0, w - 1)
    ya = np.clip(yf.astype(int), 0, h - 1)
    yb = np.clip(yf.astype(int) + 1, 0, h - 1)
    top = image[:, ya][:, :, xa] * (1 - fx) + image[:, ya][:, :, xb] * fx
    bot = image[:, yb][:, :, xa] * (1 - fx) + image[:, yb][:, :, xb] * fx
    out = (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(image.dtype, copy=False)
    if joints_px is None:
        return out
    j = np.asarray(joints_px, float)
    norm = (j - [x0, y0]) / [x1 - x0, y1 - y0]
    return out, norm


def resize(image, size: int):
    _, h, w = image.shape
    if h == size and w == size:
        return image
    return crop_and_resize(image, (0, 0, w, h), size)


def bbox_from_joints(joints_px, margin: float = 0.15):
    """Square box around all joints, padded by ``margin`` of its side."""
    j = np.asarray(joints_px, float).reshape(-1, 2)
    lo, hi = j.min(axis=0), j.max(axis=0)
    centre = (lo + hi) / 2
    side = max(float((hi - lo).max()), 1.0) * (1 + 2 * margin)
    return (centre[0] - side / 2, centre[1] - side / 2, centre[0] + side / 2, centre[1] + side / 2)


def mirror_sample(sample: AnnotatedSample) -> AnnotatedSample:
    """Horizontal flip with left/right joint (and therefore part) swap."""
    joints = sample.joints[JOINT_MIRROR].copy()
    joints[:, 0] = 1.0 - joints[:, 0]
    norm = None
    if sample.normalizer is not None:
        # no right hip is stored; flipping the pair in place keeps its length
        norm = sample.normalizer.copy()
        norm[:, 0] = 1.0 - norm[:, 0]
    return AnnotatedSample(sample.image[:, :, ::-1].copy(), joints, norm, name=sample.name + "m")


def crop_sample(sample: AnnotatedSample, ox: int, oy: int, size: int) -> AnnotatedSample:
    _, h, w = sample.image.shape
    if not (0 <= ox <= w - size and 0 <= oy <= h - size):
        raise InvalidArgumentError(f"crop offset ({ox}, {oy}) out of range for {w}x{h} -> {size}")
    scale = np.array([w, h], float)
    shift = np.array([ox, oy], float)
    joints = (sample.joints * scale - shift) / size
    norm = None if sample.normalizer is None else (sample.normalizer * scale - shift) / size
    img = sample.image[:, oy:oy + size, ox:ox + size].copy()
    return AnnotatedSample(img, joints, norm, name=f"{sample.name}c{ox}_{oy}")


def augment(sample: AnnotatedSample, rng, crop: int | None = None, n_crops: int = 16) -> list[AnnotatedSample]:
    """``n_crops`` random sub-crops plus the mirror of each (32 samples by default).

    Offsets are uniform integers in ``[0, S - crop]`` on both axes. The
    default crop is 112/128 of the input side.
    """
    _, h, w = sample.image.shape
    if h != w:
        raise InvalidShapeError("augment expects a square image")
    crop = crop or round(w * CROP / SOURCE)
    out = []
    for _ in range(n_crops):
        ox, oy = (int(v) for v in rng.integers(0, w - crop + 1, size=2))
        c = crop_sample(sample, ox, oy, crop)
        out.append(c)
        out.append(mirror_sample(c))
    return out


@dataclass
class Dataset:
    """Stacked samples ready for batching."""
    images: np.ndarray          # (N, 3, S, S) float32
    joints: np.ndarray          # (N, 8, 2)
    indicators: np.ndarray      # (N, 7, 64) uint8
    normalizers: np.ndarray | None = None   # (N, 2, 2)
    names: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_samples(cls, samples) -> "Dataset":
        samples = list(samples)
        if not samples:
            raise InvalidArgumentError("no samples")
        norms = None
        if all(s.normalizer is not None for s in samples):
            norms = np.stack([s.normalizer for s in samples])
        return cls(np.stack([s.image for s in samples]).astype(np.float32),
                   np.stack([s.joints for s in samples]),
                   np.stack([s.indicators for s in samples]),
                   norms, [s.name for s in samples])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.joints[idx], self.indicators[idx],
                       None if self.normalizers is None else self.normalizers[idx],
                       [self.names[i] for i in idx] if self.names else [])

    def resized(self, size: int) -> "Dataset":
        if self.images.shape[-1] == size:
            return self
        imgs = np.stack([resize(im, size) for im in self.images])
        return Dataset(imgs, self.joints, self.indicators, self.normalizers, self.names)
