"""Articulated stick-figure images with exact joint annotations.

Each figure is drawn from anti-aliased capsules (torso, arms, neck) and a
disc for the head over a textured background with limb-like clutter. Poses
come from joint angles in plausible ranges and are rejected until every
joint lies in ``[MARGIN, 1 - MARGIN]``. Sample ``i`` of a dataset only
depends on ``(seed, i)``.
"""
from __future__ import annotations

import math

import numpy as np

from .data import AnnotatedSample
from .errors import InvalidArgumentError
from .tensor import STREAM_SYNTH, Rng

MARGIN = 0.05


def _segment_distance(px, py, a, b):
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    den = dx * dx + dy * dy
    if den == 0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / den, 0.0, 1.0)
    return np.hypot(px - ax - t * dx, py - ay - t * dy)


def _paint(img, px, py, a, b, radius, color):
    """Alpha-blend a capsule of ``radius`` pixels around segment ``a-b``."""
    alpha = np.clip(radius - _segment_distance(px, py, a, b) + 0.5, 0.0, 1.0)
    img *= 1 - alpha
    img += alpha * np.asarray(color)[:, None, None]


def _rot(v, ang):
    c, s = math.cos(ang), math.sin(ang)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def sample_pose(rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(joints, normalizer)`` in normalized coordinates.

    Image y points down. ``l_*`` joints sit on the image right (a figure
    facing the camera).
    """
    for _ in range(1000):
        s = rng.uniform(0.8, 1.15)
        lean = rng.uniform(-0.25, 0.25)
        neck = np.array([rng.uniform(0.35, 0.65), rng.uniform(0.25, 0.45)])
        down = _rot((0.0, 1.0), -lean)
        across = _rot((1.0, 0.0), -lean)
        nose = neck - 0.16 * s * down + 0.04 * s * rng.uniform(-1, 1) * across
        half = 0.13 * s * rng.uniform(0.85, 1.15)
        shoulders = [neck + side * half * across + 0.03 * s * down for side in (1, -1)]
        elbows, wrists = [], []
        for side, sho in zip((1, -1), shoulders):
            # angles from straight down, positive swings away from the torso
            up = rng.uniform(-0.3, 2.6)
            bend = up + rng.uniform(-2.4, 2.4)
            elbow = sho + 0.2 * s * rng.uniform(0.9, 1.1) * _rot((side * math.sin(up), math.cos(up)), -lean)
            wrist = elbow + 0.18 * s * rng.uniform(0.9, 1.1) * _rot((side * math.sin(bend), math.cos(bend)), -lean)
            elbows.append(elbow)
            wrists.append(wrist)
        joints = np.array([nose, neck, *shoulders, elbows[0], elbows[1], wrists[0], wrists[1]])
        l_hip = neck + 0.5 * s * down + 0.8 * half * across
        if joints.min() >= MARGIN and joints.max() <= 1 - MARGIN:
            return joints, np.array([l_hip, shoulders[1]])
    raise RuntimeError("pose sampler failed to find a pose inside the margins")


def _background(rng: Rng, size: int, clutter: int, px, py):
    coarse = rng.uniform(0.0, 1.0, size=(3, 5, 5))
    ys = np.linspace(0, 4, size)
    yi = np.clip(ys.astype(int), 0, 3)
    f = ys - yi
    rows = coarse[:, yi] * (1 - f)[None, :, None] + coarse[:, yi + 1] * f[None, :, None]
    img = rows[:, :, yi] * (1 - f) + rows[:, :, yi + 1] * f
    img = 0.25 + 0.5 * img
    for _ in range(clutter):
        a = rng.uniform(-0.1, 1.1, size=2) * size
        ang = rng.uniform(0, 2 * math.pi)
        length = rng.uniform(0.1, 0.3) * size
        b = a + length * np.array([math.cos(ang), math.sin(ang)])
        _paint(img, px, py, a, b, rng.uniform(0.015, 0.04) * size, rng.uniform(0, 1, size=3))
    return img


def render(joints, normalizer, rng: Rng, size: int = 112, noise: float = 0.03, clutter: int = 4):
    px, py = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    img = _background(rng, size, clutter, px, py)
    j = np.asarray(joints) * size
    skin = np.array([0.9, 0.7, 0.55]) * rng.uniform(0.6, 1.1)
    shirt = rng.uniform(0, 1, size=3)
    s = np.linalg.norm(j[2] - j[3]) / 0.26
    hip = np.asarray(normalizer[0]) * size
    mid_hip = hip - (j[2] - j[1]) * 0.8
    _paint(img, px, py, j[1], mid_hip, 0.11 * s, shirt)
    _paint(img, px, py, j[2], j[3], 0.035 * s, shirt)
    for sho, elb, wri in ((2, 4, 6), (3, 5, 7)):
        _paint(img, px, py, j[sho], j[elb], 0.035 * s, shirt * 0.85)
        _paint(img, px, py, j[elb], j[wri], 0.028 * s, skin)
    _paint(img, px, py, j[1], j[0], 0.03 * s, skin)
    _paint(img, px, py, j[0], j[0], 0.065 * s, skin)
    if noise > 0:
        img += rng.normal(img.shape, 0.0, noise, np.float64)
    img = np.clip(img, 0.0, 1.0)
    # quantize to 8 bits so images survive a PPM round trip unchanged
    return (np.round(img * 255) / 255).astype(np.float32)


def synth_sample(seed: int, index: int, size: int = 112, noise: float = 0.03, clutter: int = 4) -> AnnotatedSample:
    rng = Rng(seed, STREAM_SYNTH, index)
    joints, normalizer = sample_pose(rng.derive(0))
    image = render(joints, normalizer, rng.derive(1), size, noise, clutter)
    return AnnotatedSample(image, joints, normalizer, name=f"s{seed}_{index:06d}")


def synth_dataset(n: int, seed: int = 0, size: int = 112, noise: float = 0.03, clutter: int = 4,
                  start: int = 0) -> list[AnnotatedSample]:
    if n < 1:
        raise InvalidArgumentError(f"n must be >= 1, got {n}")
    return [synth_sample(seed, start + i, size, noise, clutter) for i in range(n)]
