"""Receptive-field backtracking and max-activation patch visualization.

Only trunk layers qualify: each trunk neuron sees a rectangular region of
the input, found by walking the layer list backwards from the neuron's
position and widening the interval at every strided filter.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import layers as L
from .data import resize
from .errors import InvalidArgumentError, LocalityViolationError
from .io import write_ppm
from .network import center


@dataclass(frozen=True)
class LayerDescriptor:
    stride: int
    filter_size: int

    def __post_init__(self):
        if self.stride < 1 or self.filter_size < 1:
            raise InvalidArgumentError(f"stride and filter_size must be >= 1, got {self}")


class Region(NamedTuple):
    lx: int
    ly: int
    ux: int
    uy: int

    @property
    def width(self):
        return self.ux - self.lx + 1

    @property
    def height(self):
        return self.uy - self.ly + 1

    def contains(self, x, y) -> bool:
        return self.lx <= x <= self.ux and self.ly <= y <= self.uy


def backtrack(layers, mx: int, my: int, image_size: int | None = None):
    """Input-image region feeding neuron ``(mx, my)`` of the last layer in ``layers``.

    ``layers`` runs from the input to the target layer. Returns
    ``(clamped, raw)``; ``clamped`` is cut to ``[0, image_size - 1]`` when an
    image size is given, otherwise identical to ``raw``.
    """
    lx, ly, ux, uy = mx, my, mx, my
    for layer in reversed(list(layers)):
        lx *= layer.stride
        ly *= layer.stride
        ux = ux * layer.stride + layer.filter_size - 1
        uy = uy * layer.stride + layer.filter_size - 1
    raw = Region(lx, ly, ux, uy)
    if image_size is None:
        return raw, raw
    hi = image_size - 1
    clamped = Region(min(max(lx, 0), hi), min(max(ly, 0), hi), min(max(ux, 0), hi), min(max(uy, 0), hi))
    return clamped, raw


def descriptors(spec, layer_name: str) -> list[LayerDescriptor]:
    """Descriptors from the input up to and including ``layer_name`` (a trunk layer)."""
    out = []
    for info in spec.trunk_layers():
        out.append(LayerDescriptor(info.stride, info.filter_size))
        if info.name == layer_name:
            return out
    if any(info.name == layer_name for info in spec.layers()):
        raise LocalityViolationError(
            f"{layer_name!r} is fully connected; only trunk layers have a bounded receptive field")
    raise InvalidArgumentError(f"unknown layer {layer_name!r}")


def trunk_activations(state, spec, images) -> dict:
    """Every trunk activation by layer name (``conv{k}`` holds the pre-relu map)."""
    p = state.params
    acts, x = {}, center(images)
    for k, st in enumerate(spec.trunk, 1):
        z, _ = L.conv_forward(p[f"conv{k}.weight"], p[f"conv{k}.bias"], x, st.stride)
        a = np.maximum(z, 0)
        x, _ = L.pool_forward(a, st.pool, st.pool_stride)
        acts[f"conv{k}"], acts[f"relu{k}"], acts[f"pool{k}"] = z, a, x
    return acts


def _feature_map(state, spec, images, layer_name):
    descriptors(spec, layer_name)       # raises for dense / unknown layers
    acts = trunk_activations(state, spec, images)
    # conv layers are visualized through their relu output
    key = layer_name.replace("conv", "relu") if layer_name.startswith("conv") else layer_name
    return acts[key]


@dataclass
class Patch:
    image_id: int
    region: Region
    activation: float
    pixels: np.ndarray      # (C, h, w)


def max_activation_patches(state, spec, images, layer_name: str, map_index: int) -> list[Patch]:
    """For each image, the region behind the strongest neuron of one feature map.

    Ties resolve to the first position in row-major order.
    """
    fmap = _feature_map(state, spec, images, layer_name)
    if not 0 <= map_index < fmap.shape[1]:
        raise InvalidArgumentError(f"map index {map_index} out of range for {fmap.shape[1]} maps")
    chain = descriptors(spec, layer_name)
    out = []
    for i in range(len(images)):
        m = fmap[i, map_index]
        my, mx = np.unravel_index(int(np.argmax(m)), m.shape)
        region, _ = backtrack(chain, int(mx), int(my), spec.input_size)
        pix = images[i, :, region.ly:region.uy + 1, region.lx:region.ux + 1].copy()
        out.append(Patch(i, region, float(m[my, mx]), pix))
    return out


def mean_patch(patches, size: int) -> np.ndarray:
    if not len(patches):
        raise InvalidArgumentError("no patches to average")
    acc = None
    for p in patches:
        pix = p.pixels if isinstance(p, Patch) else p
        r = resize(np.asarray(pix, dtype=np.float64), size)
        acc = r if acc is None else acc + r
    return acc / len(patches)


def normalize_channels(img: np.ndarray) -> np.ndarray:
    """Min-max scale each channel to [0, 1]; flat channels become 0."""
    lo = img.min(axis=(1, 2), keepdims=True)
    span = img.max(axis=(1, 2), keepdims=True) - lo
    return np.where(span > 0, (img - lo) / np.where(span > 0, span, 1), 0.0)


def average_patches(patches, size: int) -> np.ndarray:
    """Resize every patch to ``size`` squared, average, then normalize per channel."""
    return normalize_channels(mean_patch(patches, size))


def write_visualization(out_dir, layer_index: int, map_index: int, patches, size: int) -> Path:
    """Write ``layer_<k>/map_<m>/avg.ppm`` and ``patches.csv`` under ``out_dir``."""
    d = Path(out_dir) / f"layer_{layer_index}" / f"map_{map_index}"
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "avg.ppm", average_patches(patches, size))
    lines = ["image_id,lx,ly,ux,uy,activation"]
    for p in patches:
        lines.append(f"{p.image_id},{p.region.lx},{p.region.ly},{p.region.ux},{p.region.uy},{p.activation!r}")
    (d / "patches.csv").write_text("\n".join(lines) + "\n")
    return d
