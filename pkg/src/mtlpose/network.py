"""Shared convolutional trunk with a joint-regression head and a part-detection head.

Layout (default ``full`` preset)::

    input 3x112x112
      -> [conv 5x5 -> relu -> maxpool 2/2] x 3            (shared trunk)
      -> regression head: fc 512 relu dropout, fc 512 relu, fc 16 tanh
      -> detection head:  fc 512 relu dropout, fc 512 relu, fc 448 logistic

Regression outputs are interleaved ``(x0, y0, x1, y1, ...)`` in (-1, 1) and
reported as joints via ``(v + 1) / 2``. Detection output ``p * windows + l``
is the probability that part ``p`` lies in window ``l``.

Losses per sample: squared joint error summed over joints, and binary
cross-entropy averaged over the ``parts * windows`` detectors. The global
cost is ``lambda_r * reg + lambda_d * det`` averaged over the batch.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .errors import InvalidArgumentError, InvalidShapeError, InvalidStateError
from .tensor import STREAM_INIT, Rng, get_dtype

CE_EPS = 1e-7
# images arrive in [0, 1]; the trunk sees them shifted to zero mean
INPUT_OFFSET = 0.5
# fixed chunking keeps the gradient reduction order independent of thread count
CHUNK_SIZE = 16


@dataclass(frozen=True)
class ConvStage:
    maps: int
    filter_size: int = 5
    stride: int = 1
    pool: int = 2
    pool_stride: int = 2


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str
    stride: int = 1
    filter_size: int = 1
    in_extent: int = 0
    out_extent: int = 0


@dataclass(frozen=True)
class NetworkSpec:
    input_channels: int = 3
    input_size: int = 112
    trunk: tuple = (ConvStage(32), ConvStage(16), ConvStage(16))
    hidden: tuple = (512, 512)
    joints: int = 8
    parts: int = 7
    windows: int = 64

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(self.trunk))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if len(self.hidden) != 2:
            raise InvalidArgumentError("each head has exactly two hidden layers")
        if not self.trunk:
            raise InvalidArgumentError("the trunk needs at least one conv stage")
        self.feature_shape()  # validates spatial extents

    @property
    def reg_outputs(self) -> int:
        return 2 * self.joints

    @property
    def det_outputs(self) -> int:
        return self.parts * self.windows

    def feature_shape(self):
        """(maps, size) of the last pooling layer."""
        size, maps = self.input_size, self.input_channels
        for k, st in enumerate(self.trunk, 1):
            size = L.conv_output_size(size, st.filter_size, st.stride)
            if size < st.pool:
                raise InvalidShapeError(f"conv{k} output {size} smaller than pool window {st.pool}")
            size = L.conv_output_size(size, st.pool, st.pool_stride)
            maps = st.maps
        return maps, size

    @property
    def feature_size(self) -> int:
        maps, size = self.feature_shape()
        return maps * size * size

    def trunk_layers(self) -> list[LayerInfo]:
        out, maps, size = [], self.input_channels, self.input_size
        for k, st in enumerate(self.trunk, 1):
            out.append(LayerInfo(f"conv{k}", "conv", st.stride, st.filter_size, maps, st.maps))
            out.append(LayerInfo(f"relu{k}", "relu", 1, 1, st.maps, st.maps))
            out.append(LayerInfo(f"pool{k}", "pool", st.pool_stride, st.pool, st.maps, st.maps))
            maps = st.maps
        return out

    def head_layers(self, head: str) -> list[LayerInfo]:
        h1, h2 = self.hidden
        n_out, act = (self.reg_outputs, "tanh") if head == "reg" else (self.det_outputs, "logistic")
        return [
            LayerInfo(f"{head}.fc1", "dense", 1, 1, self.feature_size, h1),
            LayerInfo(f"{head}.relu1", "relu", 1, 1, h1, h1),
            LayerInfo(f"{head}.drop1", "dropout", 1, 1, h1, h1),
            LayerInfo(f"{head}.fc2", "dense", 1, 1, h1, h2),
            LayerInfo(f"{head}.relu2", "relu", 1, 1, h2, h2),
            LayerInfo(f"{head}.fc3", "dense", 1, 1, h2, n_out),
            LayerInfo(f"{head}.out", act, 1, 1, n_out, n_out),
        ]

    def layers(self) -> list[LayerInfo]:
        return self.trunk_layers() + self.head_layers("reg") + self.head_layers("det")

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for info in self.layers():
            if info.kind == "conv":
                f = info.filter_size
                shapes[f"{info.name}.weight"] = (info.out_extent, info.in_extent, f, f)
                shapes[f"{info.name}.bias"] = (info.out_extent,)
            elif info.kind == "dense":
                shapes[f"{info.name}.weight"] = (info.out_extent, info.in_extent)
                shapes[f"{info.name}.bias"] = (info.out_extent,)
        return shapes


PRESETS = {
    "full": NetworkSpec(),
    # desk-scale network for CPU experiments: 48x48 input, 16x3x3 feature map
    "desk": NetworkSpec(
        input_size=48,
        trunk=(ConvStage(8, 5), ConvStage(16, 5), ConvStage(16, 3)),
        hidden=(512, 512),
    ),
    "tiny": NetworkSpec(input_size=8, trunk=(ConvStage(2, 3),), hidden=(2, 2)),
}


def preset(name: str) -> NetworkSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_d: float = 1.0

    def __post_init__(self):
        if self.lambda_r < 0 or self.lambda_d < 0 or not self.lambda_r + self.lambda_d > 0:
            raise InvalidArgumentError(
                f"loss weights must be non-negative and not both zero, got {self.lambda_r}, {self.lambda_d}")

    @classmethod
    def from_ratio(cls, ratio: float) -> "LossWeights":
        """``ratio = lambda_r / lambda_d``; 0 and inf switch one task off."""
        if ratio < 0 or math.isnan(ratio):
            raise InvalidArgumentError(f"ratio must be >= 0, got {ratio}")
        if math.isinf(ratio):
            return cls(1.0, 0.0)
        if ratio == 0:
            return cls(0.0, 1.0)
        if ratio >= 1:
            return cls(1.0, 1.0 / ratio)
        return cls(ratio, 1.0)


@dataclass
class NetworkState:
    params: dict = field(default_factory=dict)
    training: bool = False

    def __getitem__(self, key):
        return self.params[key]

    def copy(self) -> "NetworkState":
        return NetworkState({k: v.copy() for k, v in self.params.items()}, self.training)

    def astype(self, dtype) -> "NetworkState":
        return NetworkState({k: v.astype(dtype) for k, v in self.params.items()}, self.training)

    def check(self, spec: NetworkSpec):
        shapes = spec.param_shapes()
        if set(shapes) != set(self.params):
            raise InvalidStateError("parameter names do not match the network spec")
        for k, shape in shapes.items():
            if self.params[k].shape != shape:
                raise InvalidShapeError(f"{k}: shape {self.params[k].shape}, spec wants {shape}")


def init_state(spec: NetworkSpec, seed: int = 0, dtype=None) -> NetworkState:
    """Fan-in scaled Gaussian weights, zero biases, zero output-layer weights.

    Hidden layers use stddev ``sqrt(2 / fan_in)``. The two output layers start
    at zero so both heads begin at the uninformative point: joints at the box
    centre and every detector at probability 0.5.
    """
    dtype = dtype or get_dtype()
    rng = Rng(seed, STREAM_INIT)
    params = {}
    for k, (name, shape) in enumerate(spec.param_shapes().items()):
        if name.endswith(".bias") or name.endswith("fc3.weight"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.derive(k).normal(shape, 0.0, math.sqrt(2.0 / fan_in), dtype)
    return NetworkState(params)


@dataclass
class NetworkOutput:
    joints_raw: np.ndarray      # (B, 2J) in (-1, 1)
    detections: np.ndarray      # (B, P*L) in (0, 1)

    @property
    def joints(self) -> np.ndarray:
        return ((self.joints_raw + 1) / 2).reshape(len(self.joints_raw), -1, 2)


def sample_dropout_masks(spec: NetworkSpec, rngs, dtype=None):
    """One independent mask per sample per head. ``rngs`` is one Rng per sample."""
    dtype = dtype or get_dtype()
    h1 = spec.hidden[0]
    reg = np.stack([L.dropout_mask(r.derive(0), (h1,), dtype=dtype) for r in rngs])
    det = np.stack([L.dropout_mask(r.derive(1), (h1,), dtype=dtype) for r in rngs])
    return {"reg": reg, "det": det}


def center(images: np.ndarray) -> np.ndarray:
    return images - images.dtype.type(INPUT_OFFSET)


def _head_forward(state, head, h0, mode, mask, act):
    p = state.params
    z1 = L.dense_forward(p[f"{head}.fc1.weight"], p[f"{head}.fc1.bias"], h0)
    a1 = np.maximum(z1, 0)
    d1 = L.dropout_forward(a1, mode, mask)
    z2 = L.dense_forward(p[f"{head}.fc2.weight"], p[f"{head}.fc2.bias"], d1)
    a2 = np.maximum(z2, 0)
    z3 = L.dense_forward(p[f"{head}.fc3.weight"], p[f"{head}.fc3.bias"], a2)
    y = L.activation_forward(act, z3)
    return y, {"z1": z1, "d1": d1, "z2": z2, "a2": a2, "z3": z3, "mask": mask}


def forward(state: NetworkState, spec: NetworkSpec, images: np.ndarray, mode: str = "test",
            masks=None):
    """Run both heads. Returns ``(NetworkOutput, cache)``.

    Train mode needs ``masks`` from :func:`sample_dropout_masks`; test mode
    scales the dropout layer by the keep probability instead.
    """
    want = (spec.input_channels, spec.input_size, spec.input_size)
    if images.ndim != 4 or images.shape[1:] != want:
        raise InvalidShapeError(f"images must be (B, {want[0]}, {want[1]}, {want[2]}), got {images.shape}")
    if mode not in ("train", "test"):
        raise InvalidArgumentError(f"mode must be 'train' or 'test', got {mode!r}")
    if mode == "train" and masks is None:
        raise InvalidArgumentError("train mode needs dropout masks")
    p = state.params
    x = center(images)
    trunk = []
    for k, st in enumerate(spec.trunk, 1):
        z, cols = L.conv_forward(p[f"conv{k}.weight"], p[f"conv{k}.bias"], x, st.stride)
        a = np.maximum(z, 0)
        pooled, argmax = L.pool_forward(a, st.pool, st.pool_stride)
        trunk.append({"x": x, "cols": cols, "z": z, "a_shape": a.shape, "argmax": argmax, "out": pooled})
        x = pooled
    h0 = x.reshape(len(x), -1)
    masks = masks or {}
    raw, reg_cache = _head_forward(state, "reg", h0, mode, masks.get("reg"), "tanh")
    det, det_cache = _head_forward(state, "det", h0, mode, masks.get("det"), "logistic")
    cache = {"mode": mode, "trunk": trunk, "h0": h0, "reg": reg_cache, "det": det_cache,
             "raw": raw, "det_out": det}
    return NetworkOutput(raw, det), cache


def regression_loss(pred, truth) -> np.ndarray:
    """Sum of squared joint distances, per sample. Inputs ``(..., J, 2)``."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.shape[-1] != 2:
        raise InvalidShapeError(f"joint arrays must match and end in 2, got {pred.shape}, {truth.shape}")
    d = pred - truth
    return (d * d).sum(axis=(-2, -1))


def detection_loss(pred, truth, eps: float = CE_EPS) -> np.ndarray:
    """Mean binary cross-entropy over the detectors of each sample."""
    pred = np.asarray(pred)
    truth = np.asarray(truth, dtype=pred.dtype).reshape(pred.shape)
    q = np.clip(pred, eps, 1 - eps)
    ce = -truth * np.log(q) - (1 - truth) * np.log(1 - q)
    return ce.mean(axis=-1)


def global_loss(weights: LossWeights, reg, det):
    return weights.lambda_r * reg + weights.lambda_d * det


def loss_seeds(output: NetworkOutput, joints, indicators, weights: LossWeights, batch_size=None):
    """Gradients of the batch-mean global loss w.r.t. both heads' pre-activations.

    Regression seed is taken before tanh, detection seed before the logistic;
    for the latter the cross-entropy/logistic pair collapses to ``y_hat - y``.
    """
    b = batch_size or len(output.joints_raw)
    raw = output.joints_raw
    pred = (raw + 1) / 2
    diff = pred - np.asarray(joints, dtype=raw.dtype).reshape(raw.shape)
    g_reg = (weights.lambda_r / b) * diff * (1 - raw * raw)
    y = np.asarray(indicators, dtype=raw.dtype).reshape(output.detections.shape)
    g_det = (weights.lambda_d / (b * output.detections.shape[1])) * (output.detections - y)
    return g_reg.astype(raw.dtype, copy=False), g_det.astype(raw.dtype, copy=False)


def _head_backward(state, head, h0, c, g_z3, mode, grads):
    p = state.params
    g_a2, grads[f"{head}.fc3.weight"], grads[f"{head}.fc3.bias"] = L.dense_backward(
        p[f"{head}.fc3.weight"], c["a2"], g_z3)
    g_z2 = g_a2 * (c["z2"] > 0)
    g_d1, grads[f"{head}.fc2.weight"], grads[f"{head}.fc2.bias"] = L.dense_backward(
        p[f"{head}.fc2.weight"], c["d1"], g_z2)
    g_a1 = L.dropout_backward(g_d1, mode, c["mask"])
    g_z1 = g_a1 * (c["z1"] > 0)
    g_h0, grads[f"{head}.fc1.weight"], grads[f"{head}.fc1.bias"] = L.dense_backward(
        p[f"{head}.fc1.weight"], h0, g_z1)
    return g_h0


def backward(state: NetworkState, spec: NetworkSpec, cache, g_reg, g_det) -> dict:
    """Gradients for every parameter given the two head seeds from :func:`loss_seeds`.

    The trunk receives the sum of the gradients flowing back from both heads.
    """
    if not cache or "trunk" not in cache:
        raise InvalidStateError("backward needs the cache of a forward pass")
    grads = {}
    mode = cache["mode"]
    h0 = cache["h0"]
    g_h0 = _head_backward(state, "reg", h0, cache["reg"], g_reg, mode, grads)
    g_h0 = g_h0 + _head_backward(state, "det", h0, cache["det"], g_det, mode, grads)
    trunk_grads(state, spec, cache, g_h0, grads)
    return {k: grads[k] for k in spec.param_shapes()}


def trunk_grads(state, spec, cache, g_h0, grads, stop_at_input=True):
    """Backpropagate a gradient on the flattened features through the trunk."""
    p = state.params
    trunk = cache["trunk"]
    g = g_h0.reshape(trunk[-1]["out"].shape)
    for k in range(len(spec.trunk), 0, -1):
        st, c = spec.trunk[k - 1], trunk[k - 1]
        g = L.pool_backward(g, c["argmax"], c["a_shape"], st.pool, st.pool_stride)
        g = g * (c["z"] > 0)
        w = p[f"conv{k}.weight"]
        o = w.shape[0]
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        grads[f"conv{k}.weight"] = (c["cols"] @ gm.T).T.reshape(w.shape)
        grads[f"conv{k}.bias"] = gm.sum(axis=1)
        if k > 1 or not stop_at_input:
            g = L.col2im(w.reshape(o, -1).T @ gm, c["x"].shape, st.filter_size, st.stride)
    return g


@dataclass
class BatchResult:
    grads: dict
    reg_loss: float     # batch mean
    det_loss: float     # batch mean
    loss: float         # batch mean of the weighted global cost


def _chunk_pass(state, spec, images, joints, indicators, weights, masks, batch_size, mode):
    out, cache = forward(state, spec, images, mode, masks)
    g_reg, g_det = loss_seeds(out, joints, indicators, weights, batch_size)
    grads = backward(state, spec, cache, g_reg, g_det)
    reg = regression_loss(out.joints, np.asarray(joints).reshape(out.joints.shape))
    det = detection_loss(out.detections, indicators)
    return grads, float(reg.sum()), float(det.sum())


def batch_gradients(state, spec, images, joints, indicators, weights: LossWeights, masks=None,
                    mode="train", threads=1, chunk_size=CHUNK_SIZE) -> BatchResult:
    """Forward + backward over a batch in fixed-size chunks, reduced in chunk order.

    The result does not depend on ``threads``: chunk boundaries and the
    summation order are fixed; threads only change which chunk runs where.
    """
    b = len(images)
    if b == 0:
        raise InvalidArgumentError("empty batch")
    starts = list(range(0, b, chunk_size))

    def run(s):
        sl = slice(s, s + chunk_size)
        m = None if masks is None else {k: v[sl] for k, v in masks.items()}
        return _chunk_pass(state, spec, images[sl], joints[sl], indicators[sl], weights, m, b, mode)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(s) for s in starts]
    grads = {k: v.copy() for k, v in results[0][0].items()}
    for r in results[1:]:
        for k, v in r[0].items():
            grads[k] += v
    reg = sum(r[1] for r in results) / b
    det = sum(r[2] for r in results) / b
    return BatchResult(grads, reg, det, weights.lambda_r * reg + weights.lambda_d * det)


def predict(state, spec, images, batch_size=64) -> NetworkOutput:
    """Test-mode forward in batches."""
    raws, dets = [], []
    for s in range(0, len(images), batch_size):
        out, _ = forward(state, spec, images[s:s + batch_size], "test")
        raws.append(out.joints_raw)
        dets.append(out.detections)
    return NetworkOutput(np.concatenate(raws), np.concatenate(dets))


def with_input(spec: NetworkSpec, size: int) -> NetworkSpec:
    return replace(spec, input_size=size)
