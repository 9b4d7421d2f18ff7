"""Forward/backward kernels for the layer types of the pose network.

Each layer is available twice:

* module-level functions (``conv_forward``, ``pool_backward`` ...) that take
  and return caches explicitly. The network uses these so that several
  batch chunks can be evaluated concurrently.
* small stateful classes (``ConvLayer``, ``PoolLayer`` ...) that keep the
  last forward cache on ``self``. Handy for tests and interactive use.

All arrays are NCHW (conv/pool) or NF (dense). Padding is always zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, InvalidShapeError, InvalidStateError

KEEP_PROBABILITY = 0.5
ACTIVATIONS = ("relu", "tanh", "logistic", "identity")


def conv_output_size(size: int, filter_size: int, stride: int, padding: int = 0) -> int:
    return (size + 2 * padding - filter_size) // stride + 1


def _check_4d(x, name="input"):
    if x.ndim != 4:
        raise InvalidShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution

def im2col(x: np.ndarray, f: int, stride: int) -> np.ndarray:
    """Patch matrix of shape ``(c * f * f, n * ho * wo)``.

    Row ``(c, i, j)`` holds tap ``(i, j)`` of channel ``c`` for every output
    position ``(n, y, x)``. Filled one tap at a time, which keeps every copy
    a contiguous block per channel.
    """
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, f, stride), conv_output_size(w, f, stride)
    out = np.empty((c, f, f, n, ho, wo), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3)
    ys, xs = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(f):
        for j in range(f):
            out[:, i, j] = xt[:, :, i:i + ys:stride, j:j + xs:stride]
    return out.reshape(c * f * f, n * ho * wo)


def col2im(cols: np.ndarray, x_shape, f: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto an NCHW array."""
    n, c, h, w = x_shape
    ho, wo = conv_output_size(h, f, stride), conv_output_size(w, f, stride)
    cols = cols.reshape(c, f, f, n, ho, wo)
    out = np.zeros((c, n, h, w), dtype=cols.dtype)
    ys, xs = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(f):
        for j in range(f):
            out[:, :, i:i + ys:stride, j:j + xs:stride] += cols[:, i, j]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _check_conv(weights, x, stride, padding):
    _check_4d(x)
    if padding != 0:
        raise InvalidArgumentError("only zero padding is supported")
    o, c, fh, fw = weights.shape
    if fh != fw:
        raise InvalidShapeError(f"filters must be square, got {fh}x{fw}")
    if x.shape[1] != c:
        raise InvalidShapeError(f"input has {x.shape[1]} channels, layer expects {c}")
    if conv_output_size(x.shape[2], fh, stride) < 1 or conv_output_size(x.shape[3], fw, stride) < 1:
        raise InvalidShapeError(f"{fh}x{fw} filter does not fit input {x.shape[2:]}")


def conv_forward(weights, bias, x, stride=1, padding=0):
    """Returns ``(output, cols)``; ``cols`` is the patch matrix reused by backward."""
    _check_conv(weights, x, stride, padding)
    o, _, f, _ = weights.shape
    n, _, h, w = x.shape
    ho, wo = conv_output_size(h, f, stride), conv_output_size(w, f, stride)
    cols = im2col(x, f, stride)
    # (positions, taps) @ (taps, maps) runs much faster in BLAS than the transpose
    out = cols.T @ weights.reshape(o, -1).T
    out += bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    return out, cols


def conv_backward(weights, x, grad_out, stride=1, cols=None):
    """Gradients of ``sum(grad_out * conv(x))`` w.r.t. input, weights and bias."""
    _check_conv(weights, x, stride, 0)
    o, c, f, _ = weights.shape
    n, _, h, w = x.shape
    expected = (n, o, conv_output_size(h, f, stride), conv_output_size(w, f, stride))
    if grad_out.shape != expected:
        raise InvalidShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")
    if cols is None:
        cols = im2col(x, f, stride)
    g = grad_out.transpose(1, 0, 2, 3).reshape(o, -1)
    grad_w = (cols @ g.T).T.reshape(weights.shape)
    grad_b = g.sum(axis=1)
    grad_x = col2im(weights.reshape(o, -1).T @ g, x.shape, f, stride)
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# max pooling

def _pool_geometry(shape, window, stride):
    h, w = shape[2], shape[3]
    ho, wo = conv_output_size(h, window, stride), conv_output_size(w, window, stride)
    return ho, wo, stride * (ho - 1) + 1, stride * (wo - 1) + 1


def pool_forward(x, window=2, stride=2):
    """Max pooling. Returns ``(output, argmax)``.

    ``argmax`` holds, per output element, the row-major index ``i * window + j``
    of the winning tap inside its window. Ties go to the first tap.
    """
    _check_4d(x)
    if window > x.shape[2] or window > x.shape[3]:
        raise InvalidShapeError(f"pool window {window} larger than input {x.shape[2]}x{x.shape[3]}")
    _, _, ys, xs = _pool_geometry(x.shape, window, stride)
    taps = [x[:, :, i:i + ys:stride, j:j + xs:stride] for i in range(window) for j in range(window)]
    out = taps[0].copy()
    for t in taps[1:]:
        np.maximum(out, t, out=out)
    # walk taps backwards so the first maximum wins
    k = np.full(out.shape, len(taps) - 1, dtype=np.uint8 if len(taps) <= 256 else np.intp)
    for t in range(len(taps) - 2, -1, -1):
        np.copyto(k, t, where=taps[t] == out)
    return out, k


def pool_backward(grad_out, argmax, input_shape, window=2, stride=2):
    """Route each output gradient to its winning tap; overlaps add in tap order."""
    if argmax is None:
        raise InvalidStateError("pool_backward called before pool_forward")
    ho, wo, ys, xs = _pool_geometry(input_shape, window, stride)
    if grad_out.shape != argmax.shape or grad_out.shape[2:] != (ho, wo):
        raise InvalidShapeError(f"grad_out shape {grad_out.shape} does not match pooling of {tuple(input_shape)}")
    grad = np.zeros(input_shape, dtype=grad_out.dtype)
    zero = grad_out.dtype.type(0)
    for t in range(window * window):
        i, j = divmod(t, window)
        grad[:, :, i:i + ys:stride, j:j + xs:stride] += np.where(argmax == t, grad_out, zero)
    return grad


# --------------------------------------------------------------------------
# fully connected

def dense_forward(weights, bias, x):
    if x.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise InvalidShapeError(f"dense input {x.shape} incompatible with weights {weights.shape}")
    return x @ weights.T + bias


def dense_backward(weights, x, grad_out):
    if grad_out.shape != (x.shape[0], weights.shape[0]):
        raise InvalidShapeError(f"grad_out shape {grad_out.shape} does not match dense output")
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


# --------------------------------------------------------------------------
# activations

def logistic(x):
    # exp(-|x|) never overflows and keeps tiny outputs instead of cancelling them to 0
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def activation_forward(kind, x):
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "logistic":
        return logistic(x)
    if kind == "identity":
        return x.copy()
    raise InvalidArgumentError(f"unknown activation {kind!r}")


def activation_backward(kind, x, y, grad_out):
    """``x`` is the pre-activation, ``y`` the activation output."""
    if grad_out.shape != x.shape:
        raise InvalidShapeError(f"grad_out shape {grad_out.shape}, expected {x.shape}")
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "tanh":
        return grad_out * (1 - y * y)
    if kind == "logistic":
        return grad_out * (y * (1 - y))
    if kind == "identity":
        return grad_out.copy()
    raise InvalidArgumentError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# dropout (classic: no train-time rescale, multiply by keep prob at test time)

def dropout_mask(rng, shape, keep=KEEP_PROBABILITY, dtype=np.float32):
    return (rng.random(shape) < keep).astype(dtype)


def dropout_forward(x, mode, mask=None, keep=KEEP_PROBABILITY):
    if mode == "test":
        return x * x.dtype.type(keep)
    if mode != "train":
        raise InvalidArgumentError(f"mode must be 'train' or 'test', got {mode!r}")
    if mask is None:
        raise InvalidStateError("train-mode dropout needs a sampled mask")
    if mask.shape != x.shape:
        raise InvalidShapeError(f"mask shape {mask.shape} != input shape {x.shape}")
    return x * mask


def dropout_backward(grad_out, mode, mask=None, keep=KEEP_PROBABILITY):
    if mode == "test":
        return grad_out * grad_out.dtype.type(keep)
    if mask is None:
        raise InvalidStateError("dropout_backward called without a cached mask")
    if mask.shape != grad_out.shape:
        raise InvalidShapeError(f"mask shape {mask.shape} != grad shape {grad_out.shape}")
    return grad_out * mask


# --------------------------------------------------------------------------
# stateful wrappers

@dataclass
class ConvLayer:
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        o, _, fh, fw = self.weights.shape
        if fh != fw:
            raise InvalidShapeError(f"filters must be square, got {fh}x{fw}")
        if self.bias.shape != (o,):
            raise InvalidShapeError(f"bias shape {self.bias.shape}, expected ({o},)")
        if self.padding != 0:
            raise InvalidArgumentError("only zero padding is supported")

    @property
    def filter_size(self):
        return self.weights.shape[2]

    def forward(self, x):
        out, self._cols = conv_forward(self.weights, self.bias, x, self.stride)
        self._x = x
        return out

    def backward(self, grad_out, x=None):
        if x is None:
            if getattr(self, "_x", None) is None:
                raise InvalidStateError("backward called before forward")
            x, cols = self._x, self._cols
        else:
            cols = None
        return conv_backward(self.weights, x, grad_out, self.stride, cols)


@dataclass
class PoolLayer:
    window: int = 2
    stride: int = 2
    argmax: np.ndarray | None = field(default=None, repr=False)
    input_shape: tuple | None = field(default=None, repr=False)

    def forward(self, x):
        out, self.argmax = pool_forward(x, self.window, self.stride)
        self.input_shape = x.shape
        return out

    def backward(self, grad_out):
        return pool_backward(grad_out, self.argmax, self.input_shape, self.window, self.stride)


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray

    def forward(self, x):
        self._x = x
        return dense_forward(self.weights, self.bias, x)

    def backward(self, grad_out):
        if getattr(self, "_x", None) is None:
            raise InvalidStateError("backward called before forward")
        return dense_backward(self.weights, self._x, grad_out)


@dataclass
class Activation:
    kind: str = "relu"

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.kind!r}")

    def forward(self, x):
        self._x = x
        self._y = activation_forward(self.kind, x)
        return self._y

    def backward(self, grad_out):
        if getattr(self, "_x", None) is None:
            raise InvalidStateError("backward called before forward")
        return activation_backward(self.kind, self._x, self._y, grad_out)


@dataclass
class DropoutLayer:
    keep_probability: float = KEEP_PROBABILITY
    mask: np.ndarray | None = field(default=None, repr=False)
    mode: str = "train"

    def forward(self, x, mode="train", rng=None):
        """Train mode samples an independent mask for each sample in the batch."""
        self.mode = mode
        if mode == "train":
            if rng is None:
                raise InvalidArgumentError("train-mode dropout needs an rng")
            self.mask = dropout_mask(rng, x.shape, self.keep_probability, x.dtype)
        return dropout_forward(x, mode, self.mask, self.keep_probability)

    def backward(self, grad_out):
        return dropout_backward(grad_out, self.mode, self.mask, self.keep_probability)
