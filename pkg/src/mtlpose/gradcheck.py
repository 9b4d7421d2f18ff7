"""Central finite-difference checks of the analytic gradients (float64)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import network as net
from .tensor import Rng

KINK_TOL = 1e-4
# below this magnitude float64 roundoff of an O(1) loss dominates a central
# difference at h=1e-5, so smaller gradients are compared in absolute terms
REL_FLOOR = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbing ``x`` in place.

    ``index`` restricts the check to a subset of flat positions (others are 0).
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    positions = range(flat.size) if index is None else index
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor only matters for gradients near zero."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def random_state(spec: net.NetworkSpec, rng: Rng, scale: float = 1.0) -> net.NetworkState:
    """Dense random parameters (no zero output layers), float64."""
    params = {}
    for k, (name, shape) in enumerate(spec.param_shapes().items()):
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 4
        params[name] = rng.derive(k).normal(shape, 0.0, scale * np.sqrt(2.0 / fan_in), np.float64)
    return net.NetworkState(params)


def near_kink(cache, spec, tol: float = KINK_TOL) -> bool:
    """True if a relu input or a max-pool contest is within ``tol`` of switching."""
    zs = [c["z"] for c in cache["trunk"]] + [cache[h][k] for h in ("reg", "det") for k in ("z1", "z2")]
    if any(np.min(np.abs(z)) < tol for z in zs):
        return True
    for st, c in zip(spec.trunk, cache["trunk"]):
        a = np.maximum(c["z"], 0)
        win = sliding_window_view(a, (st.pool, st.pool), axis=(2, 3))[:, :, ::st.pool_stride, ::st.pool_stride]
        win = np.sort(win.reshape(*win.shape[:4], -1), axis=-1)
        top, second = win[..., -1], win[..., -2]
        if np.any((top > 0) & (top - second < tol)):
            return True
    return False


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    seed: int
    worst: str


def check_network(spec: net.NetworkSpec, seed: int, weights=net.LossWeights(1.0, 1.0), h: float = 1e-5,
                  batch: int = 2, max_entries: int | None = None, mode: str = "train") -> GradCheckResult:
    """Compare backward() with finite differences of the batch global loss.

    Inputs and parameters are resampled (by bumping an internal counter)
    until no relu or pool decision sits within ``KINK_TOL`` of a switch.
    """
    for attempt in range(100):
        rng = Rng(seed, attempt)
        state = random_state(spec, rng.derive(0))
        images = rng.derive(1).uniform(0, 1, (batch, spec.input_channels, spec.input_size, spec.input_size))
        joints = rng.derive(2).uniform(0, 1, (batch, spec.reg_outputs))
        ind = (rng.derive(3).random((batch, spec.det_outputs)) < 0.3).astype(np.float64)
        masks = None
        if mode == "train":
            masks = net.sample_dropout_masks(spec, [rng.derive(4, i) for i in range(batch)], np.float64)
        out, cache = net.forward(state, spec, images, mode, masks)
        if not near_kink(cache, spec):
            break
    g_reg, g_det = net.loss_seeds(out, joints, ind, weights)
    grads = net.backward(state, spec, cache, g_reg, g_det)

    def loss():
        o, _ = net.forward(state, spec, images, mode, masks)
        reg = net.regression_loss(o.joints, joints.reshape(o.joints.shape))
        det = net.detection_loss(o.detections, ind)
        return float(np.mean(net.global_loss(weights, reg, det)))

    worst, worst_name, count = 0.0, "", 0
    pick = rng.derive(5)
    for name, w in state.params.items():
        index = None
        if max_entries is not None and w.size > max_entries:
            index = np.sort(pick.generator.choice(w.size, max_entries, replace=False))
        num = numeric_grad(loss, w, h, index)
        ana = grads[name]
        if index is not None:
            num, ana = num.reshape(-1)[index], ana.reshape(-1)[index]
        err = relative_error(ana, num)
        count += err.size
        if err.max() > worst:
            worst, worst_name = float(err.max()), name
    return GradCheckResult(worst, count, seed, worst_name)
