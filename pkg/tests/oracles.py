"""Slow, obviously-correct reference implementations used by the tests."""
import numpy as np


def naive_conv(x, w, b, stride=1):
    n, c, h, wd = x.shape
    o, _, f, _ = w.shape
    ho, wo = (h - f) // stride + 1, (wd - f) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for k in range(o):
            for y in range(ho):
                for z in range(wo):
                    acc = b[k]
                    for ch in range(c):
                        for p in range(f):
                            for q in range(f):
                                acc += w[k, ch, p, q] * x[i, ch, y * stride + p, z * stride + q]
                    out[i, k, y, z] = acc
    return out


def naive_pool(x, window=2, stride=2):
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.empty((n, c, ho, wo))
    for i in range(n):
        for k in range(c):
            for y in range(ho):
                for z in range(wo):
                    out[i, k, y, z] = x[i, k, y * stride:y * stride + window, z * stride:z * stride + window].max()
    return out


def central_diff(f, t, eps=1e-6):
    """Numerical gradient of scalar ``f()`` with respect to array ``t``, perturbed in place."""
    g = np.zeros_like(t, dtype=np.float64)
    flat, gf = t.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def sampled_inside_length(a, b, window, samples=100_000):
    """Segment length inside ``window`` estimated from evenly spaced points."""
    t = (np.arange(samples) + 0.5) / samples
    a, b = np.asarray(a, float), np.asarray(b, float)
    p = a + t[:, None] * (b - a)
    x0, y0, x1, y1 = window
    inside = (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)
    return inside.mean() * float(np.hypot(*(b - a)))


def receptive_field_case(seed):
    """Random trunk, random neuron: does rewriting every pixel outside its region leave it unchanged?

    Returns ``(unchanged, region, spec, layer_name)``.
    """
    from mtlpose import introspect as I
    from mtlpose import network as net
    from mtlpose.gradcheck import random_state
    from mtlpose.tensor import Rng

    r = np.random.default_rng(seed)
    while True:
        stages = tuple(net.ConvStage(int(r.integers(1, 3)), int(r.integers(1, 6)), int(r.integers(1, 3)),
                                     int(r.integers(1, 4)), int(r.integers(1, 3)))
                       for _ in range(int(r.integers(1, 4))))
        try:
            spec = net.NetworkSpec(input_size=int(r.integers(12, 40)), trunk=stages, hidden=(2, 2))
            break
        except Exception:
            continue
    state = random_state(spec, Rng(seed))
    image = r.uniform(0, 1, (1, 3, spec.input_size, spec.input_size))
    names = [info.name for info in spec.trunk_layers()]
    name = names[int(r.integers(len(names)))]
    before = I.trunk_activations(state, spec, image)[name]
    m = int(r.integers(before.shape[1]))
    my, mx = int(r.integers(before.shape[2])), int(r.integers(before.shape[3]))
    region, _ = I.backtrack(I.descriptors(spec, name), mx, my, spec.input_size)
    other = r.uniform(0, 1, image.shape)
    inside = np.zeros(image.shape[2:], bool)
    inside[region.ly:region.uy + 1, region.lx:region.ux + 1] = True
    perturbed = np.where(inside, image, other)
    after = I.trunk_activations(state, spec, perturbed)[name]
    return bool(after[0, m, my, mx] == before[0, m, my, mx]), region, spec, name
