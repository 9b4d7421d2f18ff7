"""Acceptance suite: each test checks one criterion and reports a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are also
collected into a summary at the end of the session. The training criteria take several minutes on
one CPU core; they are marked ``slow``.
"""
import math
import time

import numpy as np
import pytest

from mtlpose import evaluation as E
from mtlpose import layers as L
from mtlpose import network as net
from mtlpose import training as T
from mtlpose.checkpoint import dumps, loads
from mtlpose.cli import main as cli_main
from mtlpose.data import DEFAULT_GRID, BETA, Dataset, clipped_lengths, sticks_from_joints
from mtlpose.errors import BadMagicError, TruncatedCheckpointError, VersionMismatchError
from mtlpose.gradcheck import check_network, random_state
from mtlpose.introspect import LayerDescriptor, backtrack
from mtlpose.synth import synth_dataset
from mtlpose.tensor import Rng

from .oracles import central_diff, receptive_field_case

DESK = net.preset("desk")
TINY = net.preset("tiny")

# optimizer used by the training criteria (2-4); see the README for the reasoning
ACCEPT_CONFIG = dict(learning_rate=0.01, momentum=0.9, lr_decay=0.98, batch_size=32, eval_train=False)


def synth(n, seed, start=0, size=DESK.input_size):
    return Dataset.from_samples(synth_dataset(n, seed, size, start=start))


# --------------------------------------------------------------------------- 1

def _layer_errors(seed):
    """Worst relative error of each layer's backward against central differences (h=1e-5)."""
    r = np.random.default_rng(seed)
    h = 1e-5
    rel = lambda a, n: float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-5)))  # noqa: E731
    errs = {}

    x, w, b = r.standard_normal((2, 2, 7, 7)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)
    out, cols = L.conv_forward(w, b, x, 2)
    g = r.standard_normal(out.shape)
    gx, gw, gb = L.conv_backward(w, x, g, 2, cols)
    f = lambda: float(np.sum(g * L.conv_forward(w, b, x, 2)[0]))  # noqa: E731
    errs["conv"] = max(rel(gx, central_diff(f, x, h)), rel(gw, central_diff(f, w, h)), rel(gb, central_diff(f, b, h)))

    x = r.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.01     # distinct values: no ties
    out, k = L.pool_forward(x, 3, 2)
    g = r.standard_normal(out.shape)
    f = lambda: float(np.sum(g * L.pool_forward(x, 3, 2)[0]))  # noqa: E731
    errs["pool"] = rel(L.pool_backward(g, k, x.shape, 3, 2), central_diff(f, x, h))

    w, b, x = r.standard_normal((5, 4)), r.standard_normal(5), r.standard_normal((3, 4))
    g = r.standard_normal((3, 5))
    gx, gw, gb = L.dense_backward(w, x, g)
    f = lambda: float(np.sum(g * L.dense_forward(w, b, x)))  # noqa: E731
    errs["dense"] = max(rel(gx, central_diff(f, x, h)), rel(gw, central_diff(f, w, h)), rel(gb, central_diff(f, b, h)))

    for kind in ("relu", "tanh", "logistic"):
        x = r.standard_normal(30)
        x = x[np.abs(x) > 1e-4]
        g = r.standard_normal(x.shape)
        ana = L.activation_backward(kind, x, L.activation_forward(kind, x), g)
        f = lambda: float(np.sum(g * L.activation_forward(kind, x)))  # noqa: E731
        errs[kind] = rel(ana, central_diff(f, x, h))

    x = r.standard_normal((3, 8))
    mask = L.dropout_mask(Rng(seed), x.shape, dtype=np.float64)
    g = r.standard_normal(x.shape)
    for mode in ("train", "test"):
        f = lambda: float(np.sum(g * L.dropout_forward(x, mode, mask)))  # noqa: E731
        errs[f"dropout-{mode}"] = rel(L.dropout_backward(g, mode, mask), central_diff(f, x, h))
    return errs


def test_criterion_01_gradient_soundness(report):
    t0 = time.perf_counter()
    seeds = range(20)
    layer_worst = {}
    for s in seeds:
        for name, e in _layer_errors(s).items():
            layer_worst[name] = max(layer_worst.get(name, 0.0), e)
    net_worst = max(check_network(TINY, s, h=1e-5).max_rel_error for s in seeds)
    worst = max(max(layer_worst.values()), net_worst)
    ok = worst < 1e-5
    report(1, ok, f"max rel error {worst:.2e} (layers {max(layer_worst.values()):.2e}, tiny network "
                  f"{net_worst:.2e}) over {len(seeds)} seeds, {time.perf_counter() - t0:.0f}s")
    assert ok


# --------------------------------------------------------------------------- 2

@pytest.mark.slow
def test_criterion_02_collapsed_detector_constant(report):
    t0 = time.perf_counter()
    data = synth(500, 0)
    w = net.LossWeights.from_ratio(1e10)
    cfg = T.TrainConfig(lambda_r=w.lambda_r, lambda_d=w.lambda_d, epochs=30, seed=0, **ACCEPT_CONFIG)
    state, log = T.train(DESK, cfg, data, synth(200, 0, start=500))
    _, train_det = T.evaluate(state, DESK, data)
    test_det = log.final().test_det
    dev = max(abs(train_det - math.log(2)), abs(test_det - math.log(2)))
    ok = dev <= 0.01
    report(2, ok, f"ratio 1e10, 30 epochs: train det {train_det:.4f}, test det {test_det:.4f} "
                  f"(ln 2 = 0.6931), {time.perf_counter() - t0:.0f}s")
    assert ok


# --------------------------------------------------------------------------- 3

@pytest.mark.slow
def test_criterion_03_multitask_regularization_trend(report):
    t0 = time.perf_counter()
    wins, parts = 0, []
    for seed in (0, 1, 2):
        train_set, test_set = synth(2000, seed), synth(500, seed, start=2000)
        final = {}
        for ratio in (1.0, math.inf):
            w = net.LossWeights.from_ratio(ratio)
            cfg = T.TrainConfig(lambda_r=w.lambda_r, lambda_d=w.lambda_d, epochs=40, seed=seed, **ACCEPT_CONFIG)
            _, log = T.train(DESK, cfg, train_set, test_set)
            final[ratio] = log.final().test_reg
        wins += final[1.0] < final[math.inf]
        parts.append(f"seed {seed}: {final[1.0]:.4f} vs {final[math.inf]:.4f}")
    elapsed = time.perf_counter() - t0
    ok = wins == 3 and elapsed < 30 * 60
    report(3, ok, f"test reg ratio 1 vs inf, ratio 1 lower in {wins}/3 seeds ({'; '.join(parts)}), {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------- 4

@pytest.mark.slow
def test_criterion_04_overfit_smoke(report):
    t0 = time.perf_counter()
    data = synth(8, 0)
    # best of a small sweep; batch 8 gives only 300 steps
    cfg = T.TrainConfig(lambda_r=1.0, lambda_d=1.0, epochs=300, seed=0, learning_rate=0.04, momentum=0.95,
                        lr_decay=1.0, batch_size=2, eval_train=False)
    state, _ = T.train(DESK, cfg, data)
    train_reg, _ = T.evaluate(state, DESK, data)
    elapsed = time.perf_counter() - t0
    ok = train_reg < 1e-3 and elapsed < 120
    report(4, ok, f"8 samples, 300 epochs: train reg {train_reg:.2e} (< 1e-3), {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------- 5

def _sampled_fraction(a, b, windows, samples=4000):
    """Point-sampling estimate of the fraction of each segment inside its window."""
    t = (np.arange(samples) + 0.5) / samples
    p = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    w = windows[:, None, :]
    inside = (p[..., 0] >= w[..., 0]) & (p[..., 0] <= w[..., 2]) & (p[..., 1] >= w[..., 1]) & (p[..., 1] <= w[..., 3])
    return inside.mean(axis=1)


def test_criterion_05_indicator_oracle(report):
    t0 = time.perf_counter()
    r = np.random.default_rng(5)
    windows = DEFAULT_GRID.windows
    agree = total = 0
    while total < 10_000:
        n = 4000
        a = r.uniform(-20, 132, (n, 2))
        b = a + r.normal(0, 35, (n, 2))
        win = windows[r.integers(len(windows), size=n)]
        length = np.hypot(*(b - a).T)
        frac = _sampled_fraction(a, b, win)
        keep = (length > 1e-6) & (np.abs(frac - BETA) > 0.01)
        label = clipped_lengths(a, b, win) > BETA * length
        need = min(int(keep.sum()), 10_000 - total)
        idx = np.flatnonzero(keep)[:need]
        agree += int(np.sum(label[idx] == (frac[idx] > BETA)))
        total += need
    ok = agree == total
    report(5, ok, f"{agree}/{total} stick-window pairs agree with point sampling, {time.perf_counter() - t0:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 6

def test_criterion_06_backtracking_soundness(report):
    t0 = time.perf_counter()
    sound = sum(receptive_field_case(1000 + k)[0] for k in range(100))
    chain = [LayerDescriptor(1, 5), LayerDescriptor(2, 2), LayerDescriptor(1, 5), LayerDescriptor(2, 2)]
    closed, _ = backtrack(chain, 0, 0)
    ok = sound == 100 and closed == (0, 0, 15, 15)
    report(6, ok, f"{sound}/100 random trunks unaffected outside the region; closed form "
                  f"{tuple(closed)}, {time.perf_counter() - t0:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 7

def _rotate(x, angle, shift):
    c, s = math.cos(angle), math.sin(angle)
    return x @ np.array([[c, -s], [s, c]]).T + shift


def test_criterion_07_metric_oracles(report):
    t0 = time.perf_counter()
    r = np.random.default_rng(7)
    checks = {}
    g = np.array([[0.0, 0.0], [0.0, 1.0]])
    checks["swap"] = E.pcp_part(g[::-1], g) and not E.pcp_part([[0, 0.6], [0, 1.6]], g, 0.5)

    gt = r.random((1000, 8, 2))
    est = gt + r.normal(0, 0.08, gt.shape)
    es, gs = sticks_from_joints(est), sticks_from_joints(gt)
    res = E.pcp_dataset(est, gt, parts=E.PART_NAMES)
    checks["pcp recount"] = all(
        res.counts[name] == sum(E.pcp_part(es[i, p], gs[i, p]) for i in range(1000))
        for p, name in enumerate(E.PART_NAMES))

    ang, shift = r.uniform(0, 2 * np.pi), r.uniform(-3, 3, 2)
    res_rot = E.pcp_dataset(_rotate(est, ang, shift), _rotate(gt, ang, shift), parts=E.PART_NAMES)
    # decisions may only differ for endpoints within 1e-9 of the threshold
    tol = 0.5 * np.linalg.norm(gs[..., 0, :] - gs[..., 1, :], axis=-1)
    dists = np.stack([np.linalg.norm(es[..., i, :] - gs[..., j, :], axis=-1) for i in (0, 1) for j in (0, 1)])
    borderline = np.any(np.abs(dists - tol) < 1e-9)
    checks["rigid"] = borderline or res_rot.counts == res.counts

    norm = r.random((1000, 2, 2))
    curve = E.flic_accuracy(est, gt, norm)
    checks["flic monotone"] = bool(np.all(np.diff(curve.accuracy, axis=1) >= 0))
    checks["flic scale"] = np.array_equal(E.flic_accuracy(est * 3.5, gt * 3.5, norm * 3.5).accuracy, curve.accuracy)
    err = np.linalg.norm(est - gt, axis=-1)
    dist = np.linalg.norm(norm[:, 0] - norm[:, 1], axis=-1)
    naive = np.array([[100.0 * sum(err[i, j] <= rad * dist[i] / 100 for i in range(1000)) / 1000
                       for rad in curve.radii] for j in range(8)])
    checks["flic recount"] = np.array_equal(naive, curve.accuracy)
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report(7, ok, f"{len(checks) - len(failed)}/{len(checks)} metric checks hold"
                  f"{' (failed: ' + ', '.join(failed) + ')' if failed else ''}, {time.perf_counter() - t0:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 8

def test_criterion_08_dropout_contract(report):
    t0 = time.perf_counter()
    r = np.random.default_rng(8)
    w1, b1 = r.uniform(0, 1, (64, 16)), r.uniform(0, 0.1, 64)
    w2, b2 = r.uniform(0, 1, (10, 64)), np.zeros(10)
    x = r.uniform(0, 1, (4, 16))

    def stack(mode, rng=None):
        layer = L.DropoutLayer()
        h = np.maximum(L.dense_forward(w1, b1, x), 0)
        return L.dense_forward(w2, b2, layer.forward(h, mode, rng))

    root = Rng(8)
    acc = np.zeros((4, 10))
    passes = 10_000
    for k in range(passes):
        acc += stack("train", root.derive(k))
    mean, test = acc / passes, stack("test")
    worst = float(np.max(np.abs(mean - test) / np.abs(test)))
    ok = worst < 0.02
    report(8, ok, f"mean of {passes} train passes vs test mode: max rel diff {worst:.4f} (< 0.02), "
                  f"{time.perf_counter() - t0:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 9

def _strip_seconds(text):
    return [line.rsplit(",", 1)[0] for line in text.splitlines()]


@pytest.mark.slow
def test_criterion_09_determinism(report, tmp_path):
    t0 = time.perf_counter()
    runs = {}
    for label, threads in (("a", 1), ("b", 1), ("c", 4)):
        out = tmp_path / label
        code = cli_main(["train", "--spec", "desk", "--n-train", "96", "--n-test", "32", "--epochs", "2",
                         "--batch-size", "32", "--seed", "11", "--threads", str(threads), "--out", str(out),
                         "--quiet", "--no-plots"])
        assert code == 0
        runs[label] = ((out / "model.ckpt").read_bytes(), _strip_seconds((out / "train_log.csv").read_text()))
    same_runs = runs["a"] == runs["b"]
    same_threads = runs["a"] == runs["c"]
    ok = same_runs and same_threads
    report(9, ok, f"identical checkpoint+log across reruns: {same_runs}, threads 1 vs 4: {same_threads}, "
                  f"{time.perf_counter() - t0:.0f}s")
    assert ok


# --------------------------------------------------------------------------- 10

def test_criterion_10_checkpoint_round_trip(report):
    t0 = time.perf_counter()
    spec = net.preset("full")
    state = random_state(spec, Rng(10)).astype(np.float32)
    blob = dumps(state, spec)
    back, spec2 = loads(blob)
    exact = spec2 == spec and all(np.array_equal(back[k], v) for k, v in state.params.items())

    def raised(data):
        try:
            loads(data)
        except Exception as exc:   # noqa: BLE001 - the type is the result
            return type(exc)
        return None

    bad_magic = b"JUNK" + blob[4:]
    bad_version = blob[:4] + (99).to_bytes(4, "little") + blob[8:]
    truncated = blob[: len(blob) // 2]
    kinds = (raised(bad_magic), raised(bad_version), raised(truncated))
    distinct = kinds == (BadMagicError, VersionMismatchError, TruncatedCheckpointError)
    ok = exact and distinct
    report(10, ok, f"bit-exact round trip: {exact}; corruption errors: "
                   f"{', '.join(k.__name__ if k else 'none' for k in kinds)}, {time.perf_counter() - t0:.1f}s")
    assert ok
