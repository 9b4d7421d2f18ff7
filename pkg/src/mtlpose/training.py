"""Mini-batch SGD with momentum for the two-headed network."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import network as net
from .checkpoint import save_checkpoint
from .data import Dataset
from .errors import DivergenceError, InvalidArgumentError, InvalidStateError
from .tensor import STREAM_DROPOUT, STREAM_SHUFFLE, Rng

LOG_HEADER = "epoch,train_reg,train_det,test_reg,test_det,seconds"
ABLATION_HEADER = "ratio,lambda_r,lambda_d,train_reg,test_reg,train_det,test_det"
TABLE_RATIOS = (0.0, 0.5, 1.0, 2.0, 4.0, 1e10, math.inf)



@dataclass
class TrainConfig:
    lambda_r: float = 1.0
    lambda_d: float = 1.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    lr_decay: float = 0.98
    checkpoint_every: int = 0
    threads: int = 1
    eval_train: bool = True

    def __post_init__(self):
        net.LossWeights(self.lambda_r, self.lambda_d)  # validates
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError("momentum must be in [0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise InvalidArgumentError("lr_decay must be in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1 or self.threads < 1:
            raise InvalidArgumentError("batch_size, epochs and threads must be >= 1")

    @property
    def weights(self) -> net.LossWeights:
        return net.LossWeights(self.lambda_r, self.lambda_d)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise InvalidArgumentError(f"unknown config key {key!r}")
            kind = types[key]
            if kind == "bool":
                kwargs[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif kind == "int":
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class LogRow:
    epoch: int
    train_reg: float
    train_det: float
    test_reg: float
    test_det: float
    seconds: float

    def csv(self) -> str:
        vals = [str(self.epoch)] + [_fmt(v) for v in
                                    (self.train_reg, self.train_det, self.test_reg, self.test_det)]
        return ",".join(vals) + f",{self.seconds:.3f}"


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    path: Path | None = None

    def open(self, path) -> None:
        self.path = Path(path)
        self.path.write_text(LOG_HEADER + "\n")

    def append(self, row: LogRow) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(row.csv() + "\n")
                fh.flush()

    def to_csv(self) -> str:
        return "\n".join([LOG_HEADER] + [r.csv() for r in self.rows]) + "\n"

    def final(self) -> LogRow:
        return self.rows[-1]


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float):
    """``v = momentum * v - lr * g; w = w + v``, in place. Returns ``(params, velocity)``."""
    if set(grads) != set(params):
        raise InvalidStateError("gradient keys do not match parameter keys")
    for k, w in params.items():
        v = velocity.get(k)
        if v is None:
            v = velocity[k] = np.zeros_like(w)
        v *= w.dtype.type(momentum)
        v -= w.dtype.type(lr) * grads[k].astype(w.dtype, copy=False)
        w += v
    return params, velocity


def evaluate(state, spec, data: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """Test-mode mean regression and detection losses over a dataset."""
    reg = det = 0.0
    for s in range(0, len(data), batch_size):
        out, _ = net.forward(state, spec, data.images[s:s + batch_size], "test")
        reg += float(net.regression_loss(out.joints, data.joints[s:s + batch_size]).sum())
        det += float(net.detection_loss(out.detections, data.indicators[s:s + batch_size]).sum())
    return reg / len(data), det / len(data)


def train(spec: net.NetworkSpec, config: TrainConfig, train_set: Dataset, test_set: Dataset | None = None,
          state: net.NetworkState | None = None, log_path=None, checkpoint_path=None, verbose=False):
    """Train from ``state`` (or a fresh seeded init). Returns ``(state, TrainLog)``.

    Every random choice (init, shuffling, dropout masks) is derived from
    ``config.seed``, so the same inputs give bit-identical results.
    """
    if train_set is None or len(train_set) == 0:
        raise InvalidArgumentError("training set is empty")
    root = Rng(config.seed)
    if state is None:
        state = net.init_state(spec, config.seed)
    state = state.copy()
    state.check(spec)
    state.training = True
    weights = config.weights
    velocity = {}
    log = TrainLog()
    if log_path is not None:
        log.open(log_path)
    images = train_set.images
    joints = train_set.joints.reshape(len(train_set), -1)
    indicators = train_set.indicators.reshape(len(train_set), -1)
    lr = config.learning_rate
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = root.derive(STREAM_SHUFFLE, epoch).permutation(n)
        run_reg = run_det = 0.0
        for b, s in enumerate(range(0, n, config.batch_size)):
            idx = np.sort(order[s:s + config.batch_size])
            mask_rng = root.derive(STREAM_DROPOUT, epoch, b)
            masks = net.sample_dropout_masks(spec, [mask_rng.derive(i) for i in range(len(idx))])
            res = net.batch_gradients(state, spec, images[idx], joints[idx], indicators[idx], weights,
                                      masks, "train", config.threads)
            if not math.isfinite(res.loss):
                raise DivergenceError(epoch, b, res.loss)
            sgd_step(state.params, res.grads, velocity, lr, config.momentum)
            run_reg += res.reg_loss * len(idx)
            run_det += res.det_loss * len(idx)
        if config.eval_train:
            tr_reg, tr_det = evaluate(state, spec, train_set)
        else:
            tr_reg, tr_det = run_reg / n, run_det / n
        te_reg = te_det = math.nan
        if test_set is not None:
            te_reg, te_det = evaluate(state, spec, test_set)
        row = LogRow(epoch, tr_reg, tr_det, te_reg, te_det, time.perf_counter() - t0)
        for v in (tr_reg, tr_det):
            if not math.isfinite(v):
                raise DivergenceError(epoch, -1, v)
        log.append(row)
        if verbose:
            print(row.csv(), flush=True)
        if checkpoint_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(state, spec, checkpoint_path)
        lr *= config.lr_decay
    state.training = False
    if checkpoint_path:
        save_checkpoint(state, spec, checkpoint_path)
    return state, log


@dataclass
class AblationRow:
    ratio: float
    lambda_r: float
    lambda_d: float
    train_reg: float | None
    test_reg: float | None
    train_det: float | None
    test_det: float | None

    def csv(self) -> str:
        return ",".join([format_ratio(self.ratio), _fmt(self.lambda_r), _fmt(self.lambda_d),
                         _fmt(self.train_reg), _fmt(self.test_reg), _fmt(self.train_det), _fmt(self.test_det)])


def format_ratio(r: float) -> str:
    return "inf" if math.isinf(r) else f"{r:g}"


def parse_ratios(text: str) -> list[float]:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if not tok:
            continue
        r = math.inf if tok in ("inf", "infinity", "∞") else float(tok)
        if r < 0 or math.isnan(r):
            raise InvalidArgumentError(f"ratio must be >= 0, got {tok!r}")
        out.append(r)
    if not out:
        raise InvalidArgumentError("empty ratio list")
    return out


def ablation_sweep(spec, base: TrainConfig, ratios, train_set: Dataset, test_set: Dataset,
                   verbose=False, logs=None) -> list[AblationRow]:
    """One training run per ``lambda_r / lambda_d`` ratio, same seed and data.

    Ratio ``inf`` trains regression only and leaves the detection columns
    empty; ratio 0 does the reverse.
    """
    rows = []
    for r in ratios:
        w = net.LossWeights.from_ratio(r)
        cfg = replace(base, lambda_r=w.lambda_r, lambda_d=w.lambda_d)
        _, log = train(spec, cfg, train_set, test_set, verbose=verbose)
        if logs is not None:
            logs[format_ratio(r)] = log
        last = log.final()
        reg_on, det_on = w.lambda_r > 0, w.lambda_d > 0
        rows.append(AblationRow(r, w.lambda_r, w.lambda_d,
                                last.train_reg if reg_on else None, last.test_reg if reg_on else None,
                                last.train_det if det_on else None, last.test_det if det_on else None))
    return rows


def ablation_csv(rows) -> str:
    return "\n".join([ABLATION_HEADER] + [r.csv() for r in rows]) + "\n"


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
