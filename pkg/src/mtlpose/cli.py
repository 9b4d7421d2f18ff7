"""Command-line front end.

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors. Errors are
reported as a single ``error: kind=<kind> msg=<text>`` line on stderr.
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import gradcheck as gc
from . import introspect as viz
from . import network as net
from . import training as tr
from .checkpoint import load_checkpoint
from .data import Dataset
from .errors import InvalidArgumentError, MtlPoseError
from .io import read_dataset, read_records, write_dataset, write_predictions
from .synth import synth_dataset

PROG = "mtlpose"
_TRAIN_DEFAULTS = tr.TrainConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message} (see {self.prog} --help)")


def _fmt_default(v):
    return "inf" if isinstance(v, float) and math.isinf(v) else v


def _kind(exc: BaseException) -> str:
    name = type(exc).__name__
    if name.endswith("Error") and name != "Error":
        name = name[:-5]
    out = "".join("_" + c.lower() if c.isupper() else c for c in name).lstrip("_")
    return out or "error"


def _report(kind: str, msg: str) -> None:
    msg = " ".join(str(msg).split())
    print(f"error: kind={kind} msg={msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# shared flag groups

def _add_train_flags(p):
    """Optimizer flags. Defaults are ``None`` so a config file can sit underneath."""
    d = _TRAIN_DEFAULTS
    g = p.add_argument_group("optimization (override --config)")
    g.add_argument("--lambda-r", type=float, help=f"regression loss weight (default: {d.lambda_r})")
    g.add_argument("--lambda-d", type=float, help=f"detection loss weight (default: {d.lambda_d})")
    g.add_argument("--lr", dest="learning_rate", type=float, help=f"learning rate (default: {d.learning_rate})")
    g.add_argument("--momentum", type=float, help=f"SGD momentum (default: {d.momentum})")
    g.add_argument("--batch-size", type=int, help=f"mini-batch size (default: {d.batch_size})")
    g.add_argument("--epochs", type=int, help=f"training epochs (default: {d.epochs})")
    g.add_argument("--lr-decay", type=float, help=f"per-epoch learning-rate factor (default: {d.lr_decay})")
    g.add_argument("--checkpoint-every", type=int,
                   help=f"also checkpoint every N epochs, 0 = only at the end (default: {d.checkpoint_every})")
    g.add_argument("--eval-train", choices=("yes", "no"),
                   help="re-evaluate the training set in test mode each epoch; 'no' logs running "
                        "train-mode averages instead (default: yes)")
    p.add_argument("--config", type=Path, help="flat key = value file with optimizer settings (default: none)")


def _add_data_flags(p, need_test=True):
    p.add_argument("--data", type=Path,
                   help="training annotations (file or directory); omitted = synthesize from --seed (default: none)")
    if need_test:
        p.add_argument("--test-data", type=Path, help="test annotations; omitted = synthesize (default: none)")
    p.add_argument("--n-train", type=int, default=2000, help="synthetic training samples when --data is omitted (default: %(default)s)")
    p.add_argument("--n-test", type=int, default=500, help="synthetic test samples when --test-data is omitted (default: %(default)s)")


def _common(p):
    d = _TRAIN_DEFAULTS
    p.add_argument("--seed", type=int, help=f"root seed for every random choice (default: {d.seed})")
    p.add_argument("--threads", type=int,
                   help=f"worker threads per batch; results do not depend on it (default: {d.threads})")


def _plots_flag(p):
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures (default: figures on)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog=PROG, description="Two-headed pose network: synthesis, training, evaluation, introspection.",
                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic annotated dataset", formatter_class=fmt)
    p.add_argument("--n", type=int, required=True, help="number of samples (required)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default: %(default)s)")
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")
    p.add_argument("--size", type=int, default=112, help="image side in pixels (default: %(default)s)")
    p.add_argument("--noise", type=float, default=0.03, help="pixel noise stddev (default: %(default)s)")
    p.add_argument("--clutter", type=int, default=4, help="distractor strokes per image (default: %(default)s)")
    p.add_argument("--start", type=int, default=0, help="index of the first sample (default: %(default)s)")

    p = sub.add_parser("train", help="train a network and write log + checkpoint", formatter_class=fmt)
    _add_data_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")
    p.add_argument("--spec", default="full", choices=sorted(net.PRESETS), help="network preset (default: %(default)s)")
    p.add_argument("--init-ckpt", type=Path, help="start from this checkpoint instead of a fresh init (default: none)")
    _add_train_flags(p)
    _common(p)
    _plots_flag(p)
    p.add_argument("--quiet", action="store_true", help="do not echo log rows to stdout (default: echo)")

    p = sub.add_parser("ablate", help="sweep lambda_r / lambda_d and tabulate final losses", formatter_class=fmt)
    p.add_argument("--ratios", default="0,0.5,1,2,4,1e10,inf",
                   help="comma-separated ratios, 'inf' allowed (default: %(default)s)")
    _add_data_flags(p)
    p.add_argument("--out", type=Path, default=Path("ablation"), help="output directory (default: %(default)s)")
    p.add_argument("--spec", default="full", choices=sorted(net.PRESETS), help="network preset (default: %(default)s)")
    _add_train_flags(p)
    _common(p)
    _plots_flag(p)

    p = sub.add_parser("eval", help="score predictions against ground truth", formatter_class=fmt)
    p.add_argument("--pred", type=Path, required=True, help="prediction JSON-lines file (required)")
    p.add_argument("--gt", type=Path, required=True, help="ground-truth annotations (required)")
    p.add_argument("--metric", choices=("pcp", "flic"), default="pcp", help="metric (default: %(default)s)")
    p.add_argument("--alpha", type=float, default=ev.ALPHA, help="PCP threshold factor (default: %(default)s)")
    p.add_argument("--include-head", action="store_true", help="also score the head stick in PCP (default: off)")
    p.add_argument("--out", default="-", help="CSV output path, '-' = stdout (default: %(default)s)")
    _plots_flag(p)

    p = sub.add_parser("predict", help="run a checkpoint over a dataset", formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file (required)")
    p.add_argument("--data", type=Path, required=True, help="annotations to predict on (required)")
    p.add_argument("--out", type=Path, required=True, help="prediction JSON-lines file (required)")
    p.add_argument("--batch-size", type=int, default=64, help="inference batch size (default: %(default)s)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass", formatter_class=fmt)
    p.add_argument("--spec", default="tiny", choices=sorted(net.PRESETS), help="network preset (default: %(default)s)")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step (default: %(default)s)")
    p.add_argument("--tol", type=float, default=1e-5, help="max relative error to pass (default: %(default)s)")
    p.add_argument("--seeds", type=int, default=20, help="number of random seeds (default: %(default)s)")
    p.add_argument("--max-entries", type=int, default=None,
                   help="sampled entries per parameter tensor (default: all for tiny, 8 otherwise)")
    p.add_argument("--mode", choices=("train", "test"), default="train", help="dropout mode (default: %(default)s)")

    p = sub.add_parser("visualize", help="average max-activation patches per feature map", formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file (required)")
    p.add_argument("--data", type=Path, required=True, help="annotations whose images are scanned (required)")
    p.add_argument("--layer", default="3",
                   help="conv stage number k, or a trunk layer name such as conv2 / relu2 / pool2 (default: %(default)s)")
    p.add_argument("--maps", default="all", help="comma-separated map indices (default: %(default)s)")
    p.add_argument("--size", type=int, default=32, help="side of the averaged patch (default: %(default)s)")
    p.add_argument("--limit", type=int, default=0, help="scan at most N images, 0 = all (default: %(default)s)")
    p.add_argument("--out", type=Path, default=Path("viz"), help="output directory (default: %(default)s)")
    _plots_flag(p)
    return parser


# ---------------------------------------------------------------------------
# helpers

def _train_config(args) -> tr.TrainConfig:
    values = {}
    if args.config is not None:
        try:
            values = tr.read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
    names = {f.name for f in fields(tr.TrainConfig)}
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = "true" if v == "yes" else "false" if v == "no" else v
    try:
        config = tr.TrainConfig.from_mapping(values)
    except (ValueError, InvalidArgumentError) as exc:
        raise UsageError(str(exc)) from None
    args.seed = config.seed
    return config


def _load_data(args, spec: net.NetworkSpec) -> tuple[Dataset, Dataset]:
    size = spec.input_size
    if args.data is not None:
        train_set = read_dataset(args.data, size)
    else:
        train_set = Dataset.from_samples(synth_dataset(args.n_train, args.seed, size))
    if args.test_data is not None:
        test_set = read_dataset(args.test_data, size)
    else:
        # disjoint indices of the same synthetic stream
        test_set = Dataset.from_samples(synth_dataset(args.n_test, args.seed, size, start=args.n_train))
    return train_set, test_set


def _write_config(path: Path, config: tr.TrainConfig, spec_name: str) -> None:
    lines = [f"{k} = {_fmt_default(v)}" for k, v in tr.config_dict(config).items() if k != "threads"]
    lines.append(f"# spec = {spec_name}")
    path.write_text("\n".join(lines) + "\n")


def _write_text(dest: str, text: str) -> None:
    if dest == "-":
        sys.stdout.write(text)
    else:
        Path(dest).write_text(text)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    samples = synth_dataset(args.n, args.seed, args.size, args.noise, args.clutter, args.start)
    write_dataset(samples, args.out)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    spec = net.preset(args.spec)
    state = None
    if args.init_ckpt is not None:
        state, spec = load_checkpoint(args.init_ckpt)
    train_set, test_set = _load_data(args, spec)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out / "config.txt", config, args.spec)
    if not args.quiet:
        print(tr.LOG_HEADER, flush=True)
    _, log = tr.train(spec, config, train_set, test_set, state=state, log_path=out / "train_log.csv",
                      checkpoint_path=out / "model.ckpt", verbose=not args.quiet)
    if not args.no_plots:
        from .plotting import plot_train_log

        plot_train_log(log, out / "train_log.png")
    return 0


def cmd_ablate(args) -> int:
    try:
        ratios = tr.parse_ratios(args.ratios)
    except (ValueError, InvalidArgumentError) as exc:
        raise UsageError(f"--ratios: {exc}") from None
    config = _train_config(args)
    spec = net.preset(args.spec)
    train_set, test_set = _load_data(args, spec)
    out = args.out
    (out / "logs").mkdir(parents=True, exist_ok=True)
    logs = {}
    rows = tr.ablation_sweep(spec, config, ratios, train_set, test_set, logs=logs)
    for name, log in logs.items():
        (out / "logs" / f"ratio_{name}.csv").write_text(log.to_csv())
    text = tr.ablation_csv(rows)
    (out / "ablation.csv").write_text(text)
    sys.stdout.write(text)
    if not args.no_plots:
        from .plotting import plot_ablation

        plot_ablation(rows, out / "ablation.png", logs)
    return 0


def _match(pred_path, gt_path):
    preds = {r["image"]: r["joints"] for r in read_records(pred_path) if "image" in r}
    gts = [r for r in read_records(gt_path) if not r.get("occluded", False)]
    est, truth, norms = [], [], []
    for rec in gts:
        if rec["image"] not in preds:
            raise InvalidArgumentError(f"no prediction for {rec['image']}")
        est.append(preds[rec["image"]])
        truth.append(rec["joints"])
        norms.append(rec.get("normalizer"))
    if not truth:
        raise InvalidArgumentError("ground truth has no usable records")
    return np.asarray(est, float), np.asarray(truth, float), norms


def cmd_eval(args) -> int:
    if not args.alpha > 0:
        raise UsageError("--alpha must be > 0")
    est, truth, norms = _match(args.pred, args.gt)
    figure = None if args.no_plots or args.out == "-" else Path(args.out).with_suffix(".png")
    if args.metric == "pcp":
        parts = ev.PART_NAMES if args.include_head else ev.DEFAULT_PARTS
        res = ev.pcp_dataset(est, truth, args.alpha, parts)
        _write_text(args.out, res.csv())
        for name in res.excluded:
            print(f"warning: part {name} excluded (zero-length ground truth)", file=sys.stderr)
        if figure:
            from .plotting import plot_pcp

            plot_pcp(res, figure)
    else:
        if any(n is None for n in norms):
            raise InvalidArgumentError("flic metric needs a 'normalizer' pair on every ground-truth record")
        curve = ev.flic_accuracy(est, truth, np.asarray(norms, float))
        _write_text(args.out, curve.csv())
        if curve.excluded:
            print(f"warning: {curve.excluded} samples excluded (zero normalizer distance)", file=sys.stderr)
        if figure:
            from .plotting import plot_accuracy

            plot_accuracy(curve, figure)
    return 0


def cmd_predict(args) -> int:
    if args.batch_size < 1:
        raise UsageError("--batch-size must be >= 1")
    state, spec = load_checkpoint(args.ckpt)
    data = read_dataset(args.data, spec.input_size)
    joints = net.predict(state, spec, data.images, args.batch_size).joints
    write_predictions(args.out, data.names, joints)
    print(f"wrote {len(data)} predictions to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.seeds < 1 or not args.eps > 0:
        raise UsageError("--seeds must be >= 1 and --eps > 0")
    spec = net.preset(args.spec)
    entries = args.max_entries
    if entries is None and args.spec != "tiny":
        entries = 8
    worst = None
    for seed in range(args.seeds):
        res = gc.check_network(spec, seed, h=args.eps, max_entries=entries, mode=args.mode)
        print(f"seed={seed} max_rel_error={res.max_rel_error:.3e} worst={res.worst} checked={res.checked}")
        if worst is None or res.max_rel_error > worst.max_rel_error:
            worst = res
    verdict = "PASS" if worst.max_rel_error < args.tol else "FAIL"
    print(f"max_rel_error={worst.max_rel_error:.3e} tol={args.tol:g} {verdict}")
    if verdict == "FAIL":
        _report("check_failed", f"max relative error {worst.max_rel_error:.3e} at {worst.worst} exceeds {args.tol:g}")
        return 2
    return 0


def _layer_name(text: str) -> tuple[str, int]:
    if text.isdigit():
        return f"conv{int(text)}", int(text)
    digits = "".join(c for c in text if c.isdigit())
    if text.startswith(("conv", "relu", "pool")) and digits and text[4:] == digits:
        return text, int(digits)
    return text, 0


def cmd_visualize(args) -> int:
    state, spec = load_checkpoint(args.ckpt)
    name, k = _layer_name(args.layer)
    viz.descriptors(spec, name)      # rejects dense and unknown layers before any work
    data = read_dataset(args.data, spec.input_size)
    images = data.images[:args.limit] if args.limit > 0 else data.images
    n_maps = spec.trunk[k - 1].maps
    if args.maps == "all":
        maps = list(range(n_maps))
    else:
        try:
            maps = [int(m) for m in args.maps.split(",") if m.strip()]
        except ValueError:
            raise UsageError(f"--maps: expected integers, got {args.maps!r}") from None
    averages = []
    for m in maps:
        patches = viz.max_activation_patches(state, spec, images, name, m)
        d = viz.write_visualization(args.out, k, m, patches, args.size)
        averages.append(viz.average_patches(patches, args.size))
        print(f"{d}")
    if not args.no_plots and averages:
        from .plotting import plot_patch_grid

        plot_patch_grid(averages, Path(args.out) / f"layer_{k}" / "maps.png")
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "ablate": cmd_ablate, "eval": cmd_eval,
    "predict": cmd_predict, "gradcheck": cmd_gradcheck, "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _report("usage", exc)
        return 1
    except (MtlPoseError, OSError, ValueError) as exc:
        _report(_kind(exc), exc)
        return 2
    except KeyboardInterrupt:
        _report("interrupted", "interrupted")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
