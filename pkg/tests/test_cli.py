import json
import subprocess
import sys

import numpy as np
import pytest

from mtlpose.cli import build_parser, main
from mtlpose.io import ANNOTATIONS

SUBCOMMANDS = ("synth", "train", "ablate", "eval", "predict", "gradcheck", "visualize")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "6", "--seed", "3", "--size", "48", "--out", str(root / "data")]) == 0
    assert main(["train", "--spec", "desk", "--data", str(root / "data"), "--test-data", str(root / "data"),
                 "--epochs", "2", "--batch-size", "3", "--out", str(root / "run"), "--quiet"]) == 0
    return root


def test_synth_writes_count_and_annotations(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--n", "5", "--seed", "7", "--size", "32", "--out", tmp_path)
    assert code == 0
    lines = (tmp_path / ANNOTATIONS).read_text().splitlines()
    assert len(lines) == 5 and len(list((tmp_path / "images").iterdir())) == 5
    assert json.loads(lines[0])["image"] == "images/000000.ppm"


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_lists_flags_with_defaults(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        if action.option_strings and action.dest != "help":
            assert action.option_strings[-1] in text
            assert "default" in action.help or "required" in action.help


def test_usage_errors_exit_1(capsys):
    code, _, err = run(capsys, "train", "--bogus")
    assert code == 1 and err.startswith("error: kind=usage msg=")
    code, _, err = run(capsys)
    assert code == 1
    code, _, err = run(capsys, "ablate", "--ratios", "1,-2", "--out", "x")
    assert code == 1 and "ratio" in err


def test_runtime_errors_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "predict", "--ckpt", tmp_path / "missing.ckpt", "--data", tmp_path,
                       "--out", tmp_path / "p.jsonl")
    assert code == 2 and err.count("\n") == 1 and "kind=" in err
    (tmp_path / "bad.ckpt").write_bytes(b"nope" + bytes(20))
    code, _, err = run(capsys, "predict", "--ckpt", tmp_path / "bad.ckpt", "--data", tmp_path,
                       "--out", tmp_path / "p.jsonl")
    assert code == 2 and "kind=bad_magic" in err


def test_train_outputs(trained):
    run_dir = trained / "run"
    for name in ("config.txt", "train_log.csv", "model.ckpt", "train_log.png"):
        assert (run_dir / name).stat().st_size > 0
    rows = (run_dir / "train_log.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_reg,train_det,test_reg,test_det,seconds" and len(rows) == 3
    assert "epochs = 2" in (run_dir / "config.txt").read_text()


def test_config_file_sits_under_flags(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("epochs = 1\nbatch_size = 4\nlearning_rate = 0.5\n")
    code, out, _ = run(capsys, "train", "--spec", "tiny", "--n-train", "4", "--n-test", "2", "--config",
                       tmp_path / "c.txt", "--lr", "0.001", "--out", tmp_path / "r", "--no-plots")
    assert code == 0
    cfg = (tmp_path / "r" / "config.txt").read_text()
    assert "learning_rate = 0.001" in cfg and "batch_size = 4" in cfg
    assert len(out.splitlines()) == 2
    assert not (tmp_path / "r" / "train_log.png").exists()


def test_predict_then_eval(trained, capsys, tmp_path):
    pred = tmp_path / "pred.jsonl"
    code, _, _ = run(capsys, "predict", "--ckpt", trained / "run" / "model.ckpt", "--data", trained / "data",
                     "--out", pred)
    assert code == 0 and len(pred.read_text().splitlines()) == 6
    code, out, _ = run(capsys, "eval", "--pred", pred, "--gt", trained / "data", "--metric", "pcp")
    assert code == 0 and out.splitlines()[0] == "part,pcp_percent" and len(out.splitlines()) == 7
    code, _, _ = run(capsys, "eval", "--pred", pred, "--gt", trained / "data", "--metric", "flic",
                     "--out", tmp_path / "flic.csv")
    assert code == 0
    assert (tmp_path / "flic.csv").read_text().startswith("joint,r,accuracy\nnose,1,")
    assert (tmp_path / "flic.png").stat().st_size > 0


def test_eval_perfect_predictions(tmp_path, capsys):
    assert run(capsys, "synth", "--n", "4", "--size", "16", "--out", tmp_path)[0] == 0
    recs = [json.loads(line) for line in (tmp_path / ANNOTATIONS).read_text().splitlines()]
    pred = tmp_path / "pred.jsonl"
    pred.write_text("".join(json.dumps({"image": r["image"], "joints": r["joints"]}) + "\n" for r in recs[::-1]))
    code, out, _ = run(capsys, "eval", "--pred", pred, "--gt", tmp_path, "--include-head")
    assert code == 0 and all(line.endswith(",100.0") for line in out.splitlines()[1:])
    pred.write_text(json.dumps({"image": recs[0]["image"], "joints": recs[0]["joints"]}) + "\n")
    code, _, err = run(capsys, "eval", "--pred", pred, "--gt", tmp_path)
    assert code == 2 and "no prediction" in err


def test_gradcheck_pass_and_fail(capsys):
    code, out, _ = run(capsys, "gradcheck", "--spec", "tiny", "--seeds", "2")
    assert code == 0 and out.splitlines()[-1].endswith("PASS")
    code, out, err = run(capsys, "gradcheck", "--spec", "tiny", "--seeds", "1", "--tol", "1e-30")
    assert code == 2 and out.splitlines()[-1].endswith("FAIL") and "kind=check_failed" in err


def test_visualize_layout_and_locality(trained, capsys, tmp_path):
    code, _, _ = run(capsys, "visualize", "--ckpt", trained / "run" / "model.ckpt", "--data", trained / "data",
                     "--layer", "2", "--maps", "0,3", "--size", "8", "--out", tmp_path / "viz")
    assert code == 0
    for m in (0, 3):
        d = tmp_path / "viz" / "layer_2" / f"map_{m}"
        assert (d / "avg.ppm").exists()
        assert len((d / "patches.csv").read_text().splitlines()) == 7
    assert (tmp_path / "viz" / "layer_2" / "maps.png").exists()
    code, _, err = run(capsys, "visualize", "--ckpt", trained / "run" / "model.ckpt", "--data", trained / "data",
                       "--layer", "reg.fc1", "--out", tmp_path / "viz")
    assert code == 2 and "kind=locality_violation" in err


def test_ablate_rows_and_files(tmp_path, capsys):
    code, out, _ = run(capsys, "ablate", "--spec", "tiny", "--ratios", "0,0.5,1,2,4,1e10,inf", "--seed", "7",
                       "--n-train", "4", "--n-test", "2", "--epochs", "1", "--batch-size", "4",
                       "--out", tmp_path / "abl")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "ratio,lambda_r,lambda_d,train_reg,test_reg,train_det,test_det"
    assert [line.split(",")[0] for line in lines[1:]] == ["0", "0.5", "1", "2", "4", "1e+10", "inf"]
    assert (tmp_path / "abl" / "ablation.csv").read_text() == out
    assert len(list((tmp_path / "abl" / "logs").iterdir())) == 7
    assert (tmp_path / "abl" / "ablation.png").exists() and (tmp_path / "abl" / "ablation_curves.png").exists()


def _strip_seconds(text):
    return [line.rsplit(",", 1)[0] for line in text.splitlines()]


def test_train_is_reproducible_including_figures(tmp_path):
    outs = []
    for k, threads in enumerate((1, 2)):
        d = tmp_path / f"r{k}"
        assert main(["train", "--spec", "tiny", "--n-train", "8", "--n-test", "4", "--epochs", "2",
                     "--batch-size", "4", "--seed", "5", "--threads", str(threads), "--out", str(d),
                     "--quiet"]) == 0
        outs.append(d)
    a, b = outs
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    assert _strip_seconds((a / "train_log.csv").read_text()) == _strip_seconds((b / "train_log.csv").read_text())
    assert (a / "config.txt").read_text() == (b / "config.txt").read_text()


def test_synth_is_reproducible(tmp_path):
    for k in range(2):
        assert main(["synth", "--n", "3", "--seed", "9", "--size", "24", "--out", str(tmp_path / str(k))]) == 0
    for name in ("images/000000.ppm", "images/000002.ppm", ANNOTATIONS):
        assert (tmp_path / "0" / name).read_bytes() == (tmp_path / "1" / name).read_bytes()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mtlpose", "gradcheck", "--seeds", "1"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "PASS" in res.stdout


def test_train_from_init_checkpoint(trained, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--init-ckpt", trained / "run" / "model.ckpt", "--data", trained / "data",
                     "--test-data", trained / "data", "--epochs", "1", "--lr", "1e-12", "--out", tmp_path,
                     "--quiet", "--no-plots")
    assert code == 0
    from mtlpose.checkpoint import load_checkpoint

    a, _ = load_checkpoint(trained / "run" / "model.ckpt")
    b, _ = load_checkpoint(tmp_path / "model.ckpt")
    assert all(np.allclose(a[k], b[k], atol=1e-6) for k in a.params)
