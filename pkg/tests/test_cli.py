from __future__ import annotations

import configparser
import subprocess
import sys

import numpy as np
import pytest

from ssmcfar import cli
from ssmcfar.errors import NumericError

CONFIG = """\
[scene]
grid = 16, 8
clutter = mixed
snr_db = 12, 18

[model]
N = 4
H = 3

[train]
epochs = 2
batch_size = 4
pos_weight = 4
learning_rate = 3e-3

[cfar]
train = 2
guard = 1
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.ini").write_text(CONFIG)
    assert run("datagen", "--config", root / "cfg.ini", "--out", root / "data", "--count", 14,
               "--seed", 7) == 0
    assert run("train", "--data", root / "data", "--out", root / "run", "--config", root / "cfg.ini",
               "--seed", 1) == 0
    return root


def test_cfar_calibrate_prints_closed_form(capsys):
    assert run("cfar-calibrate", "--variant", "ca", "--ntrain", 16, "--pfa", 0.01) == 0
    assert float(capsys.readouterr().out) == pytest.approx(5.336, abs=1e-3)


def test_datagen_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("datagen", "--out", tmp_path / name, "--count", 10, "--seed", 7) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_selftest_passes(capsys):
    assert run("selftest") == 0
    assert "FAIL" not in capsys.readouterr().out


def test_unknown_flag_is_usage_error(capsys):
    assert run("datagen", "--out", "x", "--frobnicate") == 1
    assert "usage" in capsys.readouterr().err


def test_validation_happens_before_writing(tmp_path):
    assert run("eval", "--data", tmp_path / "missing", "--cfar", "ca", "--out", tmp_path / "out") == 1
    assert not (tmp_path / "out").exists()
    assert run("cfar-calibrate", "--variant", "zz", "--ntrain", 4, "--pfa", 0.1) == 1
    assert run("cfar-calibrate", "--variant", "ca", "--ntrain", 4, "--pfa", 2.0) == 1


def test_runtime_failure_exit_code(monkeypatch):
    def boom(*a, **k):
        raise NumericError("diverged", op="test")

    monkeypatch.setattr(cli, "threshold_factor", boom)
    assert run("cfar-calibrate", "--variant", "os", "--ntrain", 16, "--pfa", 0.01) == 2


def test_flags_override_file_override_defaults(workspace, tmp_path):
    assert run("datagen", "--config", workspace / "cfg.ini", "--out", tmp_path / "d", "--count", 3,
               "--seed", 99) == 0
    echoed = configparser.ConfigParser()
    echoed.optionxform = str
    echoed.read(tmp_path / "d" / "config.ini")
    assert echoed["scene"]["seed"] == "99"          # flag
    assert echoed["scene"]["grid"] == "16, 8"       # file
    assert echoed["scene"]["mask_level"] == "0.25"  # default
    assert echoed["datagen"]["count"] == "3"


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    for name in ("best.ckpt", "last.ckpt", "report.csv", "config.ini", "run.log"):
        assert (run_dir / name).is_file()
    assert (run_dir / "report.csv").read_text().count("\n") == 3


def test_train_and_roc_are_byte_identical(workspace, tmp_path):
    assert run("train", "--data", workspace / "data", "--out", tmp_path / "again", "--config",
               workspace / "cfg.ini", "--seed", 1) == 0
    first = tree_bytes(workspace / "run")
    second = tree_bytes(tmp_path / "again")
    assert first == second
    for name in ("r1", "r2"):
        assert run("roc", "--data", workspace / "data", "--checkpoint", workspace / "run" / "best.ckpt",
                   "--config", workspace / "cfg.ini", "--out", tmp_path / name) == 0
    assert tree_bytes(tmp_path / "r1") == tree_bytes(tmp_path / "r2")
    rows = (tmp_path / "r1" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "method,pd,pf,hits,fas,targets,background" and len(rows) == 6
    assert (tmp_path / "r1" / "roc_model.csv").is_file() and (tmp_path / "r1" / "roc_OS.csv").is_file()


def test_eval_model_and_cfar(workspace, tmp_path):
    assert run("eval", "--data", workspace / "data", "--checkpoint", workspace / "run" / "best.ckpt",
               "--config", workspace / "cfg.ini", "--out", tmp_path / "m") == 0
    assert (tmp_path / "m" / "metrics.csv").read_text().splitlines()[1].startswith("model,")
    assert run("eval", "--data", workspace / "data", "--cfar", "variant=go,pfa=1e-2",
               "--config", workspace / "cfg.ini", "--out", tmp_path / "c") == 0
    assert (tmp_path / "c" / "metrics.csv").read_text().splitlines()[1].startswith("GO,")
    # exactly one detector must be named
    assert run("eval", "--data", workspace / "data", "--out", tmp_path / "none") == 1


def test_detect_writes_mask_and_panel(workspace, tmp_path):
    frame = np.fromfile(workspace / "data" / "000000.frame.f32", dtype="<f4").reshape(16, 8)
    np.save(tmp_path / "f.npy", frame)
    assert run("detect", "--checkpoint", workspace / "run" / "best.ckpt", "--frame", tmp_path / "f.npy",
               "--out", tmp_path / "d") == 0
    mask = np.fromfile(tmp_path / "d" / "mask.u8", dtype=np.uint8)
    assert mask.size == 128 and set(np.unique(mask)) <= {0, 1}
    assert (tmp_path / "d" / "panel.pgm").read_bytes().startswith(b"P5\n")
    assert run("detect", "--cfar", "so", "--config", workspace / "cfg.ini",
               "--frame", workspace / "data" / "000000.frame.f32", "--out", tmp_path / "e") == 0
    assert run("detect", "--cfar", "ca", "--frame", tmp_path / "f.npy", "--tau", 1.5,
               "--out", tmp_path / "bad") == 1
    assert not (tmp_path / "bad").exists()


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "ssmcfar.cli", "cfar-calibrate", "--variant", "ca",
                          "--ntrain", "1", "--pfa", "0.5"], capture_output=True, text=True, check=True)
    assert float(out.stdout) == pytest.approx(1.0)
