"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Criterion 7 trains a detector on a 500/100/100 synthetic split, which takes
several minutes on one CPU core.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from conftest import record_criterion
from ssmcfar import autodiff as ad
from ssmcfar import cli
from ssmcfar import evaluation as ev
from ssmcfar.cfar import CfarConfig, CfarVariant, CfarWindow, cfar_detect_1d, threshold_factor
from ssmcfar.datagen import SceneConfig, gen_dataset, generate, load_dataset
from ssmcfar.model import (DetectorConfig, count_params, forward, init_model, load_checkpoint,
                           save_checkpoint)
from ssmcfar.ssm import (ContinuousSSM, DiscreteSSM, conv_forward, discretize_bilinear, hippo_legt,
                         krylov_kernel, picard_solve, ssm_recurrent_forward)
from ssmcfar.train import TrainConfig, train


def test_criterion_1_recurrence_equals_convolution():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(100):
        N = int(rng.integers(1, 65))
        L = int(rng.integers(1, 2049))
        if i % 2:
            A, B = hippo_legt(N, theta=float(rng.uniform(0.5, 2.0)))
        else:
            m = rng.normal(size=(N, N)) / np.sqrt(N)
            A = m - (np.max(np.linalg.eigvals(m).real) + 0.1) * np.eye(N)
            B = rng.normal(size=N)
        d = discretize_bilinear(ContinuousSSM(A, B, rng.normal(size=N), float(rng.normal())),
                                float(np.exp(rng.uniform(np.log(1e-3), np.log(1e-1)))))
        u = rng.normal(size=L)
        y_rec = ssm_recurrent_forward(d, u)
        y_conv = conv_forward(krylov_kernel(d, L), u, d.D)
        worst = max(worst, float(np.max(np.abs(y_rec - y_conv))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 60
    assert record_criterion(1, "equivalence", ok, f"max |recurrent - conv| = {worst:.2e} over 100 "
                            f"instances in {elapsed:.1f} s (need < 1e-8, < 60 s)")


def scalar_error(dt):
    ssm = ContinuousSSM([[-1.0]], [1.0], [1.0])
    y = ssm_recurrent_forward(discretize_bilinear(ssm, dt), np.ones(int(round(1 / dt))))
    return abs(y[-1] - (1 - np.exp(-1.0)))


def test_criterion_2_discretization_order():
    ratio = scalar_error(0.02) / scalar_error(0.01)
    ok = 3.0 <= ratio <= 5.0
    assert record_criterion(2, "discretization order", ok, f"error ratio under dt halving = {ratio:.4f} "
                            "(need in [3, 5])")


def test_criterion_3_picard_oracle():
    ssm = ContinuousSSM([[-1.0]], [1.0], [1.0])
    u, dt = np.ones(100), 0.01
    x = picard_solve(ssm, u, dt, 200)
    _, states = ssm_recurrent_forward(discretize_bilinear(ssm, dt), u, return_states=True)
    gap = float(np.max(np.abs(x - states)))
    assert record_criterion(3, "Picard oracle", gap < 1e-6, f"sup-norm gap to recurrence = {gap:.2e} "
                            "(need < 1e-6)")


def test_criterion_4_gradcheck():
    start = time.perf_counter()
    model = init_model(DetectorConfig(L=32, N=4, H=2, num_blocks=2, seed=0))
    rng = np.random.default_rng(0)
    x = rng.exponential(size=(2, 8, 4))
    y = (rng.random((2, 32)) < 0.2).astype(float)
    report = ad.gradcheck(lambda: ad.bce_loss(forward(model, x), y, 3.0), model.params, tolerance=1e-4)
    elapsed = time.perf_counter() - start
    worst = max(e.max_rel_error for e in report.entries)
    ok = report.passed and len(report.entries) == len(model.params) and elapsed < 120
    assert record_criterion(4, "gradcheck", ok, f"{len(report.entries)} tensors, worst relative error "
                            f"{worst:.2e} in {elapsed:.1f} s (need < 1e-4, < 120 s)")


def test_criterion_5_cfar_calibration():
    start = time.perf_counter()
    window = CfarWindow(8, 2)
    rng = np.random.default_rng(5)
    results = []
    for target in (1e-2, 1e-3):
        T = threshold_factor("ca", window.n_train, target)
        u = rng.exponential(size=1_000_000 + window.span[0] - 1)
        out = cfar_detect_1d(u, CfarConfig(CfarVariant("CA"), window, T))
        n_valid = int(out.valid_mask().sum())
        results.append((target, out.mask.sum() / n_valid, n_valid))
    elapsed = time.perf_counter() - start
    ok = all(abs(p - t) / t <= 0.2 and n >= 1_000_000 for t, p, n in results) and elapsed < 60
    detail = ", ".join(f"target {t:g} -> {p:.3e}" for t, p, _ in results)
    assert record_criterion(5, "CFAR calibration", ok, f"{detail} over 1e6 cells in {elapsed:.1f} s "
                            "(need within 20%, < 60 s)")


def test_criterion_6_parameter_budget():
    n = count_params(init_model(DetectorConfig(L=8, N=256, H=256, num_blocks=2)))
    ok = n == 264_704 and abs(n - 260_000) / 260_000 <= 0.02
    assert record_criterion(6, "parameter budget", ok, f"count_params = {n} (need 264704)")


# ---------------------------------------------------------------- criterion 7

SURROGATE_SCENE = SceneConfig(grid=(64, 32), n_targets=(1, 3), snr_db=(10.0, 20.0), clutter="mixed",
                              seed=2024)
SURROGATE_MODEL = DetectorConfig(L=64 * 32, N=32, H=32, num_blocks=2, seed=0)
SURROGATE_TRAIN = TrainConfig(learning_rate=3e-3, epochs=15, batch_size=10, pos_weight=5.0, seed=0)


@pytest.fixture(scope="module")
def surrogate():
    dataset = generate(SURROGATE_SCENE, 700, counts=(500, 100, 100))
    start = time.perf_counter()
    best, report = train(init_model(SURROGATE_MODEL), dataset, SURROGATE_TRAIN)
    elapsed = time.perf_counter() - start
    test = dataset.split("test")
    window = CfarWindow.default_2d()
    valid = ev.cfar_valid_mask(SURROGATE_SCENE.grid, window)
    metrics = ev.model_metrics(best, test, 0.5, valid)
    model_auc = ev.roc_model(best, test, valid).auc
    cfar_auc = {v: ev.roc_cfar(v, window, test, valid=valid).auc for v in ("CA", "OS", "GO", "SO")}
    return dict(elapsed=elapsed, metrics=metrics, model_auc=model_auc, cfar_auc=cfar_auc)


def test_criterion_7_operating_point(surrogate):
    m, t = surrogate["metrics"], surrogate["elapsed"]
    ok = m.pd >= 0.90 and m.pf <= 0.01 and t <= 1800
    assert record_criterion(7, "surrogate: Pd/Pf at tau=0.5", ok, f"test Pd = {m.pd:.4f}, Pf = {m.pf:.5f}, "
                            f"training {t / 60:.1f} min (need Pd >= 0.90, Pf <= 0.01, <= 30 min)")


def test_criterion_7_auc_margin(surrogate):
    best_name = max(surrogate["cfar_auc"], key=surrogate["cfar_auc"].get)
    best = surrogate["cfar_auc"][best_name]
    margin = surrogate["model_auc"] - best
    listing = ", ".join(f"{k} {v:.4f}" for k, v in surrogate["cfar_auc"].items())
    ok = margin >= 0.03
    assert record_criterion(7, "surrogate: AUC margin", ok, f"model AUC {surrogate['model_auc']:.4f} vs best "
                            f"CFAR {best_name} {best:.4f} ({listing}); margin {margin:+.4f} (need >= 0.03)")


# ---------------------------------------------------------------- criteria 8, 9

DETERMINISM_CONFIG = """\
[scene]
grid = 16, 8
clutter = mixed

[model]
N = 4
H = 3

[train]
epochs = 2
batch_size = 4
pos_weight = 4

[cfar]
train = 2
guard = 1
"""


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "cfg.ini"
    cfg.write_text(DETERMINISM_CONFIG)
    assert cli.main(["datagen", "--config", str(cfg), "--out", str(tmp_path / "data"), "--count", "16",
                     "--seed", "3"]) == 0
    for name in ("train_a", "train_b"):
        assert cli.main(["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / name),
                         "--config", str(cfg), "--seed", "5"]) == 0
    ckpt = str(tmp_path / "train_a" / "best.ckpt")
    for name in ("roc_a", "roc_b"):
        assert cli.main(["roc", "--data", str(tmp_path / "data"), "--checkpoint", ckpt, "--config", str(cfg),
                         "--out", str(tmp_path / name)]) == 0
    train_same = tree_bytes(tmp_path / "train_a") == tree_bytes(tmp_path / "train_b")
    roc_same = tree_bytes(tmp_path / "roc_a") == tree_bytes(tmp_path / "roc_b")
    n_files = len(tree_bytes(tmp_path / "train_a")) + len(tree_bytes(tmp_path / "roc_a"))
    assert record_criterion(8, "determinism", train_same and roc_same,
                            f"train identical: {train_same}, roc identical: {roc_same} ({n_files} files)")


def test_criterion_9_serialization(tmp_path):
    model = init_model(DetectorConfig(L=128, N=8, H=4, seed=11))
    rng = np.random.default_rng(9)
    for p in model.params.values():
        p.value = rng.normal(size=p.shape) * np.exp(rng.uniform(-30, 30, size=p.shape))
    save_checkpoint(tmp_path / "m.ckpt", model)
    loaded, _, _ = load_checkpoint(tmp_path / "m.ckpt")
    ckpt_ok = all(p.value.tobytes() == loaded.params[k].value.tobytes() for k, p in model.params.items())
    ds = gen_dataset(SceneConfig(grid=(16, 8), clutter="mixed", seed=4), 10, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    data_ok = back.splits == ds.splits and all(
        a.frame.values.tobytes() == b.frame.values.tobytes() and a.mask.tobytes() == b.mask.tobytes()
        for a, b in zip(ds.samples, back.samples))
    assert record_criterion(9, "serialization", ckpt_ok and data_ok,
                            f"checkpoint bitwise: {ckpt_ok}, dataset bitwise: {data_ok}")
