"""Fast invariant checks for every module, run by ``ssmcfar selftest``.

Each check is small enough that the whole suite finishes in seconds; the
full property tests live in the test suite.
"""

from __future__ import annotations

import tempfile
import traceback
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from .cfar import CfarConfig, CfarVariant, CfarWindow, cfar_detect_1d, threshold_factor
from .datagen import SceneConfig, gen_dataset, load_dataset
from .model import (DetectorConfig, count_params, forward, init_model, load_checkpoint,
                    save_checkpoint)
from .ssm import (ContinuousSSM, discretize_bilinear, hippo_legt, krylov_kernel, conv_forward,
                  picard_solve, ssm_recurrent_forward)
from .train import adam_step, AdamState, TrainConfig


def check_cfar():
    T = threshold_factor("ca", 16, 0.01)
    assert abs(T - 5.336) < 1e-3, T
    u = np.ones(21)
    u[10] = 100.0
    out = cfar_detect_1d(u, CfarConfig(CfarVariant("CA"), CfarWindow(4, 1), T))
    assert out.mask.sum() == 1 and out.mask[10]


def check_ssm():
    rng = np.random.default_rng(0)
    A, B = hippo_legt(8)
    ssm = ContinuousSSM(A, B, rng.normal(size=8), 0.3)
    d = discretize_bilinear(ssm, 0.01)
    u = rng.normal(size=200)
    y_rec = ssm_recurrent_forward(d, u)
    y_conv = conv_forward(krylov_kernel(d, u.size), u, d.D)
    assert np.max(np.abs(y_rec - y_conv)) < 1e-8
    assert np.all(np.abs(np.linalg.eigvals(d.A_bar)) < 1.0)
    scalar = ContinuousSSM([[-1.0]], [1.0], [1.0])
    _, x = ssm_recurrent_forward(discretize_bilinear(scalar, 0.01), np.ones(100), return_states=True)
    assert np.max(np.abs(picard_solve(scalar, np.ones(100), 0.01, 150) - x)) < 1e-6


def check_autodiff():
    cfg = DetectorConfig(L=32, N=4, H=2)
    model = init_model(cfg)
    rng = np.random.default_rng(1)
    frames = rng.exponential(size=(2, 8, 4))
    target = (rng.random((2, 32)) < 0.2).astype(float)
    report = ad.gradcheck(lambda: ad.bce_loss(forward(model, frames), target, 2.0), model.params,
                          max_entries=8)
    assert report.passed, report.failures()[:3]


def check_model():
    model = init_model(DetectorConfig(N=256, H=256, L=16))
    assert count_params(model) == 264_704
    small = init_model(DetectorConfig(L=32, N=4, H=2))
    frames = np.random.default_rng(2).exponential(size=(1, 8, 4))
    with ad.no_tape():
        a = forward(small, frames).value
        b = forward(small, frames, path="recurrent").value
    assert np.max(np.abs(a - b)) < 1e-10
    with tempfile.TemporaryDirectory() as tmp:
        save_checkpoint(Path(tmp) / "m.ckpt", small)
        loaded, _, _ = load_checkpoint(Path(tmp) / "m.ckpt")
        for name, p in small.params.items():
            assert np.array_equal(p.value, loaded.params[name].value)


def check_train():
    p = {"w": ad.Tensor(np.array([1.0]), True, "w")}
    adam_step(p, {"w": np.array([0.5])}, AdamState(), TrainConfig(learning_rate=0.1))
    assert abs(p["w"].value[0] - 0.9) < 1e-6


def check_datagen():
    cfg = SceneConfig(grid=(16, 8), seed=7)
    with tempfile.TemporaryDirectory() as tmp:
        ds = gen_dataset(cfg, 4, Path(tmp) / "d")
        back = load_dataset(Path(tmp) / "d")
        for s, t in zip(ds.samples, back.samples):
            assert np.array_equal(s.frame.values, t.frame.values)
            assert np.array_equal(s.mask, t.mask)


def check_eval():
    rng = np.random.default_rng(3)
    truth = rng.random((4, 10, 10)) < 0.1
    assert ev.roc_probabilities(truth.astype(float), truth).auc == 1.0
    assert ev.roc_probabilities(np.full(truth.shape, 0.3), truth).auc == 0.5
    m = ev.pd_pf(truth, truth)
    assert m.pd == 1.0 and m.pf == 0.0


CHECKS = [check_cfar, check_ssm, check_autodiff, check_model, check_train, check_datagen, check_eval]


def run_all(verbose: bool = True) -> bool:
    ok = True
    for check in CHECKS:
        name = check.__name__.removeprefix("check_")
        try:
            check()
            status = "ok"
        except Exception:  # report every failure, keep going
            ok = False
            status = "FAIL\n" + traceback.format_exc()
        if verbose:
            print(f"{name:10s} {status}")
    return ok
