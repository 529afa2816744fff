from __future__ import annotations

import json

import numpy as np
import pytest
from scipy.special import expit

from ssmcfar import autodiff as ad
from ssmcfar.datagen import RangeAzimuthFrame
from ssmcfar.errors import InvalidInputError
from ssmcfar.model import (BLOCK_PARAMS, DetectorConfig, count_params, flatten_frames, forward,
                           init_model, load_checkpoint, predict_mask, predict_proba, read_checkpoint,
                           save_checkpoint, standardize, unflatten)


def frames(rng, n=2, grid=(8, 4)):
    return rng.exponential(size=(n,) + grid)


def layout_count(N, H, blocks):
    return blocks * (H * N + H * H + 5 * H)


# ---------------------------------------------------------------- init

def test_init_is_deterministic():
    a = init_model(DetectorConfig(L=32, N=6, H=3, seed=9)).state_dict()
    b = init_model(DetectorConfig(L=32, N=6, H=3, seed=9)).state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_paper_scale_parameter_count():
    model = init_model(DetectorConfig(L=8, N=256, H=256))
    assert count_params(model) == 264_704
    assert abs(count_params(model) - 260_000) / 260_000 < 0.02


@pytest.mark.parametrize("N, H, blocks", [(4, 2, 2), (8, 3, 1), (5, 7, 3), (4, 2, 0)])
def test_parameter_count_layout(N, H, blocks):
    model = init_model(DetectorConfig(L=8, N=N, H=H, num_blocks=blocks))
    assert count_params(model) == layout_count(N, H, blocks)


def test_tiny_count_and_empty_model():
    assert count_params(init_model(DetectorConfig(L=8, N=4, H=2))) == 44
    assert count_params(init_model(DetectorConfig(L=8, N=4, H=2, num_blocks=0))) == 0


def test_initial_step_sizes_within_bounds():
    model = init_model(DetectorConfig(L=8, N=4, H=64))
    for block in model.blocks:
        dt = np.exp(block["log_dt"].value)
        assert np.all((dt >= 1e-3) & (dt <= 1e-1))


@pytest.mark.parametrize("kwargs", [dict(L=0), dict(dt_min=0.2, dt_max=0.1), dict(theta=0.0),
                                    dict(N=0)])
def test_config_validation(kwargs):
    with pytest.raises(InvalidInputError):
        DetectorConfig(**kwargs)


# ---------------------------------------------------------------- flattening

def test_range_index_varies_fastest():
    values = np.arange(12.0).reshape(1, 4, 3)  # 4 range x 3 azimuth
    seq = flatten_frames(values)[0]
    assert seq[1] == values[0, 1, 0] and seq[4] == values[0, 0, 1]
    np.testing.assert_array_equal(unflatten(seq, (4, 3)), values[0])


def test_standardize():
    x = np.random.default_rng(0).normal(3, 2, size=(2, 100))
    s = standardize(x)
    np.testing.assert_allclose(s.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(s.std(axis=-1), 1, atol=1e-6)


# ---------------------------------------------------------------- forward

def test_probabilities_in_open_interval(tiny_model, rng):
    with ad.no_tape():
        p = forward(tiny_model, frames(rng)).value
    assert p.shape == (2, 32)
    assert np.all((p > 0) & (p < 1))


def test_constant_frame_is_finite(tiny_model):
    with ad.no_tape():
        p = forward(tiny_model, np.full((1, 8, 4), 2.5)).value
    assert np.all(np.isfinite(p))


def test_accepts_frame_objects(tiny_model, rng):
    values = frames(rng, 1)[0]
    a = predict_proba(tiny_model, RangeAzimuthFrame(values))
    b = predict_proba(tiny_model, values)
    assert a.shape == (1, 8, 4) and np.array_equal(a, b)


def test_wrong_length_rejected(tiny_model, rng):
    with pytest.raises(InvalidInputError):
        forward(tiny_model, frames(rng, grid=(5, 5)))


def test_forward_deterministic(tiny_model, rng):
    x = frames(rng)
    with ad.no_tape():
        assert np.array_equal(forward(tiny_model, x).value, forward(tiny_model, x).value)


def test_residual_collapse(rng):
    model = init_model(DetectorConfig(L=8, N=4, H=2))
    for p in model.params.values():
        p.value = np.zeros(p.shape)
    x = frames(rng, 1, grid=(4, 2))
    with ad.no_tape():
        p = forward(model, x).value
    u = flatten_frames(x)
    assert np.array_equal(p, expit(standardize(u)))


def test_paths_agree(rng):
    model = init_model(DetectorConfig(L=64, N=8, H=3, seed=4))
    x = frames(rng, 3, grid=(16, 4))
    with ad.no_tape():
        a = forward(model, x).value
        b = forward(model, x, path="recurrent").value
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_channel_permutation_invariance(rng):
    model = init_model(DetectorConfig(L=32, N=4, H=5, seed=2))
    x = frames(rng)
    with ad.no_tape():
        ref = forward(model, x).value
    perm = rng.permutation(5)
    state = model.state_dict()
    for i in range(model.config.num_blocks):
        for name in ("C", "D", "log_dt", "norm_gain", "norm_bias", "mix_bias"):
            state[f"block{i}.{name}"] = state[f"block{i}.{name}"][perm]
        w = state[f"block{i}.mix_weight"]
        state[f"block{i}.mix_weight"] = w[perm][:, perm]
    model.load_state_dict(state)
    with ad.no_tape():
        np.testing.assert_allclose(forward(model, x).value, ref, atol=1e-10)


def test_every_parameter_receives_gradient(tiny_model, rng):
    target = (rng.random((2, 32)) < 0.2).astype(float)
    with ad.Tape() as tape:
        loss = ad.bce_loss(forward(tiny_model, frames(rng)), target, 3.0)
    grads = ad.backward(tape, loss)
    names = {p.name for p in grads}
    assert names == set(tiny_model.params)
    for p, g in grads.items():
        assert np.linalg.norm(g) > 0, p.name
    assert tiny_model.A is not None and not isinstance(tiny_model.A, ad.Tensor)


@pytest.mark.parametrize("path", ["conv", "recurrent"])
def test_full_model_gradcheck(tiny_model, rng, path):
    x = frames(rng)
    target = (rng.random((2, 32)) < 0.2).astype(float)
    report = ad.gradcheck(lambda: ad.bce_loss(forward(tiny_model, x, path=path), target, 3.0),
                          tiny_model.params, tolerance=1e-4)
    assert report.passed, report.failures()
    assert {e.name for e in report.entries} == set(tiny_model.params)


# ---------------------------------------------------------------- predict_mask

def test_predict_mask_examples():
    np.testing.assert_array_equal(predict_mask(np.array([0.2, 0.7]), 0.5), [False, True])
    assert not predict_mask(np.array([0.2, 0.999999]), 1 - 1e-9).any()
    for tau in (0.0, 1.0, -0.5):
        with pytest.raises(InvalidInputError):
            predict_mask(np.array([0.5]), tau)


def test_predict_mask_nested(rng):
    p = rng.random(200)
    masks = [predict_mask(p, t) for t in np.linspace(0.05, 0.95, 10)]
    for lo, hi in zip(masks, masks[1:]):
        assert not (hi & ~lo).any()


def test_predict_mask_reshapes():
    probs = np.array([0.9, 0.1, 0.2, 0.8, 0.7, 0.3])  # 3 range x 2 azimuth, range fastest
    np.testing.assert_array_equal(predict_mask(probs, 0.5, (3, 2)),
                                  [[True, True], [False, True], [False, False]])


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, tiny_model, rng):
    extra = {"note": rng.normal(size=(2, 3))}
    save_checkpoint(tmp_path / "m.ckpt", tiny_model, extra, {"epoch": 3})
    loaded, back, info = load_checkpoint(tmp_path / "m.ckpt")
    assert info == {"epoch": 3}
    assert np.array_equal(back["note"], extra["note"])
    assert list(loaded.params) == list(tiny_model.params)
    for name, p in tiny_model.params.items():
        assert np.array_equal(p.value, loaded.params[name].value)
    x = frames(rng)
    with ad.no_tape():
        assert np.array_equal(forward(tiny_model, x).value, forward(loaded, x).value)


def test_checkpoint_header_is_readable(tmp_path, tiny_model):
    path = save_checkpoint(tmp_path / "m.ckpt", tiny_model)
    header, arrays = read_checkpoint(path)
    assert header["format_version"] == 1
    assert header["config"]["N"] == 4
    names = [e["name"] for e in header["arrays"]]
    assert names == [f"block{i}.{n}" for i in range(2) for n in BLOCK_PARAMS]
    # header is plain JSON text after the magic line
    raw = path.read_bytes()
    first, rest = raw.split(b"\n", 1)
    length = int(first.split()[1])
    assert json.loads(rest[:length])["n_params"] == len(names)
    # data section is little-endian float64 in registry order
    offset = header["arrays"][1]["offset"]
    data = rest[length + 1:]
    first_d = np.frombuffer(data[offset:offset + 8 * 2], dtype="<f8")
    assert np.array_equal(first_d, tiny_model.params["block0.D"].value)


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x").write_bytes(b"hello\n")
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "x")
