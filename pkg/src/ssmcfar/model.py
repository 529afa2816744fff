"""Two-block state-space detector built on CFAR's select-then-test layout.

The frame is flattened into one sequence and standardised.  Each block
applies ``H`` independent state-space channels (bilinear discretisation of
a frozen translated-Legendre pair, trainable step size and read-out), then
layer norm across channels, GELU, and a position-wise linear map that mixes
the channels.  The last block's channels are averaged, the standardised
input is added back, and a sigmoid gives per-cell probabilities.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError
from .ssm import hippo_legt

CHECKPOINT_MAGIC = b"SSMCFAR-CKPT"
CHECKPOINT_VERSION = 1
BLOCK_PARAMS = ("C", "D", "log_dt", "mix_weight", "mix_bias", "norm_gain", "norm_bias")


@dataclass
class DetectorConfig:
    """Architecture and initialisation settings.

    ``theta`` is the window length of the frozen memory matrices in the same
    time units as the step size ``dt``.
    """

    L: int = 2048
    N: int = 256
    H: int = 256
    num_blocks: int = 2
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    theta: float = 1.0
    norm_eps: float = 1e-5
    std_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if min(self.L, self.N, self.H) < 1 or self.num_blocks < 0:
            raise InvalidInputError("L, N, H must be >= 1 and num_blocks >= 0")
        if not 0 < self.dt_min < self.dt_max:
            raise InvalidInputError("need 0 < dt_min < dt_max")
        if not self.theta > 0 or not self.norm_eps > 0 or not self.std_eps > 0:
            raise InvalidInputError("theta and the eps values must be positive")


class DetectorModel:
    """Parameters (name -> :class:`Tensor`) plus the frozen ``A``, ``B``."""

    def __init__(self, config: DetectorConfig, params: dict, A: np.ndarray, B: np.ndarray):
        self.config = config
        self.params = params
        self.A = A
        self.B = B

    @property
    def blocks(self) -> list[dict]:
        return [{name: self.params[f"block{i}.{name}"] for name in BLOCK_PARAMS}
                for i in range(self.config.num_blocks)]

    def state_dict(self) -> dict:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict):
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise InvalidInputError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.value = value.copy()

    def copy(self) -> "DetectorModel":
        params = {name: ad.Tensor(p.value.copy(), True, name) for name, p in self.params.items()}
        return DetectorModel(self.config, params, self.A.copy(), self.B.copy())


def init_model(cfg: DetectorConfig) -> DetectorModel:
    rng = np.random.default_rng(cfg.seed)
    A, B = hippo_legt(cfg.N, cfg.theta)
    H, N = cfg.H, cfg.N
    params = {}
    for i in range(cfg.num_blocks):
        values = {
            "C": rng.normal(0.0, np.sqrt(1.0 / N), (H, N)),
            "D": np.zeros(H),
            "log_dt": rng.uniform(np.log(cfg.dt_min), np.log(cfg.dt_max), H),
            "mix_weight": rng.normal(0.0, np.sqrt(1.0 / H), (H, H)),
            "mix_bias": np.zeros(H),
            "norm_gain": np.ones(H),
            "norm_bias": np.zeros(H),
        }
        for name in BLOCK_PARAMS:
            key = f"block{i}.{name}"
            params[key] = ad.Tensor(values[name], requires_grad=True, name=key)
    return DetectorModel(cfg, params, A, B)


def count_params(model: DetectorModel) -> int:
    """Number of trainable entries; the frozen ``A`` and ``B`` are not counted."""
    return int(sum(p.size for p in model.params.values()))


# ---------------------------------------------------------------- flattening

def _frame_values(frames) -> np.ndarray:
    """Stack frames (arrays or objects with ``.values``) into ``(batch, R, A)``."""
    if isinstance(frames, np.ndarray):
        arr = frames
    elif hasattr(frames, "values"):
        arr = frames.values
    else:
        arr = np.stack([getattr(f, "values", f) for f in frames])
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise InvalidInputError(f"expected (R, A) frames, got shape {arr.shape}")
    return arr


def flatten_frames(values: np.ndarray) -> np.ndarray:
    """``(batch, R, A)`` -> ``(batch, R*A)`` with the range index varying fastest."""
    return np.swapaxes(values, -1, -2).reshape(values.shape[0], -1)


def unflatten(seq: np.ndarray, grid) -> np.ndarray:
    """Inverse of :func:`flatten_frames` for one sequence or a batch."""
    r, a = grid
    seq = np.asarray(seq)
    return np.swapaxes(seq.reshape(seq.shape[:-1] + (a, r)), -1, -2)


def standardize(seq: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    mu = seq.mean(axis=-1, keepdims=True)
    var = seq.var(axis=-1, keepdims=True)
    return (seq - mu) / np.sqrt(var + eps)


# ---------------------------------------------------------------- forward

def discretize_channels(model: DetectorModel, block: dict):
    """Per-channel bilinear ``(Abar, Bbar)`` as tensors of shape ``(H, N, N)``, ``(H, N)``."""
    H, N = model.config.H, model.config.N
    dt = ad.exp(block["log_dt"])
    half = ad.reshape(ad.scale(dt, 0.5), (H, 1, 1))
    half_a = ad.mul(half, model.A)
    eye = np.eye(N)
    lhs = ad.sub(eye, half_a)
    a_bar = ad.linear_solve(lhs, ad.add(eye, half_a))
    b_bar = ad.linear_solve(lhs, ad.mul(ad.reshape(dt, (H, 1)), model.B))
    return a_bar, b_bar


def _block_forward(model: DetectorModel, block: dict, x, path: str):
    H = model.config.H
    a_bar, b_bar = discretize_channels(model, block)
    if path == "conv":
        kernel = ad.krylov(a_bar, b_bar, block["C"], model.config.L)
        y = ad.add(ad.causal_conv(kernel, x), ad.mul(ad.reshape(block["D"], (H, 1)), x))
    elif path == "recurrent":
        if x.shape[-2] != H:
            x = ad.Tensor(np.broadcast_to(x.value, x.shape[:-2] + (H, x.shape[-1])).copy())
        y = ad.ssm_recurrence(a_bar, b_bar, block["C"], block["D"], x)
    else:
        raise InvalidInputError(f"unknown path {path!r}")
    z = ad.layer_norm(y, ad.reshape(block["norm_gain"], (H, 1)), ad.reshape(block["norm_bias"], (H, 1)),
                      model.config.norm_eps, axis=-2)
    z = ad.gelu(z)
    return ad.add(ad.matmul(block["mix_weight"], z), ad.reshape(block["mix_bias"], (H, 1)))


def forward(model: DetectorModel, frames, path: str = "conv") -> ad.Tensor:
    """Per-cell target probabilities, shape ``(batch, L)`` in flattened order.

    ``path="recurrent"`` steps the state recurrence instead of using the
    FFT convolution; both give the same values up to rounding.
    """
    seq = flatten_frames(_frame_values(frames))
    if seq.shape[-1] != model.config.L:
        raise InvalidInputError(f"frame flattens to {seq.shape[-1]} cells, model expects {model.config.L}")
    u_std = standardize(seq, model.config.std_eps)
    # every channel of the first block sees the same copy of the input
    h = ad.Tensor(u_std[:, None, :])
    for block in model.blocks:
        h = _block_forward(model, block, h, path)
    logits = ad.add(ad.mean(h, axis=1), u_std) if model.blocks else ad.Tensor(u_std)
    return ad.sigmoid(logits)


def predict_proba(model: DetectorModel, frames, batch_size: int = 32) -> np.ndarray:
    """Probabilities reshaped to ``(batch, R, A)``, evaluated without recording."""
    values = _frame_values(frames)
    out = []
    with ad.no_tape():
        for i in range(0, len(values), batch_size):
            out.append(forward(model, values[i:i + batch_size]).value)
    return unflatten(np.concatenate(out), values.shape[1:])


def predict_mask(probs, tau: float, grid=None) -> np.ndarray:
    """Binary detections ``probs >= tau``; reshaped to ``grid`` when given."""
    if not 0.0 < tau < 1.0:
        raise InvalidInputError(f"tau must lie in (0, 1), got {tau}")
    probs = np.asarray(getattr(probs, "value", probs))
    mask = probs >= tau
    return unflatten(mask, grid) if grid is not None else mask


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: DetectorModel, extra_arrays: dict | None = None,
                    extra_info: dict | None = None) -> Path:
    """Write a checkpoint: magic line, JSON header, then raw ``<f8`` arrays.

    The header lists every array's name, shape and byte offset relative to
    the start of the data section.  Parameters come first in registry order,
    followed by any ``extra_arrays`` (e.g. optimiser moments).
    """
    arrays = [(name, p.value) for name, p in model.params.items()]
    arrays += list((extra_arrays or {}).items())
    entries, offset = [], 0
    for name, value in arrays:
        nbytes = value.size * 8
        entries.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "n_params": len(model.params),
        "arrays": entries,
        "info": extra_info or {},
    }
    text = json.dumps(header, indent=1, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" " + str(len(text)).encode() + b"\n")
        fh.write(text + b"\n")
        for _, value in arrays:
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return path


def read_checkpoint(path):
    """Return ``(header, {name: array})`` from a checkpoint file."""
    with open(path, "rb") as fh:
        first = fh.readline()
        magic, _, length = first.strip().partition(b" ")
        if magic != CHECKPOINT_MAGIC:
            raise InvalidInputError(f"{path} is not a checkpoint")
        header = json.loads(fh.read(int(length)))
        fh.read(1)
        data = fh.read()
    if header["format_version"] != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {header['format_version']}")
    arrays = {}
    for e in header["arrays"]:
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path):
    """Rebuild the model; returns ``(model, extra_arrays, info)``."""
    header, arrays = read_checkpoint(path)
    model = init_model(DetectorConfig(**header["config"]))
    model.load_state_dict(arrays)
    extra = {k: v for k, v in arrays.items() if k not in model.params}
    return model, extra, header["info"]
