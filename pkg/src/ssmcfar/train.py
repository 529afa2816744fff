"""Weighted-BCE training with Adam, validation tracking and resumable checkpoints."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError, NumericError
from .model import DetectorModel, flatten_frames, forward, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

POS_WEIGHT_BOUNDS = (1.0, 1000.0)
REPORT_COLUMNS = ("epoch", "train_loss", "val_loss", "val_pd", "val_pf")


@dataclass
class TrainConfig:
    """Optimiser and loop settings.

    ``pos_weight`` is either ``"auto"`` (background/target ratio of each
    batch, clamped to [1, 1000]) or a fixed positive number.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 20
    batch_size: int = 16
    pos_weight: str | float = "auto"
    seed: int = 0
    patience: int = 10
    tau: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInputError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise InvalidInputError("batch_size and patience must be >= 1, epochs >= 0")
        if self.pos_weight != "auto":
            self.pos_weight = float(self.pos_weight)
            if not self.pos_weight > 0:
                raise InvalidInputError("fixed pos_weight must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_pd: float
    val_pf: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.records:
            writer.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in REPORT_COLUMNS[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path


# ---------------------------------------------------------------- loss

def resolve_pos_weight(mask, mode) -> float:
    """Positive-class weight for one batch."""
    if mode != "auto":
        return float(mode)
    mask = np.asarray(mask, dtype=bool)
    n_pos = int(mask.sum())
    if n_pos == 0:
        log.info("batch has no target cells; pos_weight falls back to 1")
        return 1.0
    return float(np.clip((mask.size - n_pos) / n_pos, *POS_WEIGHT_BOUNDS))


def loss(probs, mask, pos_weight: float = 1.0) -> ad.Tensor:
    """Weighted binary cross-entropy between probabilities and a target mask."""
    return ad.bce_loss(probs, np.asarray(mask, dtype=np.float64), pos_weight)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    ``grads`` maps parameter names to arrays; missing entries count as zero.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}", op=name)
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.value = p.value - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)
    return state


# ---------------------------------------------------------------- loop

def _stack(samples):
    frames = np.stack([s.frame.values for s in samples]).astype(np.float64)
    masks = flatten_frames(np.stack([s.mask for s in samples]).astype(np.float64))
    return frames, masks


def train_step(model: DetectorModel, frames, masks, state: AdamState, cfg: TrainConfig) -> float:
    """Forward, backward and one optimiser update on a batch; returns the batch loss."""
    w = resolve_pos_weight(masks, cfg.pos_weight)
    with ad.Tape() as tape:
        value = loss(forward(model, frames), masks, w)
    grads = ad.backward(tape, value)
    by_name = {p.name: g for p, g in grads.items()}
    adam_step(model.params, by_name, state, cfg)
    return float(value.value)


def evaluate_batchwise(model: DetectorModel, frames, masks, cfg: TrainConfig, batch_size: int = 32):
    """Validation loss, Pd and Pf at ``cfg.tau`` over the whole grid."""
    losses, weights = [], []
    hits = fas = n_pos = n_neg = 0
    with ad.no_tape():
        for i in range(0, len(frames), batch_size):
            y = masks[i:i + batch_size]
            p = forward(model, frames[i:i + batch_size])
            w = resolve_pos_weight(y, cfg.pos_weight)
            losses.append(float(loss(p, y, w).value))
            weights.append(y.size)
            det = p.value >= cfg.tau
            truth = y > 0.5
            hits += int((det & truth).sum())
            fas += int((det & ~truth).sum())
            n_pos += int(truth.sum())
            n_neg += int((~truth).sum())
    val_loss = float(np.average(losses, weights=weights))
    return val_loss, hits / n_pos if n_pos else 0.0, fas / n_neg if n_neg else 0.0


def _state_arrays(state: AdamState, best: dict | None) -> dict:
    arrays = {}
    for name in state.m:
        arrays[f"adam.m.{name}"] = state.m[name]
        arrays[f"adam.v.{name}"] = state.v[name]
    for name, value in (best or {}).items():
        arrays[f"best.{name}"] = value
    return arrays


def train(model: DetectorModel, dataset, cfg: TrainConfig, *, checkpoint_dir=None,
          resume_from=None, val_split: str = "val"):
    """Train ``model`` in place and return ``(best_model, TrainReport)``.

    Each epoch shuffles the training split with a generator seeded by
    ``(cfg.seed, epoch)``, so a run resumed from an epoch checkpoint
    continues exactly as the uninterrupted run would.  The best model is the
    one with the lowest validation loss; training stops after
    ``cfg.patience`` epochs without improvement.  With ``checkpoint_dir``
    set, ``last.ckpt`` and ``best.ckpt`` are written after every epoch.
    """
    train_samples = dataset.split("train")
    val_samples = dataset.split(val_split) or train_samples
    if not train_samples:
        raise InvalidInputError("training split is empty")
    frames, masks = _stack(train_samples)
    val_frames, val_masks = _stack(val_samples)

    state = AdamState()
    report = TrainReport()
    best_state, best_loss, bad_epochs, start = None, np.inf, 0, 0
    if resume_from is not None:
        resumed, extra, info = load_checkpoint(resume_from)
        model.load_state_dict(resumed.state_dict())
        state.step = info["adam_step"]
        for name in model.params:
            state.m[name] = extra[f"adam.m.{name}"]
            state.v[name] = extra[f"adam.v.{name}"]
        best_state = {name: extra[f"best.{name}"] for name in model.params}
        report = TrainReport([EpochRecord(**r) for r in info["records"]], info["best_epoch"])
        best_loss, bad_epochs, start = info["best_loss"], info["bad_epochs"], info["epoch"] + 1

    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(start, cfg.epochs):
        if bad_epochs >= cfg.patience:
            break
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_samples))
        batch_losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            batch_losses.append(train_step(model, frames[idx], masks[idx], state, cfg))
        val_loss, val_pd, val_pf = evaluate_batchwise(model, val_frames, val_masks, cfg)
        record = EpochRecord(epoch, float(np.mean(batch_losses)), val_loss, val_pd, val_pf)
        report.records.append(record)
        log.info("epoch %d train %.5f val %.5f pd %.4f pf %.5f", epoch, record.train_loss,
                 val_loss, val_pd, val_pf)
        if val_loss < best_loss:
            best_loss, bad_epochs = val_loss, 0
            best_state = model.state_dict()
            report.best_epoch = epoch
        else:
            bad_epochs += 1
        if checkpoint_dir is not None:
            info = {"epoch": epoch, "adam_step": state.step, "best_loss": best_loss,
                    "bad_epochs": bad_epochs, "best_epoch": report.best_epoch,
                    "records": [asdict(r) for r in report.records], "train_config": asdict(cfg)}
            save_checkpoint(checkpoint_dir / "last.ckpt", model, _state_arrays(state, best_state), info)

    best = model.copy()
    if best_state is not None:
        best.load_state_dict(best_state)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir / "best.ckpt", best, extra_info={"best_epoch": report.best_epoch})
    return best, report
