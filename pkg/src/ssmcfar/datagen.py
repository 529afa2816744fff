"""Synthetic range-azimuth scenes with exponential clutter and point targets.

Scenes live on a regular range x azimuth grid (range along axis 0).  The
clutter floor is i.i.d. exponential per cell, either homogeneous or split
into two mean levels at a random range edge.  Each target adds a separable
squared-sinc mainlobe whose peak sits ``snr`` times above the local clutter
mean, and the ground-truth mask marks the cells where a target reaches at
least a quarter of its own peak.

Datasets are written as a directory holding a JSON ``manifest`` plus one
little-endian float32 frame file and one uint8 mask file per sample.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

MANIFEST_NAME = "manifest"
FORMAT_VERSION = 1
CLUTTER_MODES = ("homogeneous", "heterogeneous", "mixed")


@dataclass
class RangeAzimuthFrame:
    """Magnitude spectrum on a ``(range, azimuth)`` grid."""

    values: np.ndarray
    range_min_m: float = 0.6
    range_max_m: float = 6.0
    az_min_deg: float = -43.5
    az_max_deg: float = 43.5

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise InvalidInputError("frame values must be a 2D (range, azimuth) grid")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise InvalidInputError("frame values must be finite and non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def range_axis(self) -> np.ndarray:
        n = self.values.shape[0]
        step = (self.range_max_m - self.range_min_m) / n
        return self.range_min_m + step * (np.arange(n) + 0.5)

    def azimuth_axis(self) -> np.ndarray:
        n = self.values.shape[1]
        step = (self.az_max_deg - self.az_min_deg) / n
        return self.az_min_deg + step * (np.arange(n) + 0.5)


def _as_range(value) -> tuple[float, float]:
    if np.ndim(value) == 0:
        return float(value), float(value)
    lo, hi = value
    return float(lo), float(hi)


@dataclass
class SceneConfig:
    """Scene geometry and statistics.

    ``n_targets`` and ``snr_db`` accept either a scalar or an inclusive
    ``(low, high)`` range that is sampled per scene.  ``range_width_bins``
    and ``azimuth_beamwidth_deg`` set the peak-to-first-null distance of
    the squared-sinc mainlobe along each axis.
    """

    grid: tuple[int, int] = (64, 32)
    range_bounds_m: tuple[float, float] = (0.6, 6.0)
    azimuth_bounds_deg: tuple[float, float] = (-43.5, 43.5)
    n_targets: int | tuple[int, int] = (1, 3)
    snr_db: float | tuple[float, float] = (10.0, 20.0)
    clutter: str = "homogeneous"
    clutter_mean: float = 1.0
    clutter_ratio_db: float = 10.0
    range_width_bins: float = 3.0
    azimuth_beamwidth_deg: float = 15.0
    mask_level: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.range_bounds_m = tuple(self.range_bounds_m)
        self.azimuth_bounds_deg = tuple(self.azimuth_bounds_deg)
        if np.ndim(self.n_targets):
            self.n_targets = tuple(int(n) for n in self.n_targets)
        if np.ndim(self.snr_db):
            self.snr_db = tuple(float(s) for s in self.snr_db)
        self.validate()

    @classmethod
    def paper_geometry(cls, **overrides) -> "SceneConfig":
        """160 x 64 grid: 0.6-6 m at the native bin size of a 256-point range FFT over 8.6 m."""
        return cls(grid=(160, 64), **overrides)

    def validate(self):
        r, a = self.grid
        if r < 1 or a < 1:
            raise InvalidInputError(f"grid must be positive, got {self.grid}")
        lo, hi = self.range_bounds_m
        if not 0 <= lo < hi:
            raise InvalidInputError(f"bad range bounds {self.range_bounds_m}")
        lo, hi = self.azimuth_bounds_deg
        if not -180 <= lo < hi <= 180:
            raise InvalidInputError(f"bad azimuth bounds {self.azimuth_bounds_deg}")
        n_lo, n_hi = _as_range(self.n_targets)
        if n_lo < 0 or n_hi < n_lo:
            raise InvalidInputError(f"bad target count {self.n_targets}")
        s_lo, s_hi = _as_range(self.snr_db)
        if s_hi < s_lo:
            raise InvalidInputError(f"bad snr range {self.snr_db}")
        if self.clutter not in CLUTTER_MODES:
            raise InvalidInputError(f"clutter must be one of {CLUTTER_MODES}")
        if self.clutter_mean <= 0:
            raise InvalidInputError("clutter_mean must be positive")
        if self.range_width_bins <= 0 or self.azimuth_beamwidth_deg <= 0:
            raise InvalidInputError("mainlobe widths must be positive")
        if not 0 < self.mask_level < 1:
            raise InvalidInputError("mask_level must lie in (0, 1)")

    @property
    def azimuth_width_bins(self) -> float:
        lo, hi = self.azimuth_bounds_deg
        return self.azimuth_beamwidth_deg / ((hi - lo) / self.grid[1])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        return cls(**data)


@dataclass
class LabeledSample:
    frame: RangeAzimuthFrame
    mask: np.ndarray
    metadata: dict = field(default_factory=dict)


def mainlobe(n: int, center: float, width: float) -> np.ndarray:
    """Squared-sinc mainlobe along one axis, zero beyond the first nulls."""
    d = (np.arange(n) - center) / width
    return np.where(np.abs(d) < 1.0, np.sinc(d) ** 2, 0.0)


def _draw_clutter_mean(cfg: SceneConfig, rng, mode: str):
    """Per-cell clutter mean and a descriptor of how it was drawn."""
    r, a = cfg.grid
    means = np.full((r, a), cfg.clutter_mean)
    if mode == "homogeneous":
        return means, {"mode": mode, "mean": cfg.clutter_mean}
    edge = int(rng.integers(1, r)) if r > 1 else 0
    ratio = 10.0 ** (cfg.clutter_ratio_db / 10.0)
    high_far = bool(rng.integers(2))
    if high_far:
        means[edge:] *= ratio
    else:
        means[:edge] *= ratio
    return means, {"mode": mode, "mean": cfg.clutter_mean, "ratio": ratio,
                   "edge": edge, "high_side": "far" if high_far else "near"}


def gen_sample(cfg: SceneConfig, rng: np.random.Generator, *, noiseless: bool = False) -> LabeledSample:
    """Draw one labelled scene.

    With ``noiseless=True`` the clutter is replaced by its mean level, which
    is handy for checking target placement.
    """
    cfg.validate()
    r, a = cfg.grid
    mode = cfg.clutter
    if mode == "mixed":
        mode = "heterogeneous" if rng.integers(2) else "homogeneous"
    means, clutter_info = _draw_clutter_mean(cfg, rng, mode)

    n_lo, n_hi = _as_range(cfg.n_targets)
    n_targets = int(rng.integers(int(n_lo), int(n_hi) + 1))
    s_lo, s_hi = _as_range(cfg.snr_db)
    az_width = cfg.azimuth_width_bins

    signal = np.zeros((r, a))
    mask = np.zeros((r, a), dtype=bool)
    targets = []
    for _ in range(n_targets):
        cr = int(rng.integers(r))
        ca = int(rng.integers(a))
        snr_db = float(rng.uniform(s_lo, s_hi))
        profile = np.outer(mainlobe(r, cr, cfg.range_width_bins), mainlobe(a, ca, az_width))
        peak = 10.0 ** (snr_db / 10.0) * means[cr, ca]
        signal += peak * profile
        mask |= profile >= cfg.mask_level
        targets.append({"range_bin": cr, "azimuth_bin": ca, "snr_db": snr_db})

    clutter = means if noiseless else means * rng.standard_exponential((r, a))
    values = (clutter + signal).astype(np.float32)
    # exponential draws can underflow to zero; keep the frame strictly positive
    values = np.maximum(values, np.float32(np.finfo(np.float32).tiny))
    frame = RangeAzimuthFrame(values, *cfg.range_bounds_m, *cfg.azimuth_bounds_deg)
    return LabeledSample(frame, mask, {"targets": targets, "clutter": clutter_info})


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-sample stream so generation order does not matter."""
    return np.random.default_rng([seed, index])


def split_counts(count: int, ratios=(0.7, 0.15, 0.15)) -> tuple[int, int, int]:
    """Train/val/test sizes: floor the first two, the rest goes to test."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InvalidInputError(f"split ratios must be three non-negatives summing to 1, got {ratios}")
    n_train = math.floor(count * ratios[0] + 1e-9)
    n_val = math.floor(count * ratios[1] + 1e-9)
    return n_train, n_val, count - n_train - n_val


@dataclass
class Dataset:
    """In-memory dataset: samples plus named index lists per split."""

    config: SceneConfig
    samples: list[LabeledSample]
    splits: dict[str, list[int]]

    def split(self, name: str) -> list[LabeledSample]:
        if name == "all":
            return list(self.samples)
        if name not in self.splits:
            raise InvalidInputError(f"unknown split {name!r}")
        return [self.samples[i] for i in self.splits[name]]


def generate(cfg: SceneConfig, count: int, ratios=(0.7, 0.15, 0.15), counts=None) -> Dataset:
    """Generate ``count`` samples in memory.

    ``counts`` overrides ``ratios`` with explicit ``(train, val, test)`` sizes.
    """
    if counts is not None:
        counts = tuple(int(c) for c in counts)
        if len(counts) != 3 or min(counts) < 0 or sum(counts) != count:
            raise InvalidInputError(f"split counts {counts} do not add up to {count}")
    else:
        counts = split_counts(count, ratios)
    samples = [gen_sample(cfg, sample_rng(cfg.seed, i)) for i in range(count)]
    bounds = np.cumsum((0,) + counts)
    splits = {name: list(range(bounds[i], bounds[i + 1]))
              for i, name in enumerate(("train", "val", "test"))}
    return Dataset(cfg, samples, splits)


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {path}: {exc}") from exc
    r, a = dataset.config.grid
    entries = []
    for i, sample in enumerate(dataset.samples):
        frame_name, mask_name = f"{i:06d}.frame.f32", f"{i:06d}.mask.u8"
        sample.frame.values.astype("<f4").tofile(path / frame_name)
        sample.mask.astype(np.uint8).tofile(path / mask_name)
        entries.append({"frame": frame_name, "mask": mask_name, "metadata": sample.metadata})
    split_of = {i: name for name, idx in dataset.splits.items() for i in idx}
    for i, entry in enumerate(entries):
        entry["split"] = split_of.get(i, "unused")
    manifest = {
        "version": FORMAT_VERSION,
        "grid": [r, a],
        "counts": {name: len(idx) for name, idx in dataset.splits.items()},
        "scene": dataset.config.to_dict(),
        "samples": entries,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def gen_dataset(cfg: SceneConfig, count: int, path, ratios=(0.7, 0.15, 0.15), counts=None) -> Dataset:
    """Generate a dataset and write it to ``path``."""
    parent = Path(path).resolve().parent
    if parent.exists() and not os.access(parent, os.W_OK):
        raise OSError(f"dataset location {path} is not writable")
    dataset = generate(cfg, count, ratios, counts)
    save_dataset(dataset, path)
    return dataset


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported dataset version {manifest.get('version')}")
    cfg = SceneConfig.from_dict(manifest["scene"])
    r, a = manifest["grid"]
    samples, splits = [], {"train": [], "val": [], "test": []}
    for i, entry in enumerate(manifest["samples"]):
        values = np.fromfile(path / entry["frame"], dtype="<f4")
        mask = np.fromfile(path / entry["mask"], dtype=np.uint8)
        if values.size != r * a or mask.size != r * a:
            raise InvalidInputError(f"sample {i} does not match grid {r}x{a}")
        frame = RangeAzimuthFrame(values.reshape(r, a).astype(np.float32), *cfg.range_bounds_m,
                                  *cfg.azimuth_bounds_deg)
        samples.append(LabeledSample(frame, mask.reshape(r, a).astype(bool), entry["metadata"]))
        splits.setdefault(entry["split"], []).append(i)
    return Dataset(cfg, samples, splits)
