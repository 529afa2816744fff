"""Cell-level detection metrics, ROC curves and comparison reports.

Counts are pooled over all frames before any ratio is formed.  A boolean
``valid`` grid restricts both numerators and denominators, which is how
CFAR border cells are kept out of every method's statistics.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cfar import CfarVariant, CfarWindow, cfar_statistic
from .errors import InvalidInputError


@dataclass
class MetricResult:
    pd: float
    pf: float
    n_target_cells: int
    n_background_cells: int
    n_hits: int
    n_false_alarms: int

    @classmethod
    def from_counts(cls, hits, fas, targets, background) -> "MetricResult":
        pd = hits / targets if targets else 0.0
        pf = fas / background if background else 0.0
        return cls(pd, pf, int(targets), int(background), int(hits), int(fas))

    def __add__(self, other: "MetricResult") -> "MetricResult":
        return MetricResult.from_counts(self.n_hits + other.n_hits,
                                        self.n_false_alarms + other.n_false_alarms,
                                        self.n_target_cells + other.n_target_cells,
                                        self.n_background_cells + other.n_background_cells)


def pd_pf(pred, truth, valid=None) -> MetricResult:
    """Detection and false-alarm rates of one prediction grid (or stack of grids)."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), pred.shape)
    target = truth & valid
    background = ~truth & valid
    return MetricResult.from_counts((pred & target).sum(), (pred & background).sum(),
                                    target.sum(), background.sum())


def pool(results) -> MetricResult:
    results = list(results)
    if not results:
        raise InvalidInputError("nothing to pool")
    total = results[0]
    for r in results[1:]:
        total = total + r
    return total


@dataclass
class RocCurve:
    """ROC points ordered by false-alarm rate, with the threshold of each point."""

    pf: np.ndarray
    pd: np.ndarray
    thresholds: np.ndarray
    auc: float = field(init=False)

    def __post_init__(self):
        order = np.lexsort((self.pd, self.pf))
        self.pf = np.asarray(self.pf, dtype=float)[order]
        self.pd = np.asarray(self.pd, dtype=float)[order]
        self.thresholds = np.asarray(self.thresholds, dtype=float)[order]
        self.auc = roc_auc(self.pf, self.pd)


def roc_auc(pf, pd) -> float:
    """Trapezoidal area under ``(pf, pd)`` points, extended with (0, 0) and (1, 1)."""
    order = np.lexsort((pd, pf))
    x = np.concatenate([[0.0], np.asarray(pf, dtype=float)[order], [1.0]])
    y = np.concatenate([[0.0], np.asarray(pd, dtype=float)[order], [1.0]])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def roc_from_scores(target_scores, background_scores, thresholds, strict: bool = False) -> RocCurve:
    """Sweep a decision rule ``score >= t`` (``> t`` when ``strict``) over pooled cell scores."""
    target_scores = np.sort(np.asarray(target_scores, dtype=float))
    background_scores = np.sort(np.asarray(background_scores, dtype=float))
    thresholds = np.asarray(thresholds, dtype=float)
    side = "right" if strict else "left"
    n_t, n_b = target_scores.size, background_scores.size
    pd = (n_t - np.searchsorted(target_scores, thresholds, side=side)) / max(n_t, 1)
    pf = (n_b - np.searchsorted(background_scores, thresholds, side=side)) / max(n_b, 1)
    return RocCurve(pf, pd, thresholds)


def _split_scores(scores, truths, valid):
    target, background = [], []
    for s, t in zip(scores, truths):
        t = np.asarray(t, dtype=bool)
        v = np.ones(t.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        target.append(np.asarray(s)[t & v])
        background.append(np.asarray(s)[~t & v])
    if not target:
        raise InvalidInputError("empty evaluation split")
    return np.concatenate(target), np.concatenate(background)


def subsample_thresholds(values, max_thresholds: int = 512) -> np.ndarray:
    unique = np.unique(values)
    if unique.size <= max_thresholds:
        return unique
    idx = np.unique(np.round(np.linspace(0, unique.size - 1, max_thresholds)).astype(int))
    return unique[idx]


def roc_probabilities(probs, truths, valid=None, max_thresholds: int = 512) -> RocCurve:
    """ROC of per-cell probabilities swept over their own sorted unique values."""
    target, background = _split_scores(probs, truths, valid)
    thresholds = subsample_thresholds(np.concatenate([target, background]), max_thresholds)
    return roc_from_scores(target, background, thresholds)


def roc_model(model, samples, valid=None, max_thresholds: int = 512, batch_size: int = 32) -> RocCurve:
    """ROC of a trained detector over a list of labelled samples."""
    from .model import predict_proba

    if not samples:
        raise InvalidInputError("empty evaluation split")
    probs = predict_proba(model, [s.frame for s in samples], batch_size)
    return roc_probabilities(probs, [s.mask for s in samples], valid, max_thresholds)


def default_threshold_grid(n: int = 600) -> np.ndarray:
    """Zero plus a log-spaced sweep wide enough for exponential clutter."""
    return np.concatenate([[0.0], np.geomspace(1e-2, 1e4, n - 1)])


def cfar_ratios(frame_values, variant: CfarVariant, window: CfarWindow) -> np.ndarray:
    """Per-cell ``u / F``; a cell is detected at threshold factor ``T`` iff ratio > T."""
    values = np.asarray(frame_values, dtype=float)
    stat, _ = cfar_statistic(values, variant, window)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = values / stat
    ratio[~np.isfinite(stat)] = -np.inf
    ratio[np.isnan(ratio)] = -np.inf
    return ratio


def cfar_valid_mask(grid, window: CfarWindow) -> np.ndarray:
    hr, ha = window.half_extent
    valid = np.zeros(grid, dtype=bool)
    valid[hr:grid[0] - hr, ha:grid[1] - ha] = True
    return valid


def _ratios_for(samples, variant, window):
    if window.dims == 2:
        return [cfar_ratios(s.frame.values, variant, window) for s in samples]
    # 1D detectors run along range, one azimuth column at a time
    return [np.stack([cfar_ratios(col, variant, window) for col in s.frame.values.T], axis=1)
            for s in samples]


def roc_cfar(variant, window: CfarWindow, samples, thresholds=None, valid=None) -> RocCurve:
    """ROC of a CFAR detector swept over a grid of threshold factors."""
    if isinstance(variant, str):
        variant = CfarVariant.parse(variant)
    if not samples:
        raise InvalidInputError("empty evaluation split")
    thresholds = default_threshold_grid() if thresholds is None else np.asarray(thresholds, dtype=float)
    if np.any(thresholds < 0) or np.any(np.diff(thresholds) < 0):
        raise InvalidInputError("threshold grid must be non-negative and sorted")
    if valid is None:
        valid = cfar_valid_mask(samples[0].mask.shape, window)
    ratios = _ratios_for(samples, variant, window)
    target, background = _split_scores(ratios, [s.mask for s in samples], valid)
    return roc_from_scores(target, background, thresholds, strict=True)


def cfar_metrics(variant, window: CfarWindow, samples, threshold: float, valid=None) -> MetricResult:
    if isinstance(variant, str):
        variant = CfarVariant.parse(variant)
    if valid is None:
        valid = cfar_valid_mask(samples[0].mask.shape, window)
    ratios = _ratios_for(samples, variant, window)
    return pool(pd_pf(r > threshold, s.mask, valid) for r, s in zip(ratios, samples))


def model_metrics(model, samples, tau: float = 0.5, valid=None) -> MetricResult:
    from .model import predict_proba

    probs = predict_proba(model, [s.frame for s in samples])
    return pool(pd_pf(p >= tau, s.mask, valid) for p, s in zip(probs, samples))


# ---------------------------------------------------------------- reports

def write_pgm(path, image) -> Path:
    """Binary greyscale PGM (P5), one byte per pixel, min-max scaled."""
    image = np.asarray(image, dtype=float)
    lo, hi = image.min(), image.max()
    scaled = np.zeros(image.shape) if hi == lo else (image - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise InvalidInputError(f"{path} is not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def panel_grid(frame, prediction, truth, gap: int = 1) -> np.ndarray:
    """Side-by-side panels, each min-max scaled to [0, 1] on its own."""
    panels = []
    for p in (frame, prediction, truth):
        p = np.asarray(p, dtype=float)
        lo, hi = p.min(), p.max()
        panels.append(np.zeros(p.shape) if hi == lo else (p - lo) / (hi - lo))
    spacer = np.ones((panels[0].shape[0], gap))
    out = [panels[0]]
    for p in panels[1:]:
        out += [spacer, p]
    return np.hstack(out)


@dataclass
class ReportEntry:
    """One method's results; any field may be left empty."""

    method: str
    metrics: MetricResult | None = None
    roc: RocCurve | None = None
    panels: list = field(default_factory=list)


def metrics_csv(entries) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "pd", "pf", "hits", "fas", "targets", "background"])
    rows = sorted((e for e in entries if e.metrics is not None),
                  key=lambda e: (-e.metrics.pd, e.method))
    for e in rows:
        m = e.metrics
        writer.writerow([e.method, repr(m.pd), repr(m.pf), m.n_hits, m.n_false_alarms,
                         m.n_target_cells, m.n_background_cells])
    return buf.getvalue()


def roc_csv(method: str, roc: RocCurve) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "threshold", "pf", "pd"])
    for t, f, d in zip(roc.thresholds, roc.pf, roc.pd):
        writer.writerow([method, repr(float(t)), repr(float(f)), repr(float(d))])
    return buf.getvalue()


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def compare_report(entries, out_dir) -> list[Path]:
    """Write ``metrics.csv``, ``auc.csv``, one ROC CSV per method and PGM panels."""
    entries = list(entries)
    if not entries:
        raise InvalidInputError("compare_report needs at least one entry")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    path = out_dir / "metrics.csv"
    path.write_text(metrics_csv(entries))
    written.append(path)
    with_roc = [e for e in entries if e.roc is not None]
    if with_roc:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "auc"])
        for e in sorted(with_roc, key=lambda e: (-e.roc.auc, e.method)):
            writer.writerow([e.method, repr(e.roc.auc)])
        path = out_dir / "auc.csv"
        path.write_text(buf.getvalue())
        written.append(path)
    for e in with_roc:
        path = out_dir / f"roc_{_slug(e.method)}.csv"
        path.write_text(roc_csv(e.method, e.roc))
        written.append(path)
    for e in entries:
        for i, (frame, pred, truth) in enumerate(e.panels):
            written.append(write_pgm(out_dir / f"panel_{_slug(e.method)}_{i:03d}.pgm",
                                     panel_grid(frame, pred, truth)))
    return written
