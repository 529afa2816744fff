"""Classical CFAR detectors (CA, OS, GO, SO) in 1D and 2D sliding-window form.

Every detector follows the same two-operator template: a *selecting*
statistic ``F`` computed over the training cells around the cell under
test, and a *testing* value ``H`` that is simply the cell itself.  The
score of a cell is ``T * F - H`` and the cell is declared a detection when
the score is negative, i.e. when the cell exceeds ``T`` times the local
noise estimate.

Cells whose window does not fit inside the grid get a score of ``+inf``
and are never detections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CalibrationError, InvalidInputError

VARIANTS = ("CA", "OS", "GO", "SO")


@dataclass(frozen=True)
class CfarVariant:
    """Which selecting statistic to use.

    ``k`` is the 1-based order index for OS-CFAR.  When it is ``None`` the
    default ``ceil(3/4 * n_train)`` is used.
    """

    kind: str = "CA"
    k: int | None = None

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in VARIANTS:
            raise InvalidInputError(f"unknown CFAR variant {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.k is not None and kind != "OS":
            raise InvalidInputError("order index only applies to OS-CFAR")
        if self.k is not None and self.k < 1:
            raise InvalidInputError(f"OS order index must be >= 1, got {self.k}")

    @classmethod
    def parse(cls, text: str) -> "CfarVariant":
        """Parse ``"ca"``, ``"os"``, ``"os:12"`` and similar."""
        kind, _, k = text.partition(":")
        return cls(kind, int(k) if k else None)

    def order_index(self, n_train: int) -> int:
        k = self.k if self.k is not None else math.ceil(3 * n_train / 4)
        if not 1 <= k <= n_train:
            raise InvalidInputError(f"OS order index {k} outside [1, {n_train}]")
        return k

    def __str__(self):
        if self.kind == "OS" and self.k is not None:
            return f"OS:{self.k}"
        return self.kind


def _pair(value) -> tuple[int, int]:
    if np.ndim(value) == 0:
        return int(value), int(value)
    r, a = value
    return int(r), int(a)


@dataclass(frozen=True)
class CfarWindow:
    """Training/guard geometry.

    In 1D the counts are per side of the cell under test.  In 2D they may be
    given as a ``(range, azimuth)`` pair; the training cells form a
    rectangular ring of that width around a rectangular guard box.
    """

    train_cells_per_side: int | tuple[int, int] = 8
    guard_cells_per_side: int | tuple[int, int] = 2
    dims: int = 1

    def __post_init__(self):
        if self.dims not in (1, 2):
            raise InvalidInputError("dims must be 1 or 2")
        if self.dims == 1:
            if np.ndim(self.train_cells_per_side) or np.ndim(self.guard_cells_per_side):
                raise InvalidInputError("1D windows take scalar cell counts")
            if self.train_cells_per_side < 1:
                raise InvalidInputError("need at least one training cell per side")
            if self.guard_cells_per_side < 0:
                raise InvalidInputError("guard cell count must be >= 0")
        else:
            t, g = self.train, self.guard
            if min(t) < 0 or min(g) < 0:
                raise InvalidInputError("cell counts must be non-negative")
            if self.n_train < 1:
                raise InvalidInputError("window has no training cells")

    @classmethod
    def default_2d(cls) -> "CfarWindow":
        return cls(4, 2, dims=2)

    @property
    def train(self) -> tuple[int, int]:
        return _pair(self.train_cells_per_side)

    @property
    def guard(self) -> tuple[int, int]:
        return _pair(self.guard_cells_per_side)

    @property
    def half_extent(self) -> tuple[int, int]:
        """Distance from the cell under test to the window edge, per axis."""
        (tr, ta), (gr, ga) = self.train, self.guard
        if self.dims == 1:
            return tr + gr, 0
        return tr + gr, ta + ga

    @property
    def span(self) -> tuple[int, int]:
        hr, ha = self.half_extent
        return 2 * hr + 1, 2 * ha + 1

    @property
    def n_train(self) -> int:
        if self.dims == 1:
            return 2 * self.train_cells_per_side
        gr, ga = self.guard
        sr, sa = self.span
        return sr * sa - (2 * gr + 1) * (2 * ga + 1)

    def offsets(self):
        """Boolean ring mask plus leading/lagging sub-masks over the window.

        Leading cells sit at smaller range (before the cell under test in
        1D); lagging at larger range.  Ring cells on the cell's own range
        line belong to neither half.
        """
        sr, sa = self.span
        hr, ha = self.half_extent
        gr, ga = self.guard if self.dims == 2 else (self.guard_cells_per_side, 0)
        dr = np.arange(sr)[:, None] - hr
        da = np.arange(sa)[None, :] - ha
        guard_box = (np.abs(dr) <= gr) & (np.abs(da) <= ga)
        ring = ~guard_box
        leading = ring & (dr < 0)
        lagging = ring & (dr > 0)
        return ring, leading, lagging


@dataclass(frozen=True)
class CfarConfig:
    variant: CfarVariant = field(default_factory=CfarVariant)
    window: CfarWindow = field(default_factory=CfarWindow)
    threshold_factor: float = 1.0

    def __post_init__(self):
        if not self.threshold_factor >= 0:
            raise InvalidInputError("threshold_factor must be >= 0")
        if self.variant.kind == "OS":
            self.variant.order_index(self.window.n_train)


@dataclass
class CfarOutput:
    """Scores, detections and the region where the full window fits.

    ``valid_region`` holds one ``slice`` per grid axis.
    """

    scores: np.ndarray
    mask: np.ndarray
    valid_region: tuple[slice, ...]

    def valid_mask(self) -> np.ndarray:
        valid = np.zeros(self.scores.shape, dtype=bool)
        valid[self.valid_region] = True
        return valid


def select_statistic(leading, lagging, variant: CfarVariant) -> float:
    """Selecting operator over one neighbourhood split into two halves.

    >>> select_statistic([1, 2], [3, 4], CfarVariant("CA"))
    2.5
    """
    leading = np.asarray(leading, dtype=float).ravel()
    lagging = np.asarray(lagging, dtype=float).ravel()
    cells = np.concatenate([leading, lagging])
    if cells.size == 0:
        raise InvalidInputError("empty training neighbourhood")
    if variant.kind == "CA":
        return float(cells.mean())
    if variant.kind == "OS":
        k = variant.order_index(cells.size)
        return float(np.partition(cells, k - 1)[k - 1])
    if leading.size == 0 or lagging.size == 0:
        raise InvalidInputError("GO/SO need both leading and lagging cells")
    means = (leading.mean(), lagging.mean())
    return float(max(means) if variant.kind == "GO" else min(means))


def _window_statistic(windows: np.ndarray, window: CfarWindow, variant: CfarVariant) -> np.ndarray:
    """Vectorised selecting operator over ``(..., span_r, span_a)`` windows."""
    ring, leading, lagging = window.offsets()
    if variant.kind == "CA":
        return windows[..., ring].mean(axis=-1)
    if variant.kind == "OS":
        cells = windows[..., ring]
        k = variant.order_index(cells.shape[-1])
        return np.partition(cells, k - 1, axis=-1)[..., k - 1]
    if not leading.any() or not lagging.any():
        raise InvalidInputError("GO/SO need training cells on both range sides")
    lead = windows[..., leading].mean(axis=-1)
    lag = windows[..., lagging].mean(axis=-1)
    return np.maximum(lead, lag) if variant.kind == "GO" else np.minimum(lead, lag)


def cfar_statistic(values: np.ndarray, variant: CfarVariant, window: CfarWindow):
    """Return the selecting statistic ``F`` over the grid and the valid region.

    Cells outside the valid region hold ``nan``.  Works for 1D sequences
    (``window.dims == 1``) and 2D ``(range, azimuth)`` grids.
    """
    values = np.asarray(values, dtype=float)
    hr, ha = window.half_extent
    sr, sa = window.span
    if window.dims == 1:
        if values.ndim != 1:
            raise InvalidInputError("1D CFAR expects a 1D sequence")
        if values.size < sr:
            raise InvalidInputError(f"sequence length {values.size} shorter than window span {sr}")
        windows = sliding_window_view(values, sr)[:, :, None]
        valid = (slice(hr, values.size - hr),)
    else:
        if values.ndim != 2:
            raise InvalidInputError("2D CFAR expects a (range, azimuth) grid")
        if values.shape[0] < sr or values.shape[1] < sa:
            raise InvalidInputError(f"frame {values.shape} smaller than window footprint {(sr, sa)}")
        windows = sliding_window_view(values, (sr, sa))
        valid = (slice(hr, values.shape[0] - hr), slice(ha, values.shape[1] - ha))
    stat = np.full(values.shape, np.nan)
    stat[valid] = _window_statistic(windows, window, variant)
    return stat, valid


def _detect(values, cfg: CfarConfig) -> CfarOutput:
    values = np.asarray(values, dtype=float)
    stat, valid = cfar_statistic(values, cfg.variant, cfg.window)
    scores = np.full(values.shape, np.inf)
    scores[valid] = cfg.threshold_factor * stat[valid] - values[valid]
    return CfarOutput(scores=scores, mask=scores < 0, valid_region=valid)


def cfar_detect_1d(u, cfg: CfarConfig) -> CfarOutput:
    """Run a 1D CFAR detector along a sequence."""
    if cfg.window.dims != 1:
        raise InvalidInputError("cfar_detect_1d needs a 1D window")
    return _detect(u, cfg)


def cfar_detect_2d(frame, cfg: CfarConfig) -> CfarOutput:
    """Run a 2D CFAR detector over a ``(range, azimuth)`` grid.

    ``frame`` may be a plain array or anything with a ``values`` attribute
    (such as :class:`ssmcfar.datagen.RangeAzimuthFrame`).
    """
    if cfg.window.dims != 2:
        raise InvalidInputError("cfar_detect_2d needs a 2D window")
    return _detect(getattr(frame, "values", frame), cfg)


def _ca_closed_form(n_train: int, target_pfa: float) -> float:
    return n_train * (target_pfa ** (-1.0 / n_train) - 1.0)


def _sample_statistic(variant: CfarVariant, n_train: int, n_cells: int, rng) -> np.ndarray:
    """Draw the selecting statistic under unit-mean exponential noise."""
    if variant.kind == "CA":
        return rng.gamma(n_train, 1.0 / n_train, size=n_cells)
    if variant.kind == "OS":
        # k-th order statistic of n exponentials via the Beta(k, n-k+1) uniform order statistic
        k = variant.order_index(n_train)
        u = rng.beta(k, n_train - k + 1, size=n_cells)
        return -np.log1p(-u)
    half = n_train // 2
    if half < 1:
        raise InvalidInputError("GO/SO need at least two training cells")
    lead = rng.gamma(half, 1.0 / half, size=n_cells)
    lag = rng.gamma(half, 1.0 / half, size=n_cells)
    return np.maximum(lead, lag) if variant.kind == "GO" else np.minimum(lead, lag)


def empirical_pfa(stat_samples: np.ndarray, threshold: float) -> float:
    """False-alarm probability of ``u > T*F`` for a unit-mean exponential cell.

    The cell under test is integrated out analytically, so this is the
    sample mean of ``exp(-T*F)`` over the statistic samples.
    """
    return float(np.mean(np.exp(-threshold * stat_samples)))


def threshold_factor(
    variant: CfarVariant | str,
    n_train: int,
    target_pfa: float,
    *,
    n_cells: int = 1_000_000,
    rtol: float = 0.05,
    max_iter: int = 200,
    seed: int = 0,
) -> float:
    """Threshold factor ``T`` giving ``target_pfa`` under exponential noise.

    CA-CFAR uses the closed form ``n (pfa^(-1/n) - 1)``.  The other variants
    bisect on a Monte-Carlo estimate over ``n_cells`` noise cells, stopping
    once the estimate is within ``rtol`` (relative) of the target.
    ``target_pfa == 1`` is accepted as the degenerate limit and yields 0.
    """
    if isinstance(variant, str):
        variant = CfarVariant.parse(variant)
    if n_train < 1:
        raise InvalidInputError("n_train must be >= 1")
    if not 0.0 < target_pfa <= 1.0:
        raise InvalidInputError(f"target_pfa must lie in (0, 1), got {target_pfa}")
    if target_pfa == 1.0:
        return 0.0
    if variant.kind == "CA":
        return _ca_closed_form(n_train, target_pfa)

    rng = np.random.default_rng(seed)
    samples = _sample_statistic(variant, n_train, n_cells, rng)
    lo, hi = 0.0, 1.0
    while empirical_pfa(samples, hi) > target_pfa:
        lo, hi = hi, 2.0 * hi
        if hi > 1e12:
            raise CalibrationError("could not bracket the threshold factor")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        pfa = empirical_pfa(samples, mid)
        if abs(pfa - target_pfa) / target_pfa < rtol:
            return mid
        if pfa > target_pfa:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(f"bisection did not converge after {max_iter} iterations")
