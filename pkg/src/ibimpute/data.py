"""Multivariate series loading, windowing, splitting, masking, scaling.

Conventions used throughout:

* arrays are time-major ``[T, N]`` float64;
* masks are {0, 1} with 1 = observed / kept visible;
* the model input is the literal product ``x * observed_mask * artificial_mask``
  (hidden entries become zeros, no learned missing token);
* evaluation positions are exactly the entries that are observed in the
  source but hidden by the artificial mask.

CSV format: one header row of variable names, one row per timestep, empty
cell = natively missing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .rng import STREAM_SYNTH, SplitMix64, derive

POINT = "point"
BLOCK = "block"


class CsvFormatError(ValueError):
    """Malformed input CSV (ragged row, non-numeric cell, no data)."""


class SplitError(ValueError):
    """Chronological split cannot produce usable segments."""


class MaskError(ValueError):
    """Invalid mask specification."""


@dataclass
class Dataset:
    """A full multivariate series with its native missingness mask."""

    values: np.ndarray          # [T_total, N]
    native_mask: np.ndarray     # [T_total, N], 1 = present in source
    variable_names: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.native_mask = np.asarray(self.native_mask, dtype=np.float64)
        if self.values.shape != self.native_mask.shape:
            raise ValueError(
                f"values {self.values.shape} and native_mask "
                f"{self.native_mask.shape} differ"
            )
        if not np.all(np.isfinite(self.values[self.native_mask == 1.0])):
            raise ValueError("observed entries must be finite")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]


@dataclass
class Window:
    """A fixed-length slice of a dataset, before artificial masking."""

    x: np.ndarray         # [T, N] ground truth (0 where natively missing)
    m_obs: np.ndarray     # [T, N] observed-in-source mask
    index: int = 0        # position among the windows of its split

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape


@dataclass
class TimeSeriesWindow:
    """A window with an artificial training/eval mask applied.

    ``m_art`` marks entries kept visible (1) or artificially hidden (0);
    entries not observed in the source always keep ``m_art == 1`` so that
    evaluation positions, ``m_obs == 1 and m_art == 0``, never include
    natively missing cells.
    """

    x: np.ndarray
    m_obs: np.ndarray
    m_art: np.ndarray
    x_masked: np.ndarray
    realized_rate: float
    index: int = 0

    @property
    def eval_mask(self) -> np.ndarray:
        return self.m_obs * (1.0 - self.m_art)


@dataclass(frozen=True)
class MaskSpec:
    """How to generate artificial masks.

    ``rate`` is the target fraction of observed entries to hide.  For the
    block pattern, hiding proceeds per variable in runs of ``block_len``
    until at least ``rate`` of that variable's observed entries are hidden;
    the final run is truncated to the remaining quota.
    """

    pattern: str = POINT
    rate: float = 0.5
    block_len: int = 4
    seed: int = 0

    def validate(self, window_len: int | None = None) -> None:
        if self.pattern not in (POINT, BLOCK):
            raise MaskError(f"unknown mask pattern {self.pattern!r}")
        if not (0.0 <= self.rate < 1.0):
            raise MaskError(f"mask rate must be in [0, 1), got {self.rate}")
        if self.pattern == BLOCK:
            if self.block_len < 1:
                raise MaskError(f"block_len must be >= 1, got {self.block_len}")
            if window_len is not None and self.block_len > window_len:
                raise MaskError(
                    f"block_len {self.block_len} exceeds window length {window_len}"
                )


def load_csv(path: str) -> Dataset:
    """Read a dataset CSV; empty cells become natively-missing zeros."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        names = [h.strip() for h in header]
        n = len(names)
        rows: list[list[float]] = []
        mask_rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n:
                raise CsvFormatError(
                    f"{path}: line {lineno}: expected {n} cells, got {len(row)}"
                )
            vals, mask = [], []
            for col, cell in enumerate(row):
                cell = cell.strip()
                if cell == "":
                    vals.append(0.0)
                    mask.append(0.0)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: line {lineno}: non-numeric cell "
                        f"{cell!r} in column {names[col]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise CsvFormatError(
                        f"{path}: line {lineno}: non-finite value in column "
                        f"{names[col]!r}"
                    )
                vals.append(v)
                mask.append(1.0)
            rows.append(vals)
            mask_rows.append(mask)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(mask_rows), names)


def write_csv(path: str, ds: Dataset) -> None:
    """Inverse of :func:`load_csv`; natively missing cells become empty."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ds.variable_names)
        for t in range(ds.length):
            writer.writerow(
                [
                    repr(float(ds.values[t, i])) if ds.native_mask[t, i] == 1.0 else ""
                    for i in range(ds.n_vars)
                ]
            )


def chrono_split(
    ds: Dataset,
    window_len: int,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> tuple[Dataset, Dataset, Dataset]:
    """Split into contiguous train/val/test segments, in time order."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {fractions}")
    t = ds.length
    n_train = int(math.floor(fractions[0] * t))
    n_val = int(math.floor(fractions[1] * t))
    n_test = t - n_train - n_val
    bounds = {"train": n_train, "val": n_val, "test": n_test}
    for name, size in bounds.items():
        if size <= 0:
            raise SplitError(f"empty split: {name} segment has length {size}")
        if size < window_len:
            raise SplitError(
                f"{name} segment of length {size} is shorter than window {window_len}"
            )
    parts = []
    start = 0
    for size in (n_train, n_val, n_test):
        parts.append(
            Dataset(
                ds.values[start : start + size].copy(),
                ds.native_mask[start : start + size].copy(),
                list(ds.variable_names),
            )
        )
        start += size
    return parts[0], parts[1], parts[2]


def make_windows(segment: Dataset, window_len: int, stride: int) -> list[Window]:
    """Fixed-length windows at the given stride; floor((len-T)/stride)+1 of them."""
    if window_len > segment.length:
        raise SplitError(
            f"window length {window_len} exceeds segment length {segment.length}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    windows = []
    for k, start in enumerate(range(0, segment.length - window_len + 1, stride)):
        windows.append(
            Window(
                x=segment.values[start : start + window_len].copy(),
                m_obs=segment.native_mask[start : start + window_len].copy(),
                index=k,
            )
        )
    return windows


def _point_mask(window: Window, spec: MaskSpec, rng: SplitMix64) -> np.ndarray:
    t, n = window.shape
    u = rng.uniforms(t * n).reshape(t, n)
    hidden = (u < spec.rate) & (window.m_obs == 1.0)
    return 1.0 - hidden.astype(np.float64)


def _block_mask_column(
    hidden: np.ndarray, obs: np.ndarray, spec: MaskSpec, rng: SplitMix64
) -> None:
    """Hide runs in one variable's column (in place) until the quota is met.

    Placement keeps one un-hidden cell between runs so every run has exactly
    the configured length; if that becomes infeasible before the quota is
    met, adjacency is allowed, and as a last resort remaining observed cells
    are hidden left to right.
    """
    t = hidden.shape[0]
    n_obs = int(obs.sum())
    quota = int(math.ceil(spec.rate * n_obs))
    if quota == 0:
        return

    def hidden_obs() -> int:
        return int((hidden & (obs == 1.0)).sum())

    for allow_touching in (False, True):
        stalled = False
        while hidden_obs() < quota and not stalled:
            length = min(spec.block_len, t)
            starts = []
            for s in range(t - length + 1):
                if hidden[s : s + length].any():
                    continue
                if not allow_touching:
                    if s > 0 and hidden[s - 1]:
                        continue
                    if s + length < t and hidden[s + length]:
                        continue
                starts.append(s)
            if not starts:
                stalled = True
                continue
            s = starts[rng.below(len(starts))]
            remaining = quota - hidden_obs()
            run = length
            if int(obs[s : s + length].sum()) > remaining:
                # truncate the final run to the remaining quota of observed cells
                run, seen = 0, 0
                while seen < remaining:
                    if obs[s + run] == 1.0:
                        seen += 1
                    run += 1
            hidden[s : s + run] = True
        if hidden_obs() >= quota:
            return
    for s in range(t):
        if hidden_obs() >= quota:
            return
        if obs[s] == 1.0 and not hidden[s]:
            hidden[s] = True


def apply_mask(window: Window, spec: MaskSpec) -> TimeSeriesWindow:
    """Generate this window's artificial mask from ``spec``'s seeded stream.

    The stream is derived from ``(spec.seed, window.index)`` so masking is
    reproducible and windows can be processed in any order.
    """
    spec.validate(window_len=window.shape[0])
    rng = SplitMix64(derive(spec.seed, window.index))
    if spec.pattern == POINT:
        m_art = _point_mask(window, spec, rng)
    else:
        t, n = window.shape
        hidden = np.zeros((t, n), dtype=bool)
        for col in range(n):
            _block_mask_column(hidden[:, col], window.m_obs[:, col], spec, rng)
        m_art = np.where(hidden & (window.m_obs == 1.0), 0.0, 1.0)
    n_obs = window.m_obs.sum()
    realized = float(((1.0 - m_art) * window.m_obs).sum() / n_obs) if n_obs else 0.0
    return TimeSeriesWindow(
        x=window.x,
        m_obs=window.m_obs,
        m_art=m_art,
        x_masked=window.x * window.m_obs * m_art,
        realized_rate=realized,
        index=window.index,
    )


@dataclass
class Normalizer:
    """Per-variable standardization fitted on training observations only."""

    mean: np.ndarray  # [N]
    std: np.ndarray   # [N], constant variables forced to 1

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def fit_normalizer(train_windows: list[Window]) -> Normalizer:
    """Population mean/std over observed entries of the training windows."""
    if not train_windows:
        raise ValueError("fit_normalizer: no training windows")
    n = train_windows[0].shape[1]
    mean = np.zeros(n)
    std = np.ones(n)
    xs = np.stack([w.x for w in train_windows])       # [W, T, N]
    ms = np.stack([w.m_obs for w in train_windows])
    for i in range(n):
        vals = xs[:, :, i][ms[:, :, i] == 1.0]
        if vals.size == 0:
            continue
        mean[i] = vals.mean()
        s = vals.std()  # population (ddof=0)
        std[i] = s if s > 0.0 else 1.0
    return Normalizer(mean=mean, std=std)


def normalize_window(window: Window, norm: Normalizer) -> Window:
    return replace(window, x=norm.normalize(window.x) * window.m_obs)


def make_synthetic(
    n_vars: int, t_total: int, seed: int, noise_std: float = 0.1
) -> Dataset:
    """Fully observed sum-of-two-sinusoids series, seeded.

    Each variable gets two components with period in [12, 48] steps,
    amplitude in [0.5, 2], uniform phase, plus Gaussian noise.
    """
    if n_vars < 1:
        raise ValueError(f"n_vars must be >= 1, got {n_vars}")
    if t_total < 1:
        raise ValueError(f"t_total must be >= 1, got {t_total}")
    rng = SplitMix64(derive(seed, STREAM_SYNTH))
    t = np.arange(t_total, dtype=np.float64)
    values = np.zeros((t_total, n_vars))
    for i in range(n_vars):
        for _ in range(2):
            period = 12.0 + 36.0 * rng.uniform()
            amplitude = 0.5 + 1.5 * rng.uniform()
            phase = 2.0 * np.pi * rng.uniform()
            values[:, i] += amplitude * np.sin(2.0 * np.pi * t / period + phase)
        if noise_std > 0.0:
            values[:, i] += noise_std * rng.normals(t_total)
    names = [f"v{i + 1}" for i in range(n_vars)]
    return Dataset(values, np.ones_like(values), names)
