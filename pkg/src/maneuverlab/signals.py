"""Bivariate acceleration series: loading, normalization, windowing, synthesis
and ADF-based maneuver-state labeling.

Conventions used throughout the package:

* series values are (features, time) with row 0 = a_lat, row 1 = a_lon,
  both as fractions of g;
* missing measurements are mask=False and stored as 0.0, which serves the
  zero-padding convention of the contrastive learner and the mask
  convention of the generative learner at the same time;
* normalization divides each feature by its max absolute value, mapping
  into [-1, 1] while keeping zeros exactly zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .stationarity import adf_test, default_max_lags

__all__ = [
    "FEATURE_NAMES",
    "MultivariateSeries",
    "WindowBatch",
    "Regime",
    "Segment",
    "SynthConfig",
    "load_csv",
    "save_csv",
    "normalize",
    "make_windows",
    "reassemble",
    "synthesize",
    "four_state_config",
    "label_states",
    "as_feature_matrix",
    "observation_mask",
    "ensure_normalized",
    "temporal_split",
]

FEATURE_NAMES = ("a_lat", "a_lon")

N_STATES = 4


@dataclass
class MultivariateSeries:
    """An (F, T) signal with optional observation mask and per-step state labels."""

    values: np.ndarray
    mask: np.ndarray | None = None
    labels: np.ndarray | None = None
    sample_rate_hint: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"series values must be (features, time), got shape {self.values.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise ValueError(f"mask shape {self.mask.shape} != values shape {self.values.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.values.shape[1],):
                raise ValueError("labels must be one state id per timestep")

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def observed_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones_like(self.values, dtype=bool)
        return self.mask


@dataclass
class WindowBatch:
    """Non-overlapping (F, size) windows tiling a series, last one zero-padded."""

    windows: np.ndarray       # (N, F, size)
    masks: np.ndarray         # (N, F, size); padding is False
    start_indices: np.ndarray  # (N,)
    window_size: int

    @property
    def n_windows(self) -> int:
        return self.windows.shape[0]


def as_feature_matrix(x) -> np.ndarray:
    """Accept a MultivariateSeries or a samples-by-features array; return (F, T)."""
    if isinstance(x, MultivariateSeries):
        return x.values
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d array of shape (n_timesteps, n_features), got {arr.shape}")
    return arr.T


def observation_mask(x) -> np.ndarray | None:
    """The (F, T) observation mask of a series-like input, or None if absent."""
    if isinstance(x, MultivariateSeries):
        return x.mask
    return None


def ensure_normalized(values: np.ndarray):
    """Raise unless every value is inside [-1, 1] (the training precondition)."""
    peak = np.max(np.abs(values))
    if peak > 1.0 + 1e-12:
        raise ValueError(
            f"series is not normalized (max |value| = {peak:.3g} > 1); apply signals.normalize first"
        )


def temporal_split(values: np.ndarray, window: int, train_fraction: float,
                   mask: np.ndarray | None = None):
    """Split a series at a window boundary into train and held-out parts.

    Returns (train_values, heldout_values, train_mask, heldout_mask); at
    least one window lands on each side.
    """
    n_windows = -(-values.shape[1] // window)
    if n_windows < 2:
        raise ValueError(f"need at least 2 windows, got {n_windows}")
    n_train = max(1, int(n_windows * train_fraction))
    if n_train == n_windows:
        n_train = n_windows - 1
    boundary = n_train * window
    train_mask = heldout_mask = None
    if mask is not None:
        train_mask, heldout_mask = mask[:, :boundary], mask[:, boundary:]
    return values[:, :boundary], values[:, boundary:], train_mask, heldout_mask


def load_csv(path) -> MultivariateSeries:
    """Read a series from CSV with columns a_lat, a_lon [, mask_*, state].

    NaN or empty cells without an explicit mask column become mask=False
    with the value stored as 0.0.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [name for name in FEATURE_NAMES if name not in header]
        if missing:
            raise ValueError(f"{path}: missing required columns {missing}; found {header}")
        col = {name: header.index(name) for name in header}
        has_mask = all(f"mask_{name}" in col for name in FEATURE_NAMES)
        has_labels = "state" in col

        values, mask, labels = [], [], []
        for row_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            vals, obs = [], []
            for name in FEATURE_NAMES:
                cell = row[col[name]].strip()
                if cell == "" or cell.lower() == "nan":
                    vals.append(0.0)
                    obs.append(False)
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise ValueError(f"{path}: row {row_number}: non-numeric value {cell!r} in column {name}") from None
                if math.isnan(value):
                    vals.append(0.0)
                    obs.append(False)
                else:
                    vals.append(value)
                    obs.append(True)
            if has_mask:
                for i, name in enumerate(FEATURE_NAMES):
                    cell = row[col[f"mask_{name}"]].strip()
                    obs[i] = obs[i] and cell not in ("0", "0.0", "false", "False")
                    if not obs[i]:
                        vals[i] = 0.0
            values.append(vals)
            mask.append(obs)
            if has_labels:
                cell = row[col["state"]].strip()
                try:
                    labels.append(int(float(cell)))
                except ValueError:
                    raise ValueError(f"{path}: row {row_number}: non-numeric state {cell!r}") from None

    if not values:
        raise ValueError(f"{path}: no data rows")
    return MultivariateSeries(
        values=np.asarray(values, dtype=np.float64).T,
        mask=np.asarray(mask, dtype=bool).T,
        labels=np.asarray(labels, dtype=np.int64) if has_labels else None,
    )


def save_csv(series: MultivariateSeries, path):
    """Write a series with full float64 round-trip precision."""
    header = list(FEATURE_NAMES)
    write_mask = series.mask is not None and not series.mask.all()
    if write_mask:
        header += [f"mask_{name}" for name in FEATURE_NAMES]
    if series.labels is not None:
        header.append("state")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        mask = series.observed_mask()
        for t in range(series.length):
            row = [repr(float(v)) for v in series.values[:, t]]
            if write_mask:
                row += [str(int(m)) for m in mask[:, t]]
            if series.labels is not None:
                row.append(str(int(series.labels[t])))
            writer.writerow(row)


def normalize(series: MultivariateSeries) -> MultivariateSeries:
    """Scale each feature by its max |value| into [-1, 1], zeros untouched.

    Idempotent: re-normalizing a normalized series changes nothing.
    """
    scale = np.max(np.abs(series.values), axis=1)
    if np.any(scale == 0.0):
        dead = [FEATURE_NAMES[i] if i < len(FEATURE_NAMES) else str(i)
                for i in np.flatnonzero(scale == 0.0)]
        raise ValueError(f"normalize: all-zero feature(s) {dead}: division by zero")
    return replace(series, values=series.values / scale[:, None])


def make_windows(series: MultivariateSeries, size: int) -> WindowBatch:
    """Split into ceil(T / size) non-overlapping windows, zero-padding the tail.

    Padded positions carry mask=False.
    """
    size = int(size)
    if size < 1:
        raise ValueError(f"make_windows: window size must be >= 1, got {size}")
    if size > series.length:
        raise ValueError(f"make_windows: window size {size} exceeds series length {series.length}")
    f, t = series.values.shape
    n = -(-t // size)  # ceil
    padded = np.zeros((f, n * size))
    padded[:, :t] = series.values
    padded_mask = np.zeros((f, n * size), dtype=bool)
    padded_mask[:, :t] = series.observed_mask()
    windows = padded.reshape(f, n, size).transpose(1, 0, 2).copy()
    masks = padded_mask.reshape(f, n, size).transpose(1, 0, 2).copy()
    return WindowBatch(
        windows=windows,
        masks=masks,
        start_indices=np.arange(n) * size,
        window_size=size,
    )


def reassemble(batch: WindowBatch, length: int) -> np.ndarray:
    """Concatenate windows back into an (F, length) array, dropping padding."""
    n, f, size = batch.windows.shape
    flat = batch.windows.transpose(1, 0, 2).reshape(f, n * size)
    if length > flat.shape[1]:
        raise ValueError(f"reassemble: requested length {length} exceeds window content {flat.shape[1]}")
    return flat[:, :length].copy()


# ---------------------------------------------------------------------------
# synthetic signals


@dataclass(frozen=True)
class Regime:
    """Per-feature generating process for one segment.

    ``ar1`` (|phi| < 1) is the stationary regime; ``random_walk`` and
    ``drifting_sine`` are the non-stationary ones.  ``scale`` multiplies
    the innovations of this regime on top of the config's noise scale
    (useful to keep regimes at comparable amplitudes).
    """

    kind: str
    phi: float = 0.0
    amplitude: float = 1.0
    period: float = 200.0
    drift: float = 0.005
    scale: float = 1.0

    VALID = ("ar1", "random_walk", "drifting_sine")

    def __post_init__(self):
        if self.kind not in self.VALID:
            raise ValueError(f"unknown regime {self.kind!r}; valid: {self.VALID}")
        if self.kind == "ar1" and not abs(self.phi) < 1.0:
            raise ValueError(f"ar1 regime needs |phi| < 1, got {self.phi}")
        if self.scale <= 0.0:
            raise ValueError(f"regime scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class Segment:
    length: int
    lat: Regime
    lon: Regime


@dataclass(frozen=True)
class SynthConfig:
    length: int
    segments: tuple[Segment, ...]
    noise_scale: float = 1.0
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        total = sum(s.length for s in self.segments)
        if total != self.length:
            raise ValueError(f"segment lengths sum to {total}, expected length {self.length}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(f"missing_rate must be in [0, 1), got {self.missing_rate}")


def _generate_regime(regime: Regime, n: int, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    e = rng.normal(scale=noise_scale * regime.scale, size=n)
    if regime.kind == "ar1":
        x = np.empty(n)
        # start at the stationary distribution so segments are homogeneous
        x[0] = e[0] / math.sqrt(1.0 - regime.phi ** 2)
        for t in range(1, n):
            x[t] = regime.phi * x[t - 1] + e[t]
        return x
    if regime.kind == "random_walk":
        return np.cumsum(e)
    # drifting sinusoid, random phase per segment
    t = np.arange(n, dtype=np.float64)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    wander = regime.amplitude * np.sin(2.0 * math.pi * t / regime.period + phase)
    return wander + regime.drift * t + 0.1 * noise_scale * e


def synthesize(cfg: SynthConfig) -> MultivariateSeries:
    """Generate a piecewise-regime bivariate series, normalized, seed-deterministic."""
    rng = np.random.default_rng(cfg.seed)
    lat_parts, lon_parts, label_parts = [], [], []
    for state_hint, seg in enumerate(cfg.segments):
        lat_parts.append(_generate_regime(seg.lat, seg.length, cfg.noise_scale, rng))
        lon_parts.append(_generate_regime(seg.lon, seg.length, cfg.noise_scale, rng))
        lat_stationary = seg.lat.kind == "ar1"
        lon_stationary = seg.lon.kind == "ar1"
        planted = (0 if lat_stationary else 1) + (0 if lon_stationary else 2)
        label_parts.append(np.full(seg.length, planted, dtype=np.int64))
    values = np.vstack([np.concatenate(lat_parts), np.concatenate(lon_parts)])

    mask = np.ones_like(values, dtype=bool)
    if cfg.missing_rate > 0.0:
        mask = rng.random(values.shape) >= cfg.missing_rate
        values = np.where(mask, values, 0.0)

    series = MultivariateSeries(values=values, mask=mask, labels=np.concatenate(label_parts))
    return normalize(series)


def four_state_config(length: int = 2000, seed: int = 0, missing_rate: float = 0.0,
                      phi: float = 0.0, cycles: int = 1,
                      nonstationary: str = "drifting_sine",
                      walk_scale: float = 0.15) -> SynthConfig:
    """Segments planting states 0..3 in order, ``cycles`` times over.

    State encoding: 0 both stationary, 1 only a_lon stationary,
    2 only a_lat stationary, 3 neither.  The default non-stationary
    regime is a slow drifting sinusoid: it stays bounded, so every
    regime lands at a comparable amplitude after normalization and a
    held-out tail stays in the value range seen during training.  Pass
    ``nonstationary="random_walk"`` for unit-root segments (damped by
    ``walk_scale``; ADF statistics are scale-free, so state recovery is
    unaffected).
    """
    if cycles < 1:
        raise ValueError("four_state_config: cycles must be >= 1")
    n_segments = 4 * cycles
    if length < n_segments:
        raise ValueError(f"four_state_config: length must be at least {n_segments}")
    seg = length // n_segments
    lengths = [seg] * (n_segments - 1) + [length - (n_segments - 1) * seg]
    stationary = Regime("ar1", phi=phi)
    if nonstationary == "drifting_sine":
        unstable = Regime("drifting_sine", amplitude=1.0, period=300.0, drift=0.005)
    elif nonstationary == "random_walk":
        unstable = Regime("random_walk", scale=walk_scale)
    else:
        raise ValueError(f"unknown nonstationary regime {nonstationary!r}")
    plan = [
        (stationary, stationary),   # state 0
        (unstable, stationary),     # state 1: only a_lon stationary
        (stationary, unstable),     # state 2: only a_lat stationary
        (unstable, unstable),       # state 3
    ] * cycles
    segments = tuple(Segment(n, lat, lon) for n, (lat, lon) in zip(lengths, plan))
    return SynthConfig(length=length, segments=segments, missing_rate=missing_rate, seed=seed)


# ---------------------------------------------------------------------------
# state labeling


def _is_stationary(x: np.ndarray, p_threshold: float, reject_means_stationary: bool) -> bool:
    try:
        result = adf_test(x, max_lags=min(default_max_lags(len(x)), max(0, len(x) - 16)))
    except ValueError:
        # constant block: trivially stationary
        return reject_means_stationary
    rejected = result.p_value <= p_threshold
    return rejected if reject_means_stationary else not rejected


def label_states(series: MultivariateSeries, window: int = 250, p_threshold: float = 0.01,
                 reject_means_stationary: bool = True) -> MultivariateSeries:
    """Assign one of four maneuver states to every timestep.

    Each feature is ADF-tested on non-overlapping blocks of ``window``
    steps; a block is stationary when the unit root is rejected at
    ``p_threshold`` (set ``reject_means_stationary=False`` to flip the
    convention).  States: 0 both stationary, 1 only a_lon stationary,
    2 only a_lat stationary, 3 neither.  A short tail block is tested
    when it still has >= 16 points and inherits the previous label
    otherwise.
    """
    window = int(window)
    if series.length < window:
        raise ValueError(f"label_states: series length {series.length} < window {window}")
    if series.n_features != 2:
        raise ValueError("label_states: expects the two acceleration features")

    labels = np.empty(series.length, dtype=np.int64)
    last = 0
    for start in range(0, series.length, window):
        stop = min(start + window, series.length)
        if stop - start >= 16:
            lat_ok = _is_stationary(series.values[0, start:stop], p_threshold, reject_means_stationary)
            lon_ok = _is_stationary(series.values[1, start:stop], p_threshold, reject_means_stationary)
            last = (0 if lat_ok else 1) + (0 if lon_ok else 2)
        labels[start:stop] = last
    return replace(series, labels=labels)
