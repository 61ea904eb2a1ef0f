"""Benchmark CSV loading, train-only scaling, protocol splits, windows and synthetic series."""

from __future__ import annotations

import csv
import datetime
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from ._kernels import K

SCALER_EPS = 1e-8
SPLIT_PROTOCOLS = ("ett-hourly", "ett-minutely", "ratio-7-1-2")


class DataFormatError(ValueError):
    """Malformed benchmark CSV; carries 1-based data ``row`` and ``column`` when known."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class RawSeries:
    values: np.ndarray  # (T, C) float64
    names: tuple[str, ...]
    source: str = "synthetic"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[1] < 1:
            raise ValueError(f"values must be a T x C matrix with C >= 1, got shape {v.shape}")
        if len(self.names) != v.shape[1]:
            raise ValueError(f"{len(self.names)} names for {v.shape[1]} channels")
        if not np.all(np.isfinite(v)):
            raise ValueError("series contains non-finite values")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]


def load_csv(path) -> RawSeries:
    """Read a ``date,<var1>,<var2>,...`` benchmark file.

    The date column is parsed as text and discarded.  Rows are counted from 1
    starting at the first data row (the header is row 0).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0].lower() != "date":
            raise DataFormatError(f"{path}: first column must be 'date', got header {header[:3]}")
        names = tuple(header[1:])
        ncol = len(header)
        rows: list[list[float]] = []
        for i, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != ncol:
                raise DataFormatError(
                    f"{path}: row {i} (line {i + 1}) has {len(rec)} fields, expected {ncol}", row=i
                )
            vals = []
            for name, cell in zip(names, rec[1:]):
                try:
                    x = float(cell)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: row {i} (line {i + 1}), column {name!r}: non-numeric value {cell!r}",
                        row=i, column=name,
                    ) from None
                if not math.isfinite(x):
                    raise DataFormatError(
                        f"{path}: row {i} (line {i + 1}), column {name!r}: non-finite value {cell!r}",
                        row=i, column=name,
                    )
                vals.append(x)
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return RawSeries(np.asarray(rows, dtype=np.float64), names, str(path))


def save_csv(series: RawSeries, path, start: str = "2016-07-01 00:00:00", freq_minutes: int = 60) -> Path:
    """Write ``series`` in the ``date,<vars>`` layout read by :func:`load_csv`.

    Values are written with ``repr`` so a reload reproduces them exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t0 = datetime.datetime.fromisoformat(start)
    step = datetime.timedelta(minutes=freq_minutes)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("date",) + tuple(series.names))
        for i, row in enumerate(series.values):
            w.writerow([(t0 + i * step).strftime("%Y-%m-%d %H:%M:%S")] + [repr(float(v)) for v in row])
    return path


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    protocol: str
    lookback: int

    def __post_init__(self):
        if self.protocol not in SPLIT_PROTOCOLS:
            raise ValueError(f"unknown split protocol {self.protocol!r}; expected one of {SPLIT_PROTOCOLS}")
        if self.lookback < 1:
            raise ValueError("lookback must be >= 1")

    def borders(self, T: int) -> list[tuple[int, int]]:
        """Half-open ``[start, end)`` ranges for train, val, test."""
        L = self.lookback
        if self.protocol.startswith("ett-"):
            per_day = 24 if self.protocol == "ett-hourly" else 96
            month = 30 * per_day
            b_train, b_val, b_test = 12 * month, 16 * month, 20 * month
            if T < b_test:
                raise ValueError(f"{self.protocol} split needs at least {b_test} rows, series has {T}")
            return [(0, b_train), (b_train - L, b_val), (b_val - L, b_test)]
        n_train = int(T * 0.7)
        n_test = int(T * 0.2)
        n_val = T - n_train - n_test
        if n_train < L or n_val < 1 or n_test < 1:
            raise ValueError(f"series of length {T} too short for ratio-7-1-2 split with L={L}")
        return [(0, n_train), (n_train - L, n_train + n_val), (T - n_test - L, T)]


def split(series: RawSeries, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (train, val, test) segments; val and test carry an L-row lookback prefix."""
    return tuple(series.values[a:b] for a, b in spec.borders(series.T))


# ---------------------------------------------------------------------------
# scaler
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, segment: np.ndarray) -> np.ndarray:
        return (np.asarray(segment, dtype=np.float64) - self.mean) / self.std

    def invert(self, segment: np.ndarray) -> np.ndarray:
        return np.asarray(segment, dtype=np.float64) * self.std + self.mean


def fit_scaler(train_segment: np.ndarray) -> Scaler:
    x = np.asarray(train_segment, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("train segment must be a non-empty T x C matrix")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    low = std < SCALER_EPS
    if np.any(low):
        warnings.warn(
            f"constant column(s) {np.flatnonzero(low).tolist()} in training segment; std floored at {SCALER_EPS}",
            RuntimeWarning, stacklevel=2,
        )
        std = np.where(low, SCALER_EPS, std)
    return Scaler(mean, std)


def apply_scaler(scaler: Scaler, segment: np.ndarray) -> np.ndarray:
    return scaler.apply(segment)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowBatch:
    inputs: np.ndarray   # (B, L, C)
    targets: np.ndarray  # (B, H, C)
    indices: np.ndarray  # (B,) window start offsets


@dataclass(frozen=True)
class WindowSet:
    segment: np.ndarray
    L: int
    H: int

    def __post_init__(self):
        self.segment.setflags(write=False)

    @property
    def count(self) -> int:
        return self.segment.shape[0] - self.L - self.H + 1

    def __len__(self) -> int:
        return self.count

    def take(self, starts: np.ndarray) -> WindowBatch:
        starts = np.ascontiguousarray(starts, dtype=np.int64)
        x, y = K.gather_windows(self.segment, starts, self.L, self.H)
        return WindowBatch(x, y, starts)


def make_windows(segment: np.ndarray, L: int, H: int, dtype=np.float32) -> WindowSet:
    seg = np.array(segment, dtype=dtype, order="C", copy=True)
    if seg.ndim != 2:
        raise ValueError("segment must be a T x C matrix")
    if seg.shape[0] < L + H:
        raise ValueError(f"segment of length {seg.shape[0]} is shorter than L + H = {L + H}")
    return WindowSet(seg, L, H)


def batch_iter(windows: WindowSet, batch_size: int, shuffle: bool = False,
               seed=None) -> Iterator[WindowBatch]:
    """Yield ``ceil(count / batch_size)`` batches covering every window once.

    ``seed`` may be an int or a ``numpy.random.Generator``; each call builds
    its own order so independent iterators never share RNG state.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = windows.count
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for lo in range(0, n, batch_size):
        yield windows.take(order[lo:lo + batch_size])


# ---------------------------------------------------------------------------
# synthetic series
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Per-channel linear autoregression with optional cross-channel coupling.

    ``coefficients[c][k]`` multiplies ``x_c[t-1-k]``.  The coupling term is
    ``kappa * sum_{j != c} coupling[c][j] * x_j[t-1]``; when ``coupling`` is
    omitted it is drawn from the seed (zero diagonal, rows scaled by
    ``1/sqrt(C-1)``).
    """

    C: int
    L: int
    H: int
    coefficients: list = field(default_factory=list)
    kappa: float = 0.0
    noise: float = 1.0
    T: int = 4000
    seed: int = 2026
    coupling: list | None = None
    init: list | None = None
    burn_in: int = 0

    def __post_init__(self):
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if self.kappa < 0 or self.noise < 0:
            raise ValueError("kappa and noise must be non-negative")
        if len(self.coefficients) != self.C:
            raise ValueError(f"need {self.C} coefficient rows, got {len(self.coefficients)}")
        p = {len(row) for row in self.coefficients}
        if len(p) != 1 or 0 in p:
            raise ValueError("all channels need the same non-zero autoregression order")
        if self.T < self.L + self.H:
            raise ValueError(f"T={self.T} shorter than L + H = {self.L + self.H}")
        if self.coupling is not None and np.shape(self.coupling) != (self.C, self.C):
            raise ValueError("coupling must be C x C")
        if self.init is not None and np.shape(self.init) != (self.order, self.C):
            raise ValueError("init must be order x C")

    @property
    def order(self) -> int:
        return len(self.coefficients[0])

    def to_dict(self) -> dict:
        return {
            "C": self.C, "L": self.L, "H": self.H,
            "coefficients": [[float(a) for a in row] for row in self.coefficients],
            "kappa": float(self.kappa), "noise": float(self.noise), "T": self.T, "seed": self.seed,
            "coupling": None if self.coupling is None else [[float(a) for a in r] for r in self.coupling],
            "init": None if self.init is None else [[float(a) for a in r] for r in self.init],
            "burn_in": self.burn_in,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


def _coupling_matrix(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.coupling is not None:
        K_ = np.array(spec.coupling, dtype=np.float64)
    else:
        K_ = rng.standard_normal((spec.C, spec.C)) / math.sqrt(max(spec.C - 1, 1))
    np.fill_diagonal(K_, 0.0)
    return K_


def gen_synthetic(spec: SyntheticSpec) -> RawSeries:
    rng = np.random.default_rng(spec.seed)
    C, p = spec.C, spec.order
    A = np.array(spec.coefficients, dtype=np.float64)  # (C, p)
    cross = spec.kappa * _coupling_matrix(spec, rng)
    total = spec.T + spec.burn_in
    x = np.zeros((total, C))
    if spec.init is not None:
        x[:p] = np.array(spec.init, dtype=np.float64)
    else:
        x[:p] = rng.standard_normal((p, C))
    eps = spec.noise * rng.standard_normal((total, C))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(p, total):
            lags = x[t - p:t][::-1]  # (p, C), lag 1 first
            x[t] = np.einsum("cp,pc->c", A, lags) + cross @ x[t - 1] + eps[t]
    x = x[spec.burn_in:]
    if not np.all(np.isfinite(x)):
        raise ValueError("synthetic generator diverged; reduce coefficients or kappa")
    return RawSeries(x, tuple(f"x{c}" for c in range(C)), "synthetic")


def innovations(series: RawSeries, spec: SyntheticSpec) -> np.ndarray:
    """Residuals of each channel against its own autoregression (for independence checks)."""
    x = series.values
    p = spec.order
    A = np.array(spec.coefficients, dtype=np.float64)
    out = np.empty((x.shape[0] - p, x.shape[1]))
    for t in range(p, x.shape[0]):
        out[t - p] = x[t] - np.einsum("cp,pc->c", A, x[t - p:t][::-1])
    return out


def spectral_radius(spec: SyntheticSpec, coupling: np.ndarray | None = None) -> float:
    """Spectral radius of the companion matrix of the generator (stable when < 1)."""
    C, p = spec.C, spec.order
    A = np.array(spec.coefficients, dtype=np.float64)
    if coupling is None:
        coupling = _coupling_matrix(spec, np.random.default_rng(spec.seed))
    comp = np.zeros((C * p, C * p))
    for k in range(p):
        comp[:C, k * C:(k + 1) * C] = np.diag(A[:, k])
    comp[:C, :C] += spec.kappa * coupling
    if p > 1:
        comp[C:, :-C] = np.eye(C * (p - 1))
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


# canned generators used by the stage-gain oracle and the ``synth`` command

def shared_rule_spec(C=4, L=16, H=4, T=4000, seed=2026, noise=1.0) -> SyntheticSpec:
    rule = [0.5, 0.2, -0.1, 0.1]
    return SyntheticSpec(C, L, H, [list(rule) for _ in range(C)], 0.0, noise, T, seed, burn_in=200)


def per_channel_spec(C=4, L=16, H=4, T=4000, seed=2026, noise=1.0) -> SyntheticSpec:
    # damped oscillators, one frequency per channel
    freqs = np.linspace(0.3, 2.8, C) if C > 1 else np.array([1.0])
    r = 0.95
    coefs = [[2 * r * math.cos(w), -r * r] for w in freqs]
    return SyntheticSpec(C, L, H, coefs, 0.0, noise, T, seed, burn_in=200)


def coupled_spec(C=4, L=16, H=2, T=4000, seed=2026, noise=1.0, kappa=0.5) -> SyntheticSpec:
    # channel c is driven by channel c-1 (cyclic chain)
    chain = np.roll(np.eye(C), 1, axis=0)
    coefs = [[0.3] for _ in range(C)]
    return SyntheticSpec(C, L, H, coefs, kappa, noise, T, seed, coupling=chain.tolist(), burn_in=200)


SYNTHETIC_PRESETS = {
    "shared": shared_rule_spec,
    "per-channel": per_channel_spec,
    "coupled": coupled_spec,
}

