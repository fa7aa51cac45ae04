"""Series ingestion, splitting, standardization, windowing and synthetic data.

Sample rates are metadata only; nothing here resamples.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .graph import Graph, is_connected
from .tensor import as_series, make_rng


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, row: int, col: int, value: str):
        super().__init__(f"row {row}, column {col}: cannot parse {value!r} as a number")
        self.row, self.col = row, col


class RaggedRow(DataError):
    pass


class EmptyFile(DataError):
    pass


class TooShort(DataError):
    pass


class ConstantFeature(DataError):
    def __init__(self, index: int):
        super().__init__(f"feature {index} is constant on the training split")
        self.index = index


class NotFitted(DataError):
    pass


class BadCoupling(DataError):
    pass


def _column_layout(header: list[str]) -> tuple[int, int, list[str]]:
    """Return ``(F, N, node_names)``; ``node.channel`` names give N > 1."""
    split = [h.rsplit(".", 1) for h in header]
    if len(header) > 1 and all(len(s) == 2 and s[1].isdigit() for s in split):
        nodes: list[str] = []
        for name, _ in split:
            if name not in nodes:
                nodes.append(name)
        n = len(header) // len(nodes)
        expected = [f"{node}.{c}" for node in nodes for c in range(n)]
        if len(nodes) * n == len(header) and [f"{a}.{int(b)}" for a, b in split] == expected:
            return len(nodes), n, nodes
    return len(header), 1, list(header)


def load_csv(path) -> np.ndarray:
    """Read a header row plus one row per time step into ``(T, F, N)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise EmptyFile(f"{path}: no header")
    header = [h.strip() for h in rows[0]]
    if len(rows) < 2:
        raise EmptyFile(f"{path}: header but no samples")
    f, n, _ = _column_layout(header)
    values = np.empty((len(rows) - 1, len(header)))
    for t, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise RaggedRow(f"{path}: row {t} has {len(row)} cells, header has {len(header)}")
        for c, cell in enumerate(row):
            try:
                values[t - 1, c] = float(cell)
            except ValueError:
                raise ParseError(t, c, cell) from None
    return as_series(values.reshape(-1, f, n))


def save_csv(x: np.ndarray, path, names: list[str] | None = None) -> None:
    """Write ``(T, F, N)`` with 17 significant digits so values round-trip."""
    t_len, f, n = x.shape
    names = names or [f"n{i}" for i in range(f)]
    header = names if n == 1 else [f"{name}.{c}" for name in names for c in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in x.reshape(t_len, f * n):
            w.writerow([f"{v:.17g}" for v in row])


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.55
    test: float = 0.35
    validation: float = 0.10

    def __post_init__(self):
        fr = (self.train, self.test, self.validation)
        if min(fr) <= 0:
            raise DataError(f"split fractions must be positive, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {sum(fr)}")


def split_lengths(t_len: int, spec: SplitSpec = SplitSpec()) -> tuple[int, int, int]:
    n_train = int(np.floor(spec.train * t_len + 1e-9))
    n_test = int(np.floor(spec.test * t_len + 1e-9))
    return n_train, n_test, t_len - n_train - n_test


def split_contiguous(x: np.ndarray, spec: SplitSpec = SplitSpec()):
    """Contiguous ``train | test | validation`` ranges, in that order."""
    if x.shape[0] < 3:
        raise TooShort(f"need at least 3 time steps to split, got {x.shape[0]}")
    a, b, _ = split_lengths(x.shape[0], spec)
    return x[:a].copy(), x[a:a + b].copy(), x[a + b:].copy()


@dataclass
class Standardizer:
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def _check(self, x):
        if not self.fitted:
            raise NotFitted("standardizer has not been fitted")
        if x.shape[-2:] != self.mean.shape:
            raise DataError(f"feature shape {x.shape[-2:]} != fitted {self.mean.shape}")


def fit_standardizer(train: np.ndarray) -> Standardizer:
    """Per-feature mean and population standard deviation of the training range."""
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    flat = std.reshape(-1)
    bad = np.flatnonzero(~(flat > 0))
    if len(bad):
        raise ConstantFeature(int(bad[0]))
    return Standardizer(mean, std)


def transform(s: Standardizer, x: np.ndarray) -> np.ndarray:
    s._check(x)
    return (x - s.mean) / s.std


def inverse_transform(s: Standardizer, x: np.ndarray) -> np.ndarray:
    s._check(x)
    return x * s.std + s.mean


@dataclass
class WindowSet:
    inputs: np.ndarray   # (K, window, F, N)
    targets: np.ndarray  # (K, horizon, F, N)
    starts: np.ndarray   # window start index in the source series
    window: int
    horizon: int

    def __len__(self) -> int:
        return len(self.inputs)


def window_count(t_len: int, window: int, horizon: int, stride: int) -> int:
    if t_len < window + horizon:
        return 0
    return (t_len - window - horizon) // stride + 1


def make_windows(x: np.ndarray, window: int = 500, horizon: int = 100, stride: int = 100,
                 offset: int = 0) -> WindowSet:
    """Input/target pairs at ``0, stride, 2 * stride, ...``; targets follow inputs directly.

    ``offset`` is added to the recorded start indices (source provenance).
    """
    if min(window, stride) < 1 or horizon < 0:
        raise DataError("window and stride must be >= 1, horizon >= 0")
    k = window_count(x.shape[0], window, horizon, stride)
    if k == 0:
        raise TooShort(f"T={x.shape[0]} < window + horizon = {window + horizon}")
    starts = np.arange(k) * stride
    inputs = np.stack([x[s:s + window] for s in starts])
    targets = np.stack([x[s + window:s + window + horizon] for s in starts])
    return WindowSet(inputs, targets, starts + offset, window, horizon)


SYNTH_AMPLITUDE = 0.5
SYNTH_PERIODS = (40, 80)


def synth_coupled(g: Graph, t_len: int, seed: int, noise_sd: float = 0.05, coupling: float = 0.5,
                  amplitude: float = SYNTH_AMPLITUDE) -> np.ndarray:
    """Graph-coupled oscillators, one channel per node.

    ``x[t+1, i] = (1 - rho) x[t, i] + rho * mean_{j ~ i} x[t, j]
    + a sin(2 pi t / P_i + phi_i) + noise`` with integer periods
    ``P_i`` in [40, 80], uniform phases and ``x[0] ~ N(0, 1)``. The
    neighbour mean excludes the node itself.
    """
    if not 0 <= coupling < 1:
        raise BadCoupling(f"coupling must lie in [0, 1), got {coupling}")
    if noise_sd < 0 or t_len < 1:
        raise DataError("noise_sd must be >= 0 and t_len >= 1")
    if not is_connected(g):
        raise DataError("synthetic generator needs a connected graph")
    rng = make_rng(seed)
    f = g.f
    periods = rng.integers(SYNTH_PERIODS[0], SYNTH_PERIODS[1] + 1, size=f)
    phases = rng.uniform(0.0, 2 * np.pi, size=f)
    avg = np.zeros((f, f))
    for i in range(f):
        nbrs = g.neighbors(i) or [i]
        avg[i, nbrs] = 1.0 / len(nbrs)
    step = (1 - coupling) * np.eye(f) + coupling * avg
    noise = rng.standard_normal((t_len, f)) * noise_sd
    x = np.empty((t_len, f))
    x[0] = rng.standard_normal(f)
    for t in range(t_len - 1):
        drive = amplitude * np.sin(2 * np.pi * t / periods + phases)
        x[t + 1] = step @ x[t] + drive + noise[t + 1]
    return x[:, :, None]


@dataclass
class Prepared:
    standardizer: Standardizer
    train: WindowSet
    test: WindowSet
    validation: WindowSet
    splits: tuple


def prepare(x: np.ndarray, window: int, horizon: int, stride: int, spec: SplitSpec = SplitSpec()) -> Prepared:
    """Split, standardize with train statistics, and window each split separately."""
    train, test, val = split_contiguous(x, spec)
    s = fit_standardizer(train)
    n_train, n_test, _ = split_lengths(x.shape[0], spec)
    offsets = (0, n_train, n_train + n_test)
    sets = [make_windows(transform(s, part), window, horizon, stride, off)
            for part, off in zip((train, test, val), offsets)]
    return Prepared(s, *sets, splits=(train, test, val))
