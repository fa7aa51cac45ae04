"""Metrics, recurrence matrices, kernel sparsity and heatmap export."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .layers import ShapeMismatch
from .models import ModelParams, ModelSpec

DEFAULT_RECURRENCE_EPS = 1e-4
DEFAULT_SPARSITY_TAU = 1e-3


class RaggedInput(ValueError):
    pass


@dataclass
class MetricReport:
    rmse: float
    per_step: np.ndarray
    per_feature: np.ndarray
    r2: float


def rmse_report(preds, targets) -> MetricReport:
    """RMSE aggregated, per horizon step and per feature, plus R^2.

    Inputs are ``(K, H, F)``; a trailing channel axis is folded into F.
    """
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeMismatch(f"predictions {p.shape} != targets {y.shape}")
    if p.ndim == 4:
        p = p.reshape(p.shape[:2] + (-1,))
        y = y.reshape(y.shape[:2] + (-1,))
    if p.ndim != 3 or p.shape[0] < 1:
        raise ShapeMismatch(f"expected (K, H, F) with K >= 1, got {p.shape}")
    sq = (p - y) ** 2
    sse = sq.sum()
    sst = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else -np.inf)
    return MetricReport(
        rmse=float(np.sqrt(sq.mean())),
        per_step=np.sqrt(sq.mean(axis=(0, 2))),
        per_feature=np.sqrt(sq.mean(axis=(0, 1))),
        r2=float(r2),
    )


def horizon_trend(report: MetricReport) -> float:
    """Spearman correlation between horizon step index and per-step RMSE."""
    steps = np.arange(len(report.per_step))
    return float(spearmanr(steps, report.per_step).statistic)


@dataclass
class RecurrenceMatrix:
    bits: np.ndarray
    eps: float

    @property
    def n(self) -> int:
        return self.bits.shape[0]


def recurrence(activations, eps: float = DEFAULT_RECURRENCE_EPS) -> RecurrenceMatrix:
    """``R[i, j] = ||a(t_i) - a(t_j)||_2 <= eps``.

    ``activations`` is a sequence of equal-length vectors (or scalars).
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    try:
        a = np.array([np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in activations])
    except ValueError:
        raise RaggedInput("activation vectors differ in length") from None
    if a.ndim != 2 or len(a) == 0:
        raise RaggedInput("need a nonempty sequence of equal-length vectors")
    # exact differences row by row; Gram-matrix shortcuts lose the zeros
    bits = np.empty((len(a), len(a)), dtype=bool)
    for i in range(len(a)):
        bits[i] = np.sqrt(np.sum((a - a[i]) ** 2, axis=1)) <= eps
    return RecurrenceMatrix(bits, eps)


@dataclass
class LayerSparsity:
    layer: int
    fraction: float
    exact_zeros: int
    unmasked: int


def sparsity_report(params: ModelParams, tau: float = DEFAULT_SPARSITY_TAU) -> list[LayerSparsity]:
    """Fraction of unmasked conv-kernel weights with ``|w| < tau``, per layer."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    out = []
    for idx, mask in enumerate(params.masks):
        if mask is None:
            continue
        w = params.layers[idx]["weight"]
        live = w[np.broadcast_to(mask[:, None, :, None, None], w.shape)]
        out.append(LayerSparsity(idx, float(np.mean(np.abs(live) < tau)) if live.size else 0.0,
                                 int(np.sum(live == 0)), int(live.size)))
    return out


def overall_sparsity(params: ModelParams, tau: float = DEFAULT_SPARSITY_TAU) -> float:
    rep = sparsity_report(params, tau)
    total = sum(r.unmasked for r in rep)
    return sum(r.fraction * r.unmasked for r in rep) / total if total else 0.0


def layer_activations(cache, layer: int, window: int = 0) -> np.ndarray:
    """Output of ``layer`` for one batch item; cached outputs are always batched."""
    return cache.outputs[layer][window]


def _check_finite(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"heatmap needs a 2-D matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("heatmap entries must be finite")
    return m


def pgm_pixels(matrix) -> np.ndarray:
    """Linear rescale of ``[min, max]`` to ``[0, 255]``; constant input maps to 0."""
    m = _check_finite(matrix)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros(m.shape, dtype=np.int64)
    return np.rint((m - lo) / (hi - lo) * 255).astype(np.int64)


def export_heatmap(matrix, path, fmt: str = "csv") -> None:
    m = _check_finite(matrix)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in m:
                w.writerow([repr(float(v)) for v in row])
    elif fmt == "pgm":
        px = pgm_pixels(m)
        lines = [f"P2\n{m.shape[1]} {m.shape[0]}\n255\n"]
        lines += [" ".join(str(int(v)) for v in row) + "\n" for row in px]
        with open(path, "w") as fh:
            fh.writelines(lines)
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}")


def load_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])


def read_pgm(path) -> np.ndarray:
    tokens = open(path).read().split()
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w)


def kernel_heatmaps(params: ModelParams, spec: ModelSpec, layer: int) -> list[np.ndarray]:
    """Per-node sub-kernel matrices for a conv layer.

    Node ``i`` gets a ``(F * N) x (t * M)`` matrix: row ``j * N + c`` is input
    node ``j``, channel ``c``; column ``m * t + s`` is feature map ``m`` at
    time offset ``s``. Masked rows are zero.
    """
    if params.masks[layer] is None:
        raise ValueError(f"layer {layer} is not a convolution")
    w = params.layers[layer]["weight"]
    f, t, _, n, m = w.shape
    return [w[i].transpose(1, 2, 3, 0).reshape(f * n, m * t) for i in range(f)]
