"""Differentiable layers with hand-written forward and backward passes.

Every function accepts a single series ``(T, F, C)`` or a batch
``(B, T, F, C)`` and returns arrays of the same rank. Temporal sliding is
cross-correlation with valid padding, so a kernel of extent ``t`` maps
``T`` steps to ``T - (t - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


class TemporalTooShort(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


class BadPoolLength(ValueError):
    pass


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class StructuralKernel:
    """Sub-kernel bank: ``weights[i, s, j, c, m]`` links input node ``j``,
    channel ``c``, time offset ``s`` to output node ``i``, feature map ``m``.

    For a transposed layer the same array is read in reverse: ``m`` indexes
    the incoming channels and ``c`` the outgoing ones, and ``bias`` has
    shape ``(F, N)`` instead of ``(F, M)``.
    """

    weights: np.ndarray
    bias: np.ndarray
    mask: np.ndarray

    @property
    def f(self) -> int:
        return self.weights.shape[0]

    @property
    def t(self) -> int:
        return self.weights.shape[1]

    @property
    def n_in(self) -> int:
        return self.weights.shape[3]

    @property
    def m_out(self) -> int:
        return self.weights.shape[4]

    def weight_mask(self) -> np.ndarray:
        """Boolean mask broadcastable against ``weights``."""
        return self.mask[:, None, :, None, None]

    def check(self) -> None:
        f, t, f2, n, m = self.weights.shape
        if f != f2 or self.mask.shape != (f, f):
            raise ShapeMismatch(f"kernel {self.weights.shape} inconsistent with mask {self.mask.shape}")
        if np.any(self.weights[~self.mask.astype(bool)] != 0):
            raise ShapeMismatch("masked sub-kernel entries are nonzero")


@dataclass
class LayerGrads:
    d_input: np.ndarray
    d_weights: np.ndarray | None = None
    d_bias: np.ndarray | None = None


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (T, F, C) or (B, T, F, C), got {x.shape}")
    return x, False


def _unbatch(y: np.ndarray, single: bool) -> np.ndarray:
    return y[0] if single else y


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    # (i, s, j, c, m) -> rows (j, c, s), cols (i, m)
    f, t, _, n, m = w.shape
    return w.transpose(2, 3, 1, 0, 4).reshape(f * n * t, f * m)


def _im2col(x: np.ndarray, t: int) -> np.ndarray:
    b, tl, f, n = x.shape
    win = sliding_window_view(x, t, axis=1)  # (B, T', F, N, t)
    return win.reshape(b * (tl - t + 1), f * n * t)


def _col2im(cols: np.ndarray, b: int, t_out: int, f: int, n: int, t: int) -> np.ndarray:
    cols = cols.reshape(b, t_out, f, n, t)
    out = np.zeros((b, t_out + t - 1, f, n))
    for s in range(t):
        out[:, s:s + t_out] += cols[..., s]
    return out


def _conv_pre(x: np.ndarray, k: StructuralKernel) -> np.ndarray:
    b, tl, f, n = x.shape
    if f != k.f or n != k.n_in:
        raise ShapeMismatch(f"input (T, F, N)=({tl}, {f}, {n}) does not fit kernel F={k.f}, N={k.n_in}")
    if tl < k.t:
        raise TemporalTooShort(f"T={tl} shorter than kernel extent t={k.t}")
    t_out = tl - k.t + 1
    y = _im2col(x, k.t) @ _weight_matrix(k.weights)
    return y.reshape(b, t_out, f, k.m_out)


def _conv_weight_grad(x: np.ndarray, up: np.ndarray, k: StructuralKernel) -> np.ndarray:
    b, t_out, f, m = up.shape
    dw = _im2col(x, k.t).T @ up.reshape(b * t_out, f * m)
    dw = dw.reshape(f, k.n_in, k.t, f, m).transpose(3, 2, 0, 1, 4)
    return np.where(k.weight_mask(), dw, 0.0)


def _conv_input_grad(up: np.ndarray, k: StructuralKernel) -> np.ndarray:
    b, t_out, f, m = up.shape
    cols = up.reshape(b * t_out, f * m) @ _weight_matrix(k.weights).T
    return _col2im(cols, b, t_out, f, k.n_in, k.t)


def structural_conv_forward(x, k: StructuralKernel, activation: str = "identity") -> np.ndarray:
    """``out[tau, i, m] = g(sum_{j in mask[i]} sum_{s, c} w[i, s, j, c, m] x[tau + s, j, c] + b[i, m])``."""
    xb, single = _batched(x)
    y = _conv_pre(xb, k) + k.bias
    if activation == "relu":
        y = np.maximum(y, 0.0)
    elif activation != "identity":
        raise ValueError(f"unknown activation {activation!r}")
    return _unbatch(y, single)


def structural_conv_backward(x, k: StructuralKernel, upstream) -> LayerGrads:
    """Gradients of the pre-activation map; the caller applies any ReLU derivative."""
    xb, single = _batched(x)
    up, _ = _batched(upstream)
    expected = (xb.shape[0], xb.shape[1] - k.t + 1, k.f, k.m_out)
    if up.shape != expected:
        raise ShapeMismatch(f"upstream {up.shape} != {expected}")
    return LayerGrads(
        d_input=_unbatch(_conv_input_grad(up, k), single),
        d_weights=_conv_weight_grad(xb, up, k),
        d_bias=up.sum(axis=(0, 1)),
    )


def structural_conv_transpose_forward(y, k: StructuralKernel) -> np.ndarray:
    """Adjoint of the pre-activation convolution, plus a per-(node, channel) bias."""
    yb, single = _batched(y)
    if yb.shape[2] != k.f or yb.shape[3] != k.m_out:
        raise ShapeMismatch(f"input {yb.shape} does not fit transposed kernel F={k.f}, M={k.m_out}")
    return _unbatch(_conv_input_grad(yb, k) + k.bias, single)


def structural_conv_transpose_backward(y, k: StructuralKernel, upstream) -> LayerGrads:
    yb, single = _batched(y)
    up, _ = _batched(upstream)
    expected = (yb.shape[0], yb.shape[1] + k.t - 1, k.f, k.n_in)
    if up.shape != expected:
        raise ShapeMismatch(f"upstream {up.shape} != {expected}")
    return LayerGrads(
        d_input=_unbatch(_conv_pre(up, k), single),
        d_weights=_conv_weight_grad(up, yb, k),
        d_bias=up.sum(axis=(0, 1)),
    )


def _require_identity(k: StructuralKernel) -> None:
    if not np.array_equal(k.mask.astype(bool), np.eye(k.f, dtype=bool)):
        raise ShapeMismatch("time convolution requires an identity mask")


def time_conv_forward(x, k: StructuralKernel, activation: str = "identity") -> np.ndarray:
    _require_identity(k)
    return structural_conv_forward(x, k, activation)


def time_conv_backward(x, k: StructuralKernel, upstream) -> LayerGrads:
    _require_identity(k)
    return structural_conv_backward(x, k, upstream)


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, upstream) -> np.ndarray:
    return np.where(np.asarray(x) > 0, upstream, 0.0)


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    single: bool


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode: str = "train",
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Normalize per (node, channel) over batch and time.

    Returns ``(out, cache, new_running_mean, new_running_var)``; the inputs
    are never modified. Running variance tracks the biased batch variance.
    """
    xb, single = _batched(x)
    if xb.shape[0] == 0 or xb.shape[1] == 0:
        raise EmptyBatch("batch normalization needs at least one sample")
    if mode == "train":
        mu = xb.mean(axis=(0, 1))
        var = xb.var(axis=(0, 1))
        new_mean = momentum * running_mean + (1 - momentum) * mu
        new_var = momentum * running_var + (1 - momentum) * var
    elif mode == "infer":
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (xb - mu) * inv_std
    out = gamma * x_hat + beta
    cache = BatchNormCache(x_hat=x_hat, inv_std=inv_std, gamma=gamma, single=single)
    return _unbatch(out, single), cache, new_mean, new_var


def batchnorm_backward(cache: BatchNormCache, upstream):
    """Train-mode gradients: ``(d_input, d_gamma, d_beta)``."""
    up, _ = _batched(upstream)
    count = up.shape[0] * up.shape[1]
    d_beta = up.sum(axis=(0, 1))
    d_gamma = (up * cache.x_hat).sum(axis=(0, 1))
    d_xhat = up * cache.gamma
    dx = cache.inv_std / count * (
        count * d_xhat
        - d_xhat.sum(axis=(0, 1))
        - cache.x_hat * (d_xhat * cache.x_hat).sum(axis=(0, 1))
    )
    return _unbatch(dx, cache.single), d_gamma, d_beta


def batchnorm_infer_backward(cache: BatchNormCache, upstream):
    up, _ = _batched(upstream)
    return (_unbatch(up * cache.gamma * cache.inv_std, cache.single),
            (up * cache.x_hat).sum(axis=(0, 1)), up.sum(axis=(0, 1)))


def maxpool_time(x, pool_len: int):
    """Non-overlapping temporal max pool; trailing remainder is dropped.

    Returns ``(out, indices)`` where ``indices`` holds the argmax offset
    inside each window (first maximum on ties).
    """
    if pool_len < 1:
        raise BadPoolLength(f"pool length must be >= 1, got {pool_len}")
    xb, single = _batched(x)
    b, tl, f, c = xb.shape
    t_out = tl // pool_len
    if t_out == 0:
        raise BadPoolLength(f"pool length {pool_len} exceeds T={tl}")
    windows = xb[:, :t_out * pool_len].reshape(b, t_out, pool_len, f, c)
    idx = windows.argmax(axis=2)
    out = np.take_along_axis(windows, idx[:, :, None], axis=2)[:, :, 0]
    return _unbatch(out, single), _unbatch(idx, single)


def unpool_time(y, indices, pool_len: int, t_len: int | None = None) -> np.ndarray:
    """Scatter each value to its stored argmax offset, zeros elsewhere.

    ``t_len`` restores the pre-pool length (zero tail for a dropped
    remainder); it defaults to ``len(y) * pool_len``.
    """
    if pool_len < 1:
        raise BadPoolLength(f"pool length must be >= 1, got {pool_len}")
    yb, single = _batched(y)
    ib = np.asarray(indices)
    if single:
        ib = ib[None]
    if ib.shape != yb.shape:
        raise ShapeMismatch(f"indices {ib.shape} do not match values {yb.shape}")
    b, t_out, f, c = yb.shape
    full = t_out * pool_len if t_len is None else t_len
    if full < t_out * pool_len:
        raise ShapeMismatch(f"target length {full} shorter than {t_out * pool_len}")
    windows = np.zeros((b, t_out, pool_len, f, c))
    np.put_along_axis(windows, ib[:, :, None], yb[:, :, None], axis=2)
    out = np.zeros((b, full, f, c))
    out[:, :t_out * pool_len] = windows.reshape(b, t_out * pool_len, f, c)
    return _unbatch(out, single)


def unpool_backward(indices, pool_len: int, upstream) -> np.ndarray:
    up, single = _batched(upstream)
    ib = np.asarray(indices)
    if single:
        ib = ib[None]
    b, t_out, f, c = ib.shape
    windows = up[:, :t_out * pool_len].reshape(b, t_out, pool_len, f, c)
    return _unbatch(np.take_along_axis(windows, ib[:, :, None], axis=2)[:, :, 0], single)


def fully_connected_forward(x, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``W @ x + b`` for a vector or a ``(B, in)`` batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"input length {x.shape[-1]} != weight columns {w.shape[1]}")
    return x @ w.T + b


def fully_connected_backward(x, w: np.ndarray, upstream) -> LayerGrads:
    x = np.asarray(x, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if x.ndim == 1:
        return LayerGrads(d_input=w.T @ up, d_weights=np.outer(up, x), d_bias=up.copy())
    return LayerGrads(d_input=up @ w, d_weights=up.T @ x, d_bias=up.sum(axis=0))
