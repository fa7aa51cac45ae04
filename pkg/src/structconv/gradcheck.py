"""Central finite-difference audit of every layer kind and a composed SCNN.

Relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
keeps entries whose true gradient is ~0 from dividing roundoff by roundoff.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from .graph import Graph, example_graph, hop_mask
from .models import ModelSpec, backward, build_model, forward, parse_layers
from .tensor import make_rng

STEP = 1e-5
FLOOR = 1e-6
TOLERANCE = 1e-4


def numeric_grad(loss, arr: np.ndarray, h: float = STEP, where: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``loss()`` wrt ``arr``, perturbed in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    sel = np.ones(flat.size, bool) if where is None else np.broadcast_to(where, arr.shape).reshape(-1)
    for idx in np.flatnonzero(sel):
        old = flat[idx]
        flat[idx] = old + h
        up = loss()
        flat[idx] = old - h
        down = loss()
        flat[idx] = old
        out[idx] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric, floor: float = FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def _kernel(rng, f, t, n, m, mask, bias_shape=None):
    w = rng.standard_normal((f, t, f, n, m)) * np.asarray(mask)[:, None, :, None, None]
    b = rng.standard_normal(bias_shape or (f, m))
    return L.StructuralKernel(w, b, np.asarray(mask, bool))


def audit_structural_conv(g: Graph, rng, t_len=12, n=2, m=3, t=3, time_only=False) -> float:
    mask = np.eye(g.f, dtype=bool) if time_only else hop_mask(g, 1).mask
    k = _kernel(rng, g.f, t, n, m, mask)
    x = rng.standard_normal((t_len, g.f, n))
    r = rng.standard_normal((t_len - t + 1, g.f, m))
    fwd = L.time_conv_forward if time_only else L.structural_conv_forward
    bwd = L.time_conv_backward if time_only else L.structural_conv_backward

    def loss():
        return float(np.sum(r * fwd(x, k)))

    grads = bwd(x, k, r)
    wm = np.broadcast_to(k.weight_mask(), k.weights.shape)
    return max(
        rel_error(grads.d_input, numeric_grad(loss, x)),
        rel_error(grads.d_weights[wm], numeric_grad(loss, k.weights, where=wm)[wm]),
        rel_error(grads.d_bias, numeric_grad(loss, k.bias)),
    )


def audit_transpose_conv(g: Graph, rng, t_len=12, n=2, m=3, t=3) -> float:
    k = _kernel(rng, g.f, t, n, m, hop_mask(g, 1).mask, bias_shape=(g.f, n))
    y = rng.standard_normal((t_len - t + 1, g.f, m))
    r = rng.standard_normal((t_len, g.f, n))

    def loss():
        return float(np.sum(r * L.structural_conv_transpose_forward(y, k)))

    grads = L.structural_conv_transpose_backward(y, k, r)
    wm = np.broadcast_to(k.weight_mask(), k.weights.shape)
    return max(
        rel_error(grads.d_input, numeric_grad(loss, y)),
        rel_error(grads.d_weights[wm], numeric_grad(loss, k.weights, where=wm)[wm]),
        rel_error(grads.d_bias, numeric_grad(loss, k.bias)),
    )


def audit_batchnorm(g: Graph, rng, t_len=12, n=2, batch=3) -> float:
    x = rng.standard_normal((batch, t_len, g.f, n)) * 2.0 + 1.0
    gamma = rng.standard_normal((g.f, n))
    beta = rng.standard_normal((g.f, n))
    rm, rv = np.zeros((g.f, n)), np.ones((g.f, n))
    r = rng.standard_normal(x.shape)

    def loss():
        return float(np.sum(r * L.batchnorm_forward(x, gamma, beta, rm, rv, "train")[0]))

    _, cache, _, _ = L.batchnorm_forward(x, gamma, beta, rm, rv, "train")
    dx, dgamma, dbeta = L.batchnorm_backward(cache, r)
    return max(
        rel_error(dx, numeric_grad(loss, x)),
        rel_error(dgamma, numeric_grad(loss, gamma)),
        rel_error(dbeta, numeric_grad(loss, beta)),
    )


def audit_fully_connected(g: Graph, rng, t_len=12, n=2, out_dim=7) -> float:
    x = rng.standard_normal(t_len * g.f * n)
    w = rng.standard_normal((out_dim, x.size))
    b = rng.standard_normal(out_dim)
    r = rng.standard_normal(out_dim)

    def loss():
        return float(r @ L.fully_connected_forward(x, w, b))

    grads = L.fully_connected_backward(x, w, r)
    return max(
        rel_error(grads.d_input, numeric_grad(loss, x)),
        rel_error(grads.d_weights, numeric_grad(loss, w)),
        rel_error(grads.d_bias, numeric_grad(loss, b)),
    )


def audit_relu(g: Graph, rng, t_len=12, n=2) -> float:
    x = rng.standard_normal((t_len, g.f, n))
    x = np.where(np.abs(x) < 1e-3, 1e-3 * np.sign(x) + 1e-3 * (x == 0), x)
    r = rng.standard_normal(x.shape)

    def loss():
        return float(np.sum(r * L.relu_forward(x)))

    return rel_error(L.relu_backward(x, r), numeric_grad(loss, x))


def model_gradients(spec: ModelSpec, g: Graph, seed: int, batch: int = 3):
    """Analytic and numeric gradients of a batch MSE loss for every parameter."""
    rng = make_rng(seed)
    params = build_model(spec, g, rng)
    x = rng.standard_normal((batch, spec.window, spec.f, spec.n_channels))
    out0, _ = forward(params, spec, x, "train")
    target = rng.standard_normal(out0.shape)

    def loss():
        out, _ = forward(params, spec, x, "train")
        return float(np.mean((out - target) ** 2))

    out, cache = forward(params, spec, x, "train")
    grads = backward(params, spec, cache, 2 * (out - target) / out.size)
    results = []
    for idx, (p, gd) in enumerate(zip(params.layers, grads)):
        for name, analytic in gd.items():
            where = None
            if name == "weight" and params.masks[idx] is not None:
                where = np.broadcast_to(params.masks[idx][:, None, :, None, None], analytic.shape)
            numeric = numeric_grad(loss, p[name], where=where)
            results.append((idx, name, analytic, numeric, where))
    return results


def audit_model(spec: ModelSpec, g: Graph, seed: int = 0) -> float:
    worst = 0.0
    for _, _, analytic, numeric, where in model_gradients(spec, g, seed):
        if where is not None:
            if np.any(analytic[~where] != 0):
                return float("inf")
            analytic, numeric = analytic[where], numeric[where]
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def two_block_scnn(t_len=12, f=5, n=2, m=3, t=3, horizon=2) -> ModelSpec:
    layers = parse_layers(f"SC({t},{m}) ReLU BN MaxPool(2) SC({t},{m}) ReLU BN MaxPool(2) Flatten FC(8) ReLU FC(out)")
    return ModelSpec("scnn", f, t_len, horizon, n, 1, tuple(layers), ())


def run_audit(seed: int = 0) -> dict[str, float]:
    """Max relative error per layer kind on T=12, F=5, N=2, M=3, t=3."""
    g = example_graph()
    rng = make_rng(seed)
    return {
        "structural_conv": audit_structural_conv(g, rng),
        "time_conv": audit_structural_conv(g, rng, time_only=True),
        "transpose_conv": audit_transpose_conv(g, rng),
        "batchnorm": audit_batchnorm(g, rng),
        "fully_connected": audit_fully_connected(g, rng),
        "relu": audit_relu(g, rng),
        "scnn_two_block": audit_model(two_block_scnn(), g, seed),
    }
