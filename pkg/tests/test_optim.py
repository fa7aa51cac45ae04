import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structconv.data import prepare, synth_coupled
from structconv.graph import example_graph
from structconv.models import ModelParams, backward, build_model, default_spec, forward
from structconv.optim import (
    AdamState, EmptyDataset, Plateau, TrainConfig, TrainState, adam_step, batches, l1_gradient, mse_loss,
    train_epochs, train_scae_two_stage, write_log_csv,
)
from structconv.tensor import make_rng

TINY = "SC(3,2) ReLU BN MaxPool(2) SC(3,2) ReLU Flatten FC(8) ReLU FC(out)"


def scalar_params(w):
    return ModelParams([{"bias": np.array([float(w)])}], [None], example_graph(), "x")


def test_mse_examples():
    loss, grad = mse_loss([2.0], [0.0])
    assert loss == 4 and grad.tolist() == [4]
    loss, grad = mse_loss([1.0, 2.0], [1.0, 2.0])
    assert loss == 0 and not grad.any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_mse_grad_finite_difference(seed):
    rng = np.random.default_rng(seed)
    p, y = rng.normal(size=(2, 6))
    _, g = mse_loss(p, y)
    h = 1e-5
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        num = (mse_loss(p + e, y)[0] - mse_loss(p - e, y)[0]) / (2 * h)
        assert abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-6) <= 1e-6


def test_adam_first_step():
    params = scalar_params(1.0)
    state = AdamState.zeros_like(params, TrainConfig(alpha=0.1, beta1=0.999, beta2=0.999))
    adam_step(params, [{"bias": np.array([1.0])}], state)
    assert params.layers[0]["bias"][0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-12)


def test_adam_zero_grad_no_change():
    params = build_model(default_spec("scnn", 5, 24, 4, encoder=TINY), example_graph(), make_rng(0))
    before = params.copy()
    state = AdamState.zeros_like(params)
    adam_step(params, [{k: np.zeros_like(v) for k, v in p.items() if k in ("weight", "bias", "gamma", "beta")}
                       for p in params.layers], state, 0.0)
    for a, b in zip(before.layers, params.layers):
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()


def test_l1_subgradient():
    w = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(l1_gradient(w, np.zeros(3), 0.5), [-0.5, 0.0, 0.5])


def test_l1_only_on_conv_weights():
    spec = default_spec("scnn", 5, 24, 4, encoder=TINY)
    params = build_model(spec, example_graph(), make_rng(0))
    zero = [{k: np.zeros_like(v) for k, v in p.items() if k in ("weight", "bias", "gamma", "beta")}
            for p in params.layers]
    before = params.copy()
    adam_step(params, zero, AdamState.zeros_like(params), 1e-2)
    for idx, (a, b) in enumerate(zip(before.layers, params.layers)):
        for k in a:
            moved = not np.array_equal(a[k], b[k])
            assert moved == (k == "weight" and params.masks[idx] is not None)


def test_mask_closure_100_steps():
    spec = default_spec("scnn", 5, 24, 4, n_channels=2, encoder=TINY)
    params = build_model(spec, example_graph(), make_rng(5))
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(5)
    for _ in range(100):
        x = rng.normal(size=(4, 24, 5, 2))
        out, cache = forward(params, spec, x, "train")
        grads = backward(params, spec, cache, rng.normal(size=out.shape))
        for idx, mask in enumerate(params.masks):
            if mask is not None:
                dead = grads[idx]["weight"].transpose(0, 2, 1, 3, 4)[~mask]
                assert dead.tobytes() == np.zeros_like(dead).tobytes()
        adam_step(params, grads, state, 1e-4)
    for idx, mask in enumerate(params.masks):
        if mask is None:
            continue
        for arr in (params.layers[idx]["weight"], state.m[idx]["weight"], state.v[idx]["weight"]):
            dead = arr.transpose(0, 2, 1, 3, 4)[~mask]
            assert dead.tobytes() == np.zeros_like(dead).tobytes()


def test_320_windows_32_batches():
    parts = batches(make_rng(0), 320, TrainConfig())
    assert len(parts) == 32 and all(len(b) == 10 for b in parts)
    assert sorted(np.concatenate(parts).tolist()) == list(range(320))


def test_batch_size_override():
    parts = batches(make_rng(0), 25, TrainConfig(batch_size=10))
    assert [len(b) for b in parts] == [10, 10, 5]


def test_fewer_windows_than_batches():
    assert [len(b) for b in batches(make_rng(0), 5, TrainConfig())] == [1] * 5


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_count=0)
    with pytest.raises(ValueError):
        TrainConfig(l1_lambda=-1)


@pytest.fixture(scope="module")
def small_problem():
    g = example_graph()
    prep = prepare(synth_coupled(g, 3000, 3), 24, 4, 6)
    return g, prep, default_spec("scnn", 5, 24, 4, encoder=TINY)


def run(small_problem, seed, epochs):
    g, prep, spec = small_problem
    cfg = TrainConfig(epochs=epochs, seed=seed)
    state = TrainState.start(build_model(spec, g, make_rng(seed)), cfg)
    rows = train_epochs(spec, state, (prep.train.inputs, prep.train.targets),
                        (prep.validation.inputs, prep.validation.targets), cfg)
    return state, rows


def test_training_deterministic(small_problem):
    a, ra = run(small_problem, 4, 2)
    b, rb = run(small_problem, 4, 2)
    assert [(r["train_loss"], r["val_loss"]) for r in ra] == [(r["train_loss"], r["val_loss"]) for r in rb]
    for pa, pb in zip(a.params.layers, b.params.layers):
        for k in pa:
            assert pa[k].tobytes() == pb[k].tobytes()


def test_training_loss_decreases(small_problem):
    _, rows = run(small_problem, 0, 5)
    losses = [r["train_loss"] for r in rows]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_empty_dataset(small_problem):
    g, prep, spec = small_problem
    cfg = TrainConfig(epochs=1)
    state = TrainState.start(build_model(spec, g, make_rng(0)), cfg)
    empty = prep.train.inputs[:0]
    with pytest.raises(EmptyDataset):
        train_epochs(spec, state, (empty, empty), (empty, empty), cfg)


def test_plateau_boundary_definition():
    stop = Plateau(patience=3, min_delta=0.1)
    vals = [5.0, 4.0, 3.95, 3.5, 3.45, 3.44, 3.43, 1.0]
    fired = [stop({"val_loss": v}) for v in vals]
    # best 3.5 at epoch 4; epochs 5, 6, 7 fail to improve by 0.1
    assert fired.index(True) == 6


@pytest.fixture(scope="module")
def scae_problem():
    g = example_graph()
    prep = prepare(synth_coupled(g, 1500, 2), 20, 0, 10)
    spec = default_spec("scae", 5, 20, encoder="SC(3,4) ReLU MaxPool(2) SC(3,2) ReLU",
                        decoder="TSC(3,4) ReLU Unpool(2) TSC(3,in)")
    return g, prep, spec


def two_stage(scae_problem, lam):
    g, prep, spec = scae_problem
    cfg = TrainConfig(epochs=3, l1_lambda=lam, patience=2, stage1_max_epochs=6, batch_count=8)
    train = (prep.train.inputs, prep.train.inputs)
    val = (prep.validation.inputs, prep.validation.inputs)
    return train_scae_two_stage(spec, build_model(spec, g, make_rng(0)), train, val, cfg)


def test_two_stage_log(scae_problem, tmp_path):
    params, log, boundary = two_stage(scae_problem, 1e-3)
    stages = [r["stage"] for r in log]
    assert stages == ["plain"] * boundary + ["l1"] * 3
    assert all(r["l1_lambda"] == 0 for r in log[:boundary])
    write_log_csv(log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,stage,train_loss,val_loss,l1_lambda,wall_seconds" and len(lines) == len(log) + 1


def test_two_stage_lambda_zero_equals_plain(scae_problem):
    g, prep, spec = scae_problem
    p0, log0, b0 = two_stage(scae_problem, 0.0)
    cfg = TrainConfig(epochs=b0 + 3, batch_count=8)
    state = TrainState.start(build_model(spec, g, make_rng(0)), cfg)
    train_epochs(spec, state, (prep.train.inputs, prep.train.inputs),
                 (prep.validation.inputs, prep.validation.inputs), cfg)
    for pa, pb in zip(p0.layers, state.params.layers):
        for k in pa:
            assert pa[k].tobytes() == pb[k].tobytes()


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(11)
    w0 = rng.normal(size=6)
    params = scalar_params(0.0)
    params.layers[0]["bias"] = w0.copy()
    state = AdamState.zeros_like(params)
    w, m, v = w0.copy(), np.zeros(6), np.zeros(6)
    for step in range(1, 6):
        g = rng.normal(size=6)
        adam_step(params, [{"bias": g.copy()}], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-3 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
    np.testing.assert_allclose(params.layers[0]["bias"], w, rtol=1e-13, atol=1e-15)
