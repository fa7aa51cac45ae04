import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structconv.analysis import (
    RaggedInput, export_heatmap, horizon_trend, kernel_heatmaps, load_heatmap_csv, overall_sparsity, pgm_pixels,
    read_pgm, recurrence, rmse_report, sparsity_report,
)
from structconv.graph import example_graph
from structconv.layers import ShapeMismatch
from structconv.models import build_model, default_spec
from structconv.tensor import make_rng


def two_pass_oracle(p, y):
    k, h, f = p.shape
    total, per_step = 0.0, []
    for s in range(h):
        acc = 0.0
        for i in range(k):
            for j in range(f):
                acc += (p[i, s, j] - y[i, s, j]) ** 2
        per_step.append(np.sqrt(acc / (k * f)))
        total += acc
    mean = sum(y[i, s, j] for i in range(k) for s in range(h) for j in range(f)) / y.size
    sst = sum((y[i, s, j] - mean) ** 2 for i in range(k) for s in range(h) for j in range(f))
    return np.sqrt(total / p.size), np.array(per_step), 1 - total / sst


def test_perfect_and_offset(rng):
    y = rng.normal(size=(3, 4, 2))
    rep = rmse_report(y, y)
    assert rep.rmse == 0 and rep.r2 == 1
    assert rmse_report(y + 1, y).rmse == pytest.approx(1, abs=1e-15)


def test_matches_two_pass_oracle(rng):
    p, y = rng.normal(size=(2, 3, 4, 2))
    rmse, per_step, r2 = two_pass_oracle(p, y)
    rep = rmse_report(p, y)
    assert abs(rep.rmse - rmse) <= 1e-12 and abs(rep.r2 - r2) <= 1e-12
    assert np.abs(rep.per_step - per_step).max() <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 6), st.integers(1, 4))
def test_per_step_recombines(seed, k, h, f):
    rng = np.random.default_rng(seed)
    p, y = rng.normal(size=(2, k, h, f))
    rep = rmse_report(p, y)
    assert abs(np.mean(rep.per_step ** 2) - rep.rmse ** 2) <= 1e-12
    assert rep.r2 <= 1


def test_report_shape_errors():
    with pytest.raises(ShapeMismatch):
        rmse_report(np.zeros((2, 3, 1)), np.zeros((2, 3, 2)))


def test_horizon_trend_monotone():
    p = np.zeros((4, 5, 2))
    y = np.arange(5.0)[None, :, None] * np.ones((4, 5, 2))
    assert horizon_trend(rmse_report(p, y)) == pytest.approx(1.0)


def test_recurrence_periodic():
    base = np.random.default_rng(0).normal(size=(7, 3))
    bits = recurrence([base[i % 7] for i in range(50)]).bits
    i, j = np.indices((50, 50))
    assert np.array_equal(bits, (i - j) % 7 == 0)


def test_recurrence_all_true_and_band():
    a = np.random.default_rng(1).normal(size=(10, 2))
    assert recurrence(a, eps=1e6).bits.all()
    assert np.array_equal(recurrence(np.arange(6.0), eps=0.5).bits, np.eye(6, dtype=bool))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 3))
def test_recurrence_symmetric_reflexive(seed, eps):
    a = np.random.default_rng(seed).normal(size=(15, 3))
    bits = recurrence(a, eps).bits
    assert np.array_equal(bits, bits.T) and bits.diagonal().all()


def test_recurrence_errors():
    with pytest.raises(RaggedInput):
        recurrence([[1.0, 2.0], [1.0]])
    with pytest.raises(RaggedInput):
        recurrence([])


def test_sparsity_counts_unmasked_only():
    spec = default_spec("tcnn", 5, 12, 1, encoder="SC(3,4) Flatten FC(out)")
    params = build_model(spec, example_graph(), make_rng(0))
    rep = sparsity_report(params)
    assert rep[0].unmasked == 3 * 1 * 4 * 5
    params.layers[0]["weight"][...] = 0
    rep = sparsity_report(params)
    assert rep[0].fraction == 1 and rep[0].exact_zeros == 60
    assert overall_sparsity(params) == 1


def test_fresh_model_mostly_dense():
    spec = default_spec("scnn", 5, 40, 2)
    assert overall_sparsity(build_model(spec, example_graph(), make_rng(0))) < 0.05


def test_pgm_examples(tmp_path):
    np.testing.assert_array_equal(pgm_pixels([[0, 1], [1, 0]]), [[0, 255], [255, 0]])
    assert not pgm_pixels(np.full((3, 2), 7.0)).any()
    export_heatmap([[0, 1], [1, 0]], tmp_path / "m.pgm", "pgm")
    assert (tmp_path / "m.pgm").read_text() == "P2\n2 2\n255\n0 255\n255 0\n"
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), [[0, 255], [255, 0]])


def test_csv_heatmap_round_trip(tmp_path, rng):
    m = rng.normal(size=(4, 6))
    export_heatmap(m, tmp_path / "m.csv")
    assert np.abs(load_heatmap_csv(tmp_path / "m.csv") - m).max() <= 1e-12
    with pytest.raises(ValueError):
        export_heatmap([[np.nan]], tmp_path / "bad.csv")


def test_kernel_heatmap_layout():
    spec = default_spec("scnn", 5, 12, 1, encoder="SC(3,2) Flatten FC(out)")
    params = build_model(spec, example_graph(), make_rng(0))
    maps = kernel_heatmaps(params, spec, 0)
    w = params.layers[0]["weight"]
    assert len(maps) == 5 and maps[2].shape == (5, 6)
    assert maps[2][1, 1 * 3 + 2] == w[2, 2, 1, 0, 1]
    assert not maps[2][4].any()
