import numpy as np
import pytest

from structconv.tensor import (
    DimensionMismatch, NonFinite, add, as_series, from_rows, gaussian, l2_distance, make_rng, scale,
    slice_time, zeros,
)


def test_zeros():
    z = zeros(2, 2, 1)
    assert z.shape == (2, 2, 1) and not z.any()


def test_from_rows_row_major():
    x = from_rows([[1, 2], [3, 4]], f=2, n=1)
    np.testing.assert_array_equal(x.reshape(-1), [1, 2, 3, 4])


def test_from_rows_ragged():
    with pytest.raises(DimensionMismatch):
        from_rows([[1, 2], [3]], f=2)


def test_layout_law():
    t_len, f, n = 3, 4, 2
    x = from_rows(np.arange(t_len * f * n).reshape(t_len, f * n), f, n)
    flat = x.reshape(-1)
    for tau in range(t_len):
        for i in range(f):
            for c in range(n):
                assert flat[(tau * f + i) * n + c] == x[tau, i, c]


def test_constructors_reject_nonfinite():
    with pytest.raises(NonFinite):
        as_series(np.full((1, 1, 1), np.nan))


def test_gaussian_zero_stddev():
    np.testing.assert_array_equal(gaussian(make_rng(3), 4, 2, 1, mean=1.5, stddev=0.0), 1.5)


def test_gaussian_deterministic():
    a = gaussian(make_rng(99), 10, 3, 2)
    b = gaussian(make_rng(99), 10, 3, 2)
    assert a.tobytes() == b.tobytes()


def test_gaussian_moments():
    x = gaussian(make_rng(1), 10_000, 1, 1)
    assert abs(x.mean()) <= 0.05
    assert abs(x.var() - 1) <= 0.1


def test_l2_distance():
    assert l2_distance([3, 4], [0, 0]) == 5


def test_slice_identity_and_copy():
    x = gaussian(make_rng(0), 5, 2, 1)
    s = slice_time(x, 0, 5)
    np.testing.assert_array_equal(s, x)
    s[0] = 100
    assert x[0, 0, 0] != 100
    with pytest.raises(IndexError):
        slice_time(x, 3, 3)


def test_add_negated_is_zero():
    x = gaussian(make_rng(2), 4, 3, 2)
    assert not add(x, scale(x, -1)).any()
    with pytest.raises(DimensionMismatch):
        add(x, x[:2])
