import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qgkoopman.latent_space import (
    LatentState,
    NormalizationStats,
    decode,
    encode,
    encode_pairs,
    energy_fraction,
    fit_pod,
)

SHAPE = (4, 8, 8)


def snapshots(n=40, seed=0, rank=None):
    rng = np.random.default_rng(seed)
    if rank is None:
        return rng.standard_normal((n,) + SHAPE)
    a = rng.standard_normal((n, rank)) @ rng.standard_normal((rank, int(np.prod(SHAPE))))
    return a.reshape((n,) + SHAPE)


@pytest.fixture(scope="module")
def basis():
    return fit_pod(snapshots(), 12)


def test_stats_validation():
    with pytest.raises(ValueError):
        NormalizationStats([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        NormalizationStats([0.0], [1.0, 2.0])


def test_normalize_round_trip():
    s = NormalizationStats([1.0, -2.0, 3.0, 0.5], [2.0, 0.1, 10.0, 1.0])
    x = snapshots(3)
    np.testing.assert_allclose(s.denormalize(s.normalize(x)), x, rtol=1e-14, atol=1e-13)
    assert s.normalize(x)[1, 1, 0, 0] == pytest.approx((x[1, 1, 0, 0] + 2.0) / 0.1)


def test_latent_state_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        LatentState(np.array([0.0, np.nan]))


def test_modes_orthonormal_and_sorted(basis):
    assert np.linalg.norm(basis.modes @ basis.modes.T - np.eye(basis.d)) < 1e-10
    sv = basis.singular_values
    assert np.all(np.diff(sv) <= 0) and np.all(sv >= 0)
    assert basis.N == np.prod(SHAPE)


def test_rank_one_reconstruction():
    x = snapshots(1, seed=3)[0]
    data = np.stack([x, -2 * x, 0.5 * x])
    b = fit_pod(data, 1)
    back = decode(b, encode(b, x))
    assert np.linalg.norm(back - x) / np.linalg.norm(x) < 1e-10


def test_full_rank_reconstruction():
    data = snapshots(20, seed=1, rank=5)
    b = fit_pod(data, 5)
    for x in data:
        assert np.linalg.norm(decode(b, encode(b, x)) - x) < 1e-10 * np.linalg.norm(x)


def test_energy_fraction_matches_covariance_eigenvalues():
    data = snapshots(30, seed=2)
    b = fit_pod(data, 7)
    X = data.reshape(30, -1)
    # oracle: eigenvalues of the (uncentered) Gram matrix
    ev = np.sort(np.linalg.eigvalsh(X @ X.T))[::-1]
    assert abs(energy_fraction(b, data) - ev[:7].sum() / ev.sum()) < 1e-8


def test_fit_pod_errors():
    with pytest.raises(ValueError):
        fit_pod(snapshots(5), 6)
    with pytest.raises(ValueError):
        fit_pod(snapshots(5), 0)


def test_encode_identical_streams(basis):
    x = snapshots(1, seed=5)[0]
    np.testing.assert_allclose(encode(basis, x, x).z, basis.modes @ x.reshape(-1), rtol=1e-13)
    np.testing.assert_allclose(encode(basis, x).z, basis.modes @ x.reshape(-1), rtol=1e-13)


def test_encode_averages_streams(basis):
    x, y = snapshots(2, seed=6)
    expect = 0.5 * (basis.modes @ x.reshape(-1) + basis.modes @ y.reshape(-1))
    np.testing.assert_allclose(encode(basis, x, y, t=3.0).z, expect, rtol=1e-13)
    np.testing.assert_allclose(encode_pairs(basis, x[None], y[None])[0], expect, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-1e3, 1e3, allow_nan=False), seed=st.integers(0, 2**16))
def test_encode_is_linear(basis, a, seed):
    x, y = snapshots(2, seed=seed)
    lhs = encode(basis, a * x, a * y).z
    rhs = a * encode(basis, x, y).z
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * (1 + abs(a)) * np.abs(rhs).max())


def test_encode_shape_mismatch(basis):
    with pytest.raises(ValueError):
        encode(basis, np.zeros((4, 8, 16)))
    with pytest.raises(ValueError):
        decode(basis, np.zeros(basis.d + 1))


def test_span_projection_identity(basis):
    rng = np.random.default_rng(7)
    x = (rng.standard_normal(basis.d) @ basis.modes).reshape(SHAPE)
    assert np.abs(decode(basis, encode(basis, x, x)) - x).max() < 1e-10


def test_decode_zero_and_unit(basis):
    assert np.all(decode(basis, np.zeros(basis.d)) == 0)
    e = np.zeros(basis.d)
    e[3] = 1.0
    np.testing.assert_array_equal(decode(basis, e), basis.modes[3].reshape(SHAPE))


def test_decode_batched(basis):
    z = np.random.default_rng(8).standard_normal((5, basis.d))
    out = decode(basis, z)
    assert out.shape == (5,) + SHAPE
    np.testing.assert_allclose(out[2], decode(basis, z[2]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_encode_decode_fixed_point(basis, seed):
    z = np.random.default_rng(seed).standard_normal(basis.d)
    x = decode(basis, z)
    assert np.abs(encode(basis, x, x).z - z).max() < 1e-10


def test_projection_idempotent(basis):
    x = snapshots(1, seed=9)[0]
    once = decode(basis, encode(basis, x))
    twice = decode(basis, encode(basis, once))
    assert np.abs(twice - once).max() < 1e-10


def test_reconstruction_error_nonincreasing_in_d():
    data = snapshots(30, seed=10)
    full = fit_pod(data, 20)
    errs = []
    for d in range(1, 21):
        b = full.truncate(d)
        rec = decode(b, encode_pairs(b, data, data))
        errs.append(np.sum((rec - data) ** 2))
    assert np.all(np.diff(errs) <= 1e-9)


def test_truncate_drops_smallest_modes():
    data = snapshots(30, seed=11)
    full = fit_pod(data, 10)
    small = full.truncate(4)
    np.testing.assert_array_equal(small.modes, full.modes[:4])
    assert small.singular_values.min() >= full.singular_values[4:].max()
    with pytest.raises(ValueError):
        full.truncate(11)
