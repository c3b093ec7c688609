import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from martingale_cv.mathcore import (
    CholeskyError,
    RandomStream,
    as_generator,
    cholesky,
    normal_cdf,
    standard_normals,
)


def test_stream_is_reproducible():
    a = standard_normals(RandomStream(11, 3), 1000)
    b = standard_normals(RandomStream(11, 3), 1000)
    np.testing.assert_array_equal(a, b)


def test_distinct_streams_differ():
    a = standard_normals(RandomStream(11, 0), 1000)
    b = standard_normals(RandomStream(11, 1), 1000)
    c = standard_normals(RandomStream(12, 0), 1000)
    assert not np.allclose(a, b)
    assert not np.allclose(a, c)


def test_substreams_are_distinct_and_stable():
    s = RandomStream(5, 7)
    x0 = standard_normals(s.substream(0), 100)
    x1 = standard_normals(s.substream(1), 100)
    assert not np.allclose(x0, x1)
    np.testing.assert_array_equal(x0, standard_normals(RandomStream(5, 7).substream(0), 100))


def test_normals_have_standard_moments():
    x = standard_normals(RandomStream(0), 200_000)
    se = 1.0 / math.sqrt(x.size)
    assert abs(x.mean()) < 4 * se
    assert abs(x.var() - 1.0) < 4 * math.sqrt(2.0) * se


def test_stream_rejects_bad_seeds():
    with pytest.raises(ValueError):
        RandomStream(-1)
    with pytest.raises(ValueError):
        RandomStream(2**64)
    with pytest.raises(TypeError):
        as_generator("seed")
    with pytest.raises(ValueError):
        standard_normals(RandomStream(0), 0)


@given(st.floats(-8, 8))
def test_normal_cdf_matches_erf(x):
    expected = 0.5 * math.erfc(-x / math.sqrt(2.0))
    assert normal_cdf(x) == pytest.approx(expected, rel=1e-12, abs=1e-300)


def test_normal_cdf_vectorised():
    x = np.array([-1.0, 0.0, 1.0])
    out = normal_cdf(x)
    assert out.shape == (3,)
    assert out[1] == 0.5
    assert out[0] + out[2] == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_cholesky_reconstructs_spd(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d, d))
    spd = a @ a.T + d * np.eye(d)
    c = cholesky(spd)
    assert np.allclose(np.triu(c.entries, 1), 0.0)
    assert np.all(np.diag(c.entries) > 0)
    np.testing.assert_allclose(c.reconstruct(), spd, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(c.entries, np.linalg.cholesky(spd), rtol=1e-10, atol=1e-12)


def test_cholesky_solve_and_inverse():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 4))
    c = cholesky(a @ a.T + np.eye(4))
    b = rng.normal(size=(4, 3))
    np.testing.assert_allclose(c.entries @ c.solve(b), b, atol=1e-12)
    np.testing.assert_allclose(c.inverse() @ c.entries, np.eye(4), atol=1e-12)


def test_cholesky_identity_and_correlated_pair():
    np.testing.assert_array_equal(cholesky(np.eye(3)).entries, np.eye(3))
    rho = 0.6
    c = cholesky([[1.0, rho], [rho, 1.0]]).entries
    np.testing.assert_allclose(c, [[1.0, 0.0], [rho, math.sqrt(1 - rho**2)]])


def test_cholesky_reports_failing_pivot():
    with pytest.raises(CholeskyError) as info:
        cholesky([[1.0, 2.0], [2.0, 1.0]])
    assert info.value.pivot == 1
    assert info.value.value == pytest.approx(-3.0)


def test_cholesky_rejects_non_square_and_asymmetric():
    with pytest.raises(ValueError):
        cholesky(np.ones((2, 3)))
    with pytest.raises(ValueError):
        cholesky([[1.0, 0.5], [0.0, 1.0]])
