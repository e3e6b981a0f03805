import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from litm.errors import DimensionError
from litm.numeric import RandomSource, cross_distances, pairwise_distances, squared_euclidean

from oracles import pairwise_loop

finite = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.mark.parametrize("a, b, expected", [
    ([1, 2], [1, 2], 0.0),
    ([0, 0], [3, 4], 25.0),
    ([1, 0, 2], [0, 1, 0], 6.0),
])
def test_squared_euclidean_examples(a, b, expected):
    assert squared_euclidean(a, b) == expected


def test_squared_euclidean_dimension_mismatch():
    with pytest.raises(DimensionError):
        squared_euclidean([1, 2], [1, 2, 3])


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_squared_euclidean_symmetric_and_zero_on_self(a, b):
    assert squared_euclidean(a, a) == 0.0
    assert squared_euclidean(a, b) == squared_euclidean(b, a)
    assert squared_euclidean(a, b) >= 0.0


def test_pairwise_small_examples():
    assert pairwise_distances([[0], [3]]).tolist() == [[0, 9], [9, 0]]
    assert pairwise_distances([[1.5, -2.0]]).tolist() == [[0.0]]


def test_pairwise_rejects_ragged_and_empty():
    with pytest.raises(DimensionError):
        pairwise_distances([[0, 1], [2]])
    with pytest.raises(DimensionError):
        pairwise_distances(np.zeros((0, 3)))


@settings(max_examples=50)
@given(st.integers(1, 9), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_pairwise_matches_elementwise_calls_exactly(n, d, seed):
    xs = RandomSource(seed).normal(size=(n, d))
    M = pairwise_distances(xs)
    expected = [[squared_euclidean(xs[i], xs[j]) for j in range(n)] for i in range(n)]
    assert M.tolist() == expected
    assert np.array_equal(M, M.T)
    assert np.all(np.diag(M) == 0)


def test_pairwise_matches_loop_oracle_on_four_random_vectors():
    xs = RandomSource(1).normal(size=(4, 6))
    np.testing.assert_allclose(pairwise_distances(xs), pairwise_loop(xs), rtol=1e-13, atol=0)


def test_cross_distances_shape_and_values():
    xs = np.array([[0.0, 0.0], [1.0, 1.0]])
    ys = np.array([[0.0, 1.0], [2.0, 2.0], [1.0, 1.0]])
    assert cross_distances(xs, ys).tolist() == [[1, 8, 2], [1, 2, 0]]


def test_random_source_reproducible_over_a_million_draws():
    a = RandomSource(2024).random(1_000_000)
    b = RandomSource(2024).random(1_000_000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a[:100], RandomSource(2025).random(100))


def test_random_source_children_are_independent_and_stable():
    root = RandomSource(9)
    c0, c1 = root.child(0), root.child(1)
    assert c0.seed != c1.seed
    assert RandomSource(9).child(0).seed == c0.seed
    assert np.array_equal(c0.normal(size=5), RandomSource(9).child(0).normal(size=5))


def test_random_source_rejects_non_integer_seed():
    with pytest.raises(TypeError):
        RandomSource(1.5)
