import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_instance
from hcrfplus.errors import InvalidInputError
from hcrfplus.model import (FeatureDims, ModelParams, SequenceSample, energy, init_params,
                            pairwise_potential, params_as_vector, unary_potential,
                            vector_as_params, zero_params)


def _params_for_unary_example():
    dims = FeatureDims(2, 1, 2, 2)
    p = zero_params(dims)
    t1, t2, t3 = p.theta1.copy(), p.theta2.copy(), p.theta3.copy()
    t1[1, 0] = 0.5
    t2[0] = [1.0, -1.0]
    t3[0] = [0.2]
    return ModelParams(t1, t2, t3, p.omega)


def test_unary_example():
    p = _params_for_unary_example()
    assert unary_potential(1, 0, [2.0, 3.0], [5.0], p) == pytest.approx(0.5, abs=1e-15)


def test_unary_zero_params():
    p = zero_params(FeatureDims(3, 2, 2, 4))
    assert unary_potential(1, 3, [1.0, -2.0, 7.0], [3.0, 4.0], p) == 0.0


def test_unary_drops_absent_privileged_term():
    dims = FeatureDims(2, 2, 2, 2)
    z = zero_params(dims)
    p = ModelParams(z.theta1, z.theta2, np.full((2, 2), 9.0), z.omega)
    assert unary_potential(0, 1, [1.0, 1.0], None, p) == 0.0


def test_unary_dimension_mismatch():
    p = zero_params(FeatureDims(2, 1, 2, 2))
    with pytest.raises(InvalidInputError):
        unary_potential(0, 0, [1.0, 2.0, 3.0], None, p)
    with pytest.raises(InvalidInputError):
        unary_potential(0, 0, [1.0, 2.0], [1.0, 2.0], p)


def test_pairwise_lookup():
    dims = FeatureDims(1, 1, 2, 3)
    z = zero_params(dims)
    om = z.omega.copy()
    om[1, 0, 2] = -0.7
    p = ModelParams(z.theta1, z.theta2, z.theta3, om)
    assert pairwise_potential(1, 0, 2, p) == -0.7
    assert pairwise_potential(0, 1, 1, z) == 0.0
    eye = ModelParams(z.theta1, z.theta2, z.theta3, np.stack([np.eye(3)] * 2))
    assert pairwise_potential(1, 2, 2, eye) == 1.0
    with pytest.raises(InvalidInputError):
        pairwise_potential(2, 0, 0, p)


def test_energy_single_frame_is_unary():
    p = _params_for_unary_example()
    s = SequenceSample("a", [[2.0, 3.0]], 1, [[5.0]])
    assert energy(1, [0], s, p) == pytest.approx(0.5, abs=1e-15)


def test_energy_zero_params():
    p = zero_params(FeatureDims(2, 1, 2, 2))
    s = SequenceSample("a", [[2.0, 3.0], [1.0, 1.0]], 0, [[5.0], [1.0]])
    assert energy(0, [0, 1], s, p) == 0.0


def test_energy_matches_term_by_term_sum():
    dims, p, s = random_instance(7, n_labels=2, n_hidden=2, length=3)
    path = [1, 0, 1]
    y = 1
    expected = 0.0
    for j, a in enumerate(path):
        expected += p.theta1[y, a] + float(np.dot(p.theta2[a], s.frames[j]))
        expected += float(np.dot(p.theta3[a], s.privileged[j]))
    expected += p.omega[y, 1, 0] + p.omega[y, 0, 1]
    assert energy(y, path, s, p) == pytest.approx(expected, abs=1e-12)


def test_energy_length_mismatch():
    dims, p, s = random_instance(1)
    with pytest.raises(InvalidInputError):
        energy(0, [0, 0], s, p)


def test_vector_length_formula():
    assert FeatureDims(4, 2, 2, 3).n_params == 42
    assert params_as_vector(zero_params(FeatureDims(4, 2, 2, 3))).size == 42


def test_pack_unpack_round_trip():
    dims = FeatureDims(4, 2, 2, 3)
    p = init_params(dims, 3, 1.0)
    q = vector_as_params(params_as_vector(p), dims)
    assert p.equals(q)


def test_flatten_order():
    dims = FeatureDims(1, 1, 1, 2)
    v = np.arange(dims.n_params, dtype=float)
    p = vector_as_params(v, dims)
    np.testing.assert_array_equal(p.theta1, [[0, 1]])
    np.testing.assert_array_equal(p.theta2, [[2], [3]])
    np.testing.assert_array_equal(p.theta3, [[4], [5]])
    np.testing.assert_array_equal(p.omega, [[[6, 7], [8, 9]]])


def test_zero_vector_gives_zero_params():
    dims = FeatureDims(3, 2, 2, 2)
    p = vector_as_params(np.zeros(dims.n_params), dims)
    assert p.squared_norm() == 0.0


def test_wrong_length_vector():
    with pytest.raises(InvalidInputError):
        vector_as_params(np.zeros(5), FeatureDims(3, 2, 2, 2))


def test_init_params_determinism_and_scale():
    dims = FeatureDims(3, 2, 2, 4)
    assert init_params(dims, 1, 0.3).equals(init_params(dims, 1, 0.3))
    assert not init_params(dims, 1, 0.3).equals(init_params(dims, 2, 0.3))
    assert init_params(dims, 5, 0.0).squared_norm() == 0.0
    v = params_as_vector(init_params(dims, 9, 0.3))
    assert np.all(np.abs(v) <= 0.3)


def test_sample_validation():
    with pytest.raises(InvalidInputError, match="s1"):
        SequenceSample("s1", [[1.0, np.nan]], 0)
    with pytest.raises(InvalidInputError):
        SequenceSample("s2", [[1.0], [2.0]], 0, [[1.0]])
    with pytest.raises(InvalidInputError):
        SequenceSample("s3", np.zeros((0, 2)), 0)


paths = st.integers(0, 2)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-3, 3), b=st.floats(-3, 3),
       path=st.lists(st.integers(0, 2), min_size=4, max_size=4), y=st.integers(0, 2))
def test_energy_is_linear_in_params(seed, a, b, path, y):
    dims, p1, s = random_instance(seed, n_hidden=3, length=4)
    p2 = init_params(dims, seed + 1, 1.0)
    combo = vector_as_params(a * params_as_vector(p1) + b * params_as_vector(p2), dims)
    lhs = energy(y, path, s, combo)
    rhs = a * energy(y, path, s, p1) + b * energy(y, path, s, p2)
    assert lhs == pytest.approx(rhs, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), path=st.lists(st.integers(0, 2), min_size=4, max_size=4))
def test_regular_energy_ignores_privileged_weights(seed, path):
    dims, p, s = random_instance(seed, n_hidden=3, length=4)
    zeroed = s.with_privileged(np.zeros_like(s.privileged))
    assert energy(0, path, s, p, use_privileged=False) == pytest.approx(
        energy(0, path, zeroed, p), abs=1e-12)
    other = ModelParams(p.theta1, p.theta2, p.theta3 * 17.0 - 3.0, p.omega)
    assert energy(0, path, s, p, use_privileged=False) == energy(0, path, s, other,
                                                                 use_privileged=False)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    dims = FeatureDims(*(int(v) for v in rng.integers(1, 5, size=4)))
    v = rng.normal(size=dims.n_params)
    np.testing.assert_array_equal(params_as_vector(vector_as_params(v, dims)), v)
