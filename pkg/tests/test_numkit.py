"""Tests for dlsim numkit"""

import sys, os
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

import numpy as np
import pytest

from dlsim.errors import DimensionError, NonFiniteError
from dlsim.numkit import ParamVec, Rng, axpy, fnv1a64, l2_norm, mean


def test_axpy_examples():
    assert axpy(0, ParamVec([1, 2]), ParamVec([3, 4])) == ParamVec([3, 4])
    assert axpy(1, ParamVec([1, 1]), ParamVec([0, 0])) == ParamVec([1, 1])
    assert axpy(-1, ParamVec([2, 5]), ParamVec([2, 5])) == ParamVec([0, 0])


def test_axpy_inverse():
    gen = Rng(3).generator()
    x = ParamVec(gen.normal(size=20))
    y = ParamVec(gen.normal(size=20))
    back = axpy(0.37, x, axpy(-0.37, x, y))
    assert back.max_abs_diff(y) <= 1e-12


def test_axpy_length_mismatch():
    with pytest.raises(DimensionError):
        axpy(1.0, ParamVec([1, 2]), ParamVec([1, 2, 3]))


def test_l2_norm():
    assert l2_norm(ParamVec([0, 0, 0])) == 0.0
    assert l2_norm(ParamVec([3, 4])) == 5.0
    assert l2_norm(ParamVec([1, 1, 1, 1])) == 2.0


def test_mean_examples():
    assert mean([ParamVec([1]), ParamVec([2]), ParamVec([3])]) == ParamVec([2])
    assert mean([ParamVec([0.25])]) == ParamVec([0.25])
    assert mean([ParamVec([1, 0]), ParamVec([0, 1])]) == ParamVec([0.5, 0.5])


def test_mean_errors():
    with pytest.raises(DimensionError):
        mean([])
    with pytest.raises(DimensionError):
        mean([ParamVec([1]), ParamVec([1, 2])])


def test_mean_permutation_invariant():
    gen = Rng(11).generator()
    vs = [ParamVec(gen.normal(size=5)) for _ in range(6)]
    assert mean(vs).max_abs_diff(mean(list(reversed(vs)))) <= 1e-14


def test_mean_of_identical_vectors_is_exact():
    gen = Rng(12).generator()
    for count in (2, 3, 5, 7, 9):
        c = ParamVec(gen.normal(size=8) * 10 + 0.1)
        assert mean([c] * count) == c
    c = ParamVec([0.7, -1.2, 1.0 / 3.0])
    assert (c - mean([c, c, c])) == ParamVec([0.0, 0.0, 0.0])


def test_paramvec_is_immutable():
    v = ParamVec([1.0, 2.0])
    with pytest.raises(ValueError):
        v.values[0] = 5.0
    assert v.to_list() == [1.0, 2.0]


def test_paramvec_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        ParamVec([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        ParamVec([1e308]) * 10.0


def test_paramvec_arithmetic():
    a = ParamVec([1.0, 2.0])
    b = ParamVec([0.5, -1.0])
    assert a + b == ParamVec([1.5, 1.0])
    assert a - b == ParamVec([0.5, 3.0])
    assert -a == ParamVec([-1.0, -2.0])
    assert 2 * a == ParamVec([2.0, 4.0])
    assert a / 2 == ParamVec([0.5, 1.0])
    with pytest.raises(TypeError):
        a + [1.0, 2.0]


def test_fnv1a64_reference_values():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


def test_digest_stable():
    v = ParamVec([0.1, 0.2, 0.3])
    assert v.digest() == ParamVec([0.1, 0.2, 0.3]).digest()
    assert len(v.digest()) == 16
    assert v.digest() != ParamVec([0.1, 0.2, 0.30000001]).digest()


def test_rng_reproducible():
    a = Rng(42, 7).generator(3).normal(size=8)
    b = Rng(42, 7).generator(3).normal(size=8)
    assert np.array_equal(a, b)


def test_rng_streams_differ():
    rng = Rng(42)
    a = rng.child("batches/0").generator().normal(size=8)
    b = rng.child("batches/1").generator().normal(size=8)
    c = rng.generator(1).normal(size=8)
    assert not np.array_equal(a, b)
    assert not np.array_equal(rng.generator(0).normal(size=8), c)


def test_rng_child_is_deterministic():
    assert Rng(5).child("init") == Rng(5).child("init")
    assert Rng(5).child("init") != Rng(6).child("init")


def test_rng_rejects_negative_seed():
    with pytest.raises(ValueError):
        Rng(-1)


if __name__ == "__main__":
    for name_key, fn in list(globals().items()):
        if name_key.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"  PASS  {name_key}")
            except Exception as e:
                print(f"  FAIL  {name_key}: {e}")
