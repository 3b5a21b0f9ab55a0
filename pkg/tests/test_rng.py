import numpy as np
import pytest

from gentle.errors import ConfigError
from gentle.rng import Rng


def test_same_seed_same_stream():
    a = Rng(42).uniform(size=100)
    b = Rng(42).uniform(size=100)
    assert np.array_equal(a, b)


def test_different_seeds_differ():
    a = Rng(1).uniform(size=50)
    b = Rng(2).uniform(size=50)
    assert not np.array_equal(a, b)


def test_split_is_deterministic_and_independent():
    r = Rng(7)
    a1 = r.split("data").standard_normal(20)
    a2 = Rng(7).split("data").standard_normal(20)
    assert np.array_equal(a1, a2)
    b = Rng(7).split("model-init").standard_normal(20)
    assert not np.array_equal(a1, b)


def test_split_does_not_consume_parent():
    r1 = Rng(3)
    r1.split("x")
    r1.split("y", 4)
    r2 = Rng(3)
    assert np.array_equal(r1.uniform(size=10), r2.uniform(size=10))


def test_nested_paths_distinct():
    z1 = Rng(0).split("a", 1).integers(0, 1000, 10)
    z2 = Rng(0).split("a", 2).integers(0, 1000, 10)
    z3 = Rng(0).split("b", 1).integers(0, 1000, 10)
    assert not np.array_equal(z1, z2)
    assert not np.array_equal(z1, z3)


def test_string_and_int_keys_allowed():
    Rng(0).split("relabel", 3, "task", 9).uniform()


def test_negative_seed_rejected():
    with pytest.raises(ConfigError):
        Rng(-1)
    with pytest.raises(ConfigError):
        Rng(0).split(-5)
