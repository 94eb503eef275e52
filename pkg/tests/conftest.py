import numpy as np
import pytest

from gqsa.gqs import build_gqs


def random_layer(rng, rows=None, cols=None, group_size=None, bits=None, sparsity=None, bias=None):
    """Random GQS layer with shapes and options drawn from ``rng`` unless given."""
    group_size = group_size or int(rng.choice([4, 8, 16]))
    bits = bits or int(rng.choice([2, 3, 4, 8]))
    rows = rows or int(rng.integers(1, 24))
    cols = cols or group_size * int(rng.integers(1, 8))
    sparsity = float(rng.uniform(0, 0.9)) if sparsity is None else sparsity
    bias = bool(rng.integers(2)) if bias is None else bias
    w = rng.standard_normal((rows, cols)).astype(np.float32)
    keep = rng.random((rows, cols // group_size)) >= sparsity
    b = rng.standard_normal(rows).astype(np.float32) if bias else None
    return build_gqs(w, keep, group_size, bits, bias=b)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def topology_layer():
    """4 rows, G=4, 8 columns; rows own 1, 2, 0 and 1 groups."""
    keep = np.array([[False, True], [True, True], [False, False], [False, True]])
    w = np.arange(32, dtype=np.float32).reshape(4, 8) / 8.0 - 2.0
    bias = np.array([0.5, -1.0, 3.25, 2.0], dtype=np.float32)
    return build_gqs(w, keep, 4, 4, bias=bias)
