import numpy as np
import pytest
from hypothesis import given, strategies as st

from balanced_rwre.lattice import (GridFunction, LatticeDomain, SiteIndex, box_sites, decode,
                                   encode, evaluate, mean_norm)

coords = st.integers(min_value=-(2**14) + 1, max_value=2**14 - 1)


@given(st.lists(st.tuples(coords, coords, coords), min_size=1, max_size=50))
def test_encode_roundtrip_and_order(pts):
    s = np.array(pts, dtype=np.int64)
    k = encode(s)
    np.testing.assert_array_equal(decode(k, 3), s)
    # key order is lexicographic order
    lex = sorted(range(len(pts)), key=lambda i: pts[i])
    assert list(np.argsort(k, kind="stable")) == lex


def test_encode_range():
    with pytest.raises(ValueError):
        encode(np.array([[2**14, 0]]))


def test_site_index_lookup():
    s = box_sites(3, 2)
    idx = SiteIndex(s)
    perm = np.random.default_rng(0).permutation(len(s))
    np.testing.assert_array_equal(idx.lookup(s[perm]), perm)
    assert idx.lookup(np.array([[9, 9]]))[0] == -1
    with pytest.raises(ValueError):
        SiteIndex(np.array([[0, 0], [0, 0]]))


def test_single_site_domain():
    dom = LatticeDomain(np.zeros((1, 2), np.int64))
    assert len(dom.boundary) == 8
    assert dom.diam_closure == 2
    dom3 = LatticeDomain(np.zeros((1, 3), np.int64))
    assert len(dom3.boundary) == 26


def test_ball_and_box():
    b = LatticeDomain.ball(1, 2)
    assert len(b) == 1  # |x| < 1
    cb = LatticeDomain.closed_ball(1, 2)
    assert len(cb) == 5
    assert len(LatticeDomain.box(2, 3)) == 125
    assert LatticeDomain.box(2, 2).diam_closure == 6


def test_grid_function():
    s = box_sites(1, 2)
    f = GridFunction.from_callable(s, lambda x: x[:, 0] + 10 * x[:, 1])
    assert f.at((1, -1)) == -9
    with pytest.raises(KeyError):
        f(np.array([[5, 5]]))
    g = GridFunction.constant(box_sites(2, 2), 7.0)
    m = f.merged(g)
    assert len(m) == 25 and m.at((1, 1)) == 11 and m.at((2, 2)) == 7
    np.testing.assert_array_equal(evaluate(2.0, s), np.full(9, 2.0))


def test_mean_norm_examples():
    assert mean_norm(np.full(5, 3.0), 1.7) == pytest.approx(3.0)
    assert mean_norm(np.array([1, 1, 0, 0]), 1) == pytest.approx(0.5)
    assert mean_norm(np.array([1, 2, 2, 4]), 2) == pytest.approx(2.5)
