import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from topotex.cubical import (PersistenceDiagram, betti_at, build_filtration, compute_persistence,
                             compute_persistence_naive, oracle_persistence_h0, patch_diagram)

DIGIT_8 = """
............
...######...
..##....##..
..#......#..
..##....##..
...######...
..##....##..
.##......##.
.#........#.
.##......##.
..########..
............
"""


def digit8() -> np.ndarray:
    rows = [r for r in DIGIT_8.strip().splitlines()]
    return np.array([[0.0 if ch == "#" else 1.0 for ch in r] for r in rows])


def finite_h0(d):
    return sorted((b, e) for b, e in d.intervals(0) if math.isfinite(e))


def test_cell_counts_2x2():
    f = build_filtration(np.arange(4.0).reshape(2, 2))
    assert f.counts() == (9, 12, 4)


@pytest.mark.parametrize("s", [2, 3, 7])
def test_cell_counts_general(s):
    assert build_filtration(np.zeros((s, s))).counts() == ((s + 1) ** 2, 2 * s * (s + 1), s * s)


def test_constant_patch_values():
    f = build_filtration(np.full((3, 3), 2.5))
    assert np.all(f.values == 2.5)


def test_min_rule_example():
    f = build_filtration(np.array([[0.0, 5.0], [5.0, 5.0]]))
    grid = f.values.reshape(5, 5)
    # vertices and edges around pixel (0, 0) occupy grid rows/cols 0..2
    low = {(i, j) for i in range(3) for j in range(3) if (i, j) != (1, 1)}
    for i in range(5):
        for j in range(5):
            if (i, j) == (1, 1):
                assert grid[i, j] == 0
            elif (i, j) in low:
                assert grid[i, j] == 0, (i, j)
            else:
                assert grid[i, j] == 5, (i, j)
    dims = f.dims.reshape(5, 5)
    assert sum(dims[i, j] == 0 for i, j in low) == 4
    assert sum(dims[i, j] == 1 for i, j in low) == 4


def test_filtration_is_valid_and_ordered():
    rng = np.random.default_rng(0)
    f = build_filtration(rng.integers(0, 5, (6, 6)).astype(float))
    for c in range(len(f.values)):
        for face in f.boundary(c):
            assert f.values[face] <= f.values[c]
    keys = list(zip(f.values[f.order], f.dims[f.order], f.order))
    assert keys == sorted(keys)


def test_constant_patch_diagrams():
    p = np.full((4, 4), 3.0)
    assert len(patch_diagram(p)) == 0
    kept = patch_diagram(p, "keep")
    assert kept.intervals() == [(3.0, math.inf)]
    assert patch_diagram(p, "cap_at_limit").intervals() == [(3.0, 5.0)]
    assert len(patch_diagram(p, "drop")) == 0
    assert oracle_persistence_h0(p) == [(3.0, math.inf)]


def test_two_basins_ridge():
    p = np.ones((3, 3))
    p[0, 0] = p[0, 2] = 0.0
    d = patch_diagram(p, "keep")
    assert d.intervals(0) == [(0.0, 1.0), (0.0, math.inf)]
    assert d.intervals(1) == []
    assert sorted(oracle_persistence_h0(p)) == [(0.0, 1.0), (0.0, math.inf)]


def test_increasing_raster_single_component():
    p = np.arange(25.0).reshape(5, 5)
    assert oracle_persistence_h0(p) == [(0.0, math.inf)]
    d = patch_diagram(p, "keep")
    assert d.intervals(0) == [(0.0, math.inf)]


def test_digit_eight_betti():
    d = patch_diagram(digit8(), "keep")
    assert betti_at(d, 0.5) == (1, 2)
    # holes fill in when the background level enters
    assert betti_at(d, 1.0) == (1, 0)


def test_betti_trivial_cases():
    assert betti_at(PersistenceDiagram.from_intervals([]), 0.0) == (0, 0)
    d = patch_diagram(digit8(), "keep")
    assert betti_at(d, -1.0) == (0, 0)


def test_diagram_text_roundtrip():
    d = patch_diagram(digit8(), "keep")
    back = PersistenceDiagram.loads(d.dumps())
    assert back.dumps() == d.dumps()
    assert "inf" in d.dumps()


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(2, 7), st.just(0)).map(lambda t: (t[0], t[0])),
              elements=st.integers(0, 4)))
def test_fast_matches_naive_and_oracle(a):
    p = a.astype(float)
    f = build_filtration(p)
    fast = compute_persistence(f, "keep")
    slow = compute_persistence_naive(f, "keep")
    assert fast.dumps() == slow.dumps()
    assert sorted(fast.intervals(0)) == sorted(oracle_persistence_h0(p))


def test_shift_and_scale_equivariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rng.normal(size=(9, 9))
        ref = patch_diagram(p, "keep")
        for c in (-3.0, 5.0):
            got = patch_diagram(p + c, "keep")
            exp = ref.shifted(c)
            assert np.array_equal(got.births, exp.births)
            assert np.array_equal(got.deaths, exp.deaths)
        got = patch_diagram(4.0 * p, "keep")
        assert np.array_equal(got.births, 4.0 * ref.births)
        assert np.array_equal(got.deaths, 4.0 * ref.deaths)


def test_euler_characteristic_per_level():
    rng = np.random.default_rng(5)
    for _ in range(10):
        p = rng.integers(0, 6, (6, 6)).astype(float)
        f = build_filtration(p)
        d = compute_persistence(f, "keep")
        for r in np.unique(f.values):
            live = f.values <= r
            v, e, s = (int(np.sum(live & (f.dims == k))) for k in range(3))
            b0, b1 = betti_at(d, r)
            assert v - e + s == b0 - b1


def test_interval_count_bound():
    rng = np.random.default_rng(6)
    for _ in range(10):
        p = rng.normal(size=(10, 10))
        f = build_filtration(p)
        d = compute_persistence(f, "drop")
        assert len(d) <= len(f.values) // 2


def test_essential_policies_on_random_patch():
    rng = np.random.default_rng(7)
    p = rng.normal(size=(8, 8))
    kept = patch_diagram(p, "keep")
    assert np.sum(np.isinf(kept.deaths)) == 1
    capped = patch_diagram(p, "cap_at_max_value")
    ess = kept.births[np.isinf(kept.deaths)][0]
    assert (ess, p.max()) in capped.intervals(0)
    assert len(patch_diagram(p, "drop")) == len(kept) - 1
    with pytest.raises(ValueError):
        patch_diagram(p, "bogus")


def test_rejects_non_square():
    with pytest.raises(ValueError):
        build_filtration(np.zeros((3, 4)))
