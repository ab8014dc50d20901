import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wfdetect import doe


def _sorted_rows(rows):
    return rows[np.lexsort(rows.T[::-1])]


def test_full_factorial_sizes():
    assert doe.full_factorial(4).r == 16
    empty = doe.full_factorial(0)
    assert empty.rows.shape == (1, 0)
    two = doe.full_factorial(["A", "B"])
    assert two.rows.tolist() == [[0, 0], [1, 0], [0, 1], [1, 1]]
    assert two.rows.sum(axis=0).tolist() == [2, 2]


def test_design_cap():
    with pytest.raises(doe.DesignCapacityError):
        doe.full_factorial(5, cap=16)


@pytest.mark.prop
def test_complement_examples():
    d = doe.full_factorial(3)
    assert np.array_equal(doe.complement(doe.complement(d)).rows, d.rows)
    assert doe.complement(d).rows[0].tolist() == [1, 1, 1]
    assert np.array_equal(_sorted_rows(doe.complement(d).rows), _sorted_rows(d.rows))


def test_schedule_for_the_default_test_case():
    s = doe.make_schedule(doe.full_factorial(4), 5960, 20)
    counts = np.bincount(s.design_row[::20], minlength=16)
    assert counts.tolist() == [19] * 10 + [18] * 6
    assert len(s.boundaries()) == 297


def test_schedule_long_segments_pad_the_remainder():
    s = doe.make_schedule(doe.full_factorial(4), 5960, 186)
    assert s.segment.max() == 31
    assert np.all(s.versions[5952:] == s.versions[5951])
    assert np.bincount(s.design_row[:5952:186]).tolist() == [2] * 16


def test_single_row_design_gives_constant_schedule():
    d = doe.DoeDesign(("A", "B"), np.array([[1, 0]]))
    s = doe.make_schedule(d, 50, 50)
    assert np.all(s.versions == [1, 0])
    assert len(s.boundaries()) == 0


def test_invalid_arguments():
    d = doe.full_factorial(2)
    with pytest.raises(ValueError):
        doe.make_schedule(d, 10, 0)
    with pytest.raises(ValueError):
        doe.make_schedule(d, 10, 2, ordering="shuffled")
    with pytest.raises(ValueError):
        doe.DoeDesign(("A",), np.array([[2]]))


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 5), n=st.integers(1, 700), seg=st.integers(1, 40),
       ordering=st.sampled_from(["sequential", "random"]), seed=st.integers(0, 2**31))
@pytest.mark.prop
def test_schedule_properties(m, n, seg, ordering, seed):
    d = doe.full_factorial(m)
    s = doe.make_schedule(d, n, seg, ordering, seed)
    assert s.versions.shape == (n, m)
    # every step vector is a design row
    assert np.array_equal(s.versions, d.rows[s.design_row])
    # the complement of a full factorial is a permutation of it
    assert np.array_equal(_sorted_rows(doe.complement(d).rows), _sorted_rows(d.rows))
    assert np.array_equal(doe.complement(doe.complement(d)).rows, d.rows)
    if ordering == "sequential":
        first = s.design_row[np.r_[0, s.boundaries() + 1]]
        counts = np.bincount(first, minlength=d.r)
        assert counts.max() - counts.min() <= 1
    again = doe.make_schedule(d, n, seg, ordering, seed)
    assert np.array_equal(again.versions, s.versions)
