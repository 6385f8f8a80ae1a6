from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weakseg import bounds as bd
from weakseg.losses import Bounds


def sample(size, group=0):
    return SimpleNamespace(true_size=size, present=size > 0, group=group)


def test_tag_bounds():
    assert bd.tag_bounds(True, 65536) == Bounds(1, 65536)
    assert bd.tag_bounds(False, 65536) == Bounds(0, 0)
    assert bd.tag_bounds(True, 1) == Bounds(1, 1)
    with pytest.raises(ValueError):
        bd.tag_bounds(True, 0)


def test_common_bounds():
    assert bd.common_bounds([100], True) == Bounds(90, 110.00000000000001)
    assert bd.common_bounds([100], False) == Bounds(0, 0)
    # reference slice sizes whose scaled extremes give the (60, 2000) instance
    got = bd.common_bounds([200 / 3, 900, 2000 / 1.1, 0], True)
    assert got.lower == pytest.approx(60, rel=1e-15) and got.upper == pytest.approx(2000, rel=1e-15)
    with pytest.raises(ValueError):
        bd.common_bounds([], True)
    with pytest.raises(ValueError):
        bd.common_bounds([0, 0], True)


def test_individual_bounds():
    assert bd.individual_bounds(100) == Bounds(90, 110.00000000000001)
    assert bd.individual_bounds(0) == Bounds(0, 0)
    assert bd.individual_bounds(42, (1.0, 1.0)) == Bounds(42, 42)


def test_volume_bounds():
    b = bd.volume_bounds([100, 200, 0])
    assert b.lower == pytest.approx(270) and b.upper == pytest.approx(330)
    assert bd.volume_bounds([0, 0]) == Bounds(0, 0)
    assert bd.volume_bounds([57]) == bd.individual_bounds(57)
    with pytest.raises(ValueError):
        bd.volume_bounds([])


def test_scheme_validation():
    with pytest.raises(ValueError, match="kind"):
        bd.BoundScheme(kind="box")
    with pytest.raises(ValueError):
        bd.BoundScheme(lower_factor=1.2)
    with pytest.raises(ValueError, match="together"):
        bd.BoundScheme(kind="common", lower=1.0)


def test_bounds_for_each_scheme():
    ss = [sample(0), sample(50), sample(200, 1)]
    tag = bd.bounds_for(bd.BoundScheme("tag"), ss, 4096)
    assert tag == [Bounds(0, 0), Bounds(1, 4096), Bounds(1, 4096)]
    common = bd.bounds_for(bd.BoundScheme("common"), ss, 4096)
    assert common[0] == Bounds(0, 0) and common[1] == common[2] == Bounds(45, 55.00000000000001)
    explicit = bd.bounds_for(bd.BoundScheme("common", lower=0.0, upper=500.0), ss, 4096)
    assert explicit == [Bounds(0, 0), Bounds(0, 500), Bounds(0, 500)]
    ind = bd.bounds_for(bd.BoundScheme("individual"), ss, 4096)
    assert ind[2] == bd.individual_bounds(200)
    with pytest.raises(ValueError):
        bd.bounds_for(bd.BoundScheme("volume3d"), ss, 4096)
    groups = bd.group_bounds(bd.BoundScheme("volume3d"), ss)
    assert groups[0] == bd.volume_bounds([0, 50]) and groups[1] == bd.volume_bounds([200])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 5000), min_size=1, max_size=12), st.data())
def test_nesting_and_ordering(ref, data):
    tau = data.draw(st.sampled_from(ref))
    ind = bd.individual_bounds(tau)
    com = bd.common_bounds(ref, True)
    tag = bd.tag_bounds(True, 10000)
    for b in (ind, com, tag):
        assert 0 <= b.lower <= b.upper
    assert ind.contains(tau)
    assert com.lower <= ind.lower and ind.upper <= com.upper
    assert tag.lower <= com.lower or com.lower < 1
    assert com.upper <= tag.upper or max(ref) * 1.1 > 10000
