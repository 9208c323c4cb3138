"""Randomized property tests for the pure numerical kernels."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kvacontrol import metrics as mt
from kvacontrol import routing as rt
from kvacontrol import scheduler as sch


masks = hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=2,
                                          min_side=1, max_side=24))


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_metric_bounds(a, b):
    if a.shape != b.shape:
        b = np.zeros_like(a)
    assert 0.0 <= mt.temporal_iou(a, b) <= 1.0
    assert 0.0 <= mt.dice(a, b) <= 1.0
    assert mt.area_flicker(a, b) >= 0.0
    value, valid = mt.chamfer(a, b)
    if valid:
        assert value >= 0.0
        flipped, _ = mt.chamfer(b, a)
        assert abs(value - flipped) < 1e-9


@settings(max_examples=60, deadline=None)
@given(masks)
def test_edt_is_metric_to_mask(mask):
    d = mt.distance_transform(mask)
    if not mask.any():
        assert np.isinf(d).all()
        return
    assert (d[mask] == 0).all()
    assert (d[~mask] > 0).all()
    # 1-Lipschitz along rows and columns
    for axis in (0, 1):
        if d.shape[axis] > 1:
            assert np.max(np.abs(np.diff(d, axis=axis))) <= np.sqrt(2)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 30), st.just(5)),
                  elements=st.floats(-20, 20)))
def test_softmax_topk_invariants(logits):
    P = rt.softmax(logits, axis=-1)
    np.testing.assert_allclose(P.sum(axis=-1), 1.0, atol=1e-9)
    for k in (1, 2, 5):
        A = rt.topk_select(P, k)
        assert (A.sum(axis=-1) == k).all()
        # every selected probability >= every unselected one
        sel_min = np.where(A == 1, P, np.inf).min(axis=-1)
        unsel_max = np.where(A == 0, P, -np.inf).max(axis=-1)
        assert (sel_min >= unsel_max - 1e-15).all()


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 64),
                  elements=st.floats(0, 1)))
def test_partition_counts_and_exhaustive(s):
    plan = sch.partition(s)
    n = s.size
    counts = np.bincount(plan.mode, minlength=3)
    assert counts.sum() == n
    assert counts[0] == int(np.floor(0.2 * n + 0.5))
    assert counts[1] == int(np.floor(0.3 * n + 0.5))
    # every full token scores at least as high as every non-full token
    if counts[0] and counts[0] < n:
        assert s[plan.mode == 0].min() >= s[plan.mode != 0].max() - 1e-15
