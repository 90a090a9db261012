import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bipprune.masking import (GroupMap, SparsityTarget, build_group_map, export_mask_csv,
                              group_selection, init_scores, make_target, mask_iou, project_topk,
                              read_mask_csv, select_groups)
from bipprune.models import build_network


def element_map(n):
    return GroupMap(np.arange(n), np.zeros(n, dtype=np.int64))


# scores on a 1/64 grid: frequent ties, and exp() keeps distinct values distinct
scores_and_k = st.integers(1, 60).flatmap(lambda g: st.tuples(
    arrays(np.int64, g, elements=st.integers(0, 64)).map(lambda a: a / 64.0),
    st.integers(1, g)))


class TestProjectionProperties:
    @settings(max_examples=1000, deadline=None)
    @given(scores_and_k)
    def test_invariants(self, case):
        scores, k = case
        g = len(scores)
        sel = select_groups(scores, k)
        # exact cardinality
        assert sel.sum() == k
        # every kept score dominates every dropped one
        if k < g:
            assert scores[sel].min() >= scores[~sel].max()
        # idempotence: projecting the projection returns it
        np.testing.assert_array_equal(select_groups(sel.astype(float), k), sel)
        # strictly monotone transforms do not change the selection
        np.testing.assert_array_equal(select_groups(np.exp(3 * scores) + 2, k), sel)
        # ties resolved toward lower indices
        for v in np.unique(scores[~sel]) if k < g else []:
            kept = np.flatnonzero(sel & (scores == v))
            dropped = np.flatnonzero(~sel & (scores == v))
            if len(kept):
                assert kept.max() < dropped.min()

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 40).flatmap(lambda g: st.tuples(
        arrays(np.float64, g, elements=st.floats(0, 1, allow_nan=False)), st.integers(1, g))))
    def test_continuous_scores(self, case):
        scores, k = case
        sel = select_groups(scores, k)
        assert sel.sum() == k
        if k < len(scores):
            assert scores[sel].min() >= scores[~sel].max()
        np.testing.assert_array_equal(select_groups(scores * 8.0, k), sel)

    def test_all_ties_keep_prefix(self):
        np.testing.assert_array_equal(select_groups(np.zeros(5), 2), [1, 1, 0, 0, 0])

    def test_per_layer_budget(self):
        gm = GroupMap(np.arange(6), np.array([0, 0, 0, 0, 1, 1]))
        mask = project_topk(np.array([1, 2, 3, 4, 0, 9.0]), make_target(0.5, gm), gm,
                            per_layer=True)
        np.testing.assert_array_equal(mask, [0, 0, 1, 1, 0, 1])

    def test_length_checked(self):
        gm = element_map(4)
        with pytest.raises(ValueError):
            project_topk(np.zeros(3), make_target(0.5, gm), gm)


class TestSparsityTarget:
    def test_rounding(self):
        assert SparsityTarget(0.9, 42, 42).k == 4     # 4.2
        assert SparsityTarget(0.5, 5, 5).k == 3       # 2.5 rounds up
        assert SparsityTarget(0.99, 10, 10).k == 1    # floor of 1

    def test_range(self):
        with pytest.raises(ValueError):
            SparsityTarget(1.0, 10, 10)


class TestGroups:
    @pytest.mark.parametrize("gran", ["element", "filter", "channel"])
    def test_partition(self, gran):
        net = build_network("cnn-tiny")
        gm = build_group_map(net, gran)
        counts = np.bincount(gm.group_of, minlength=gm.num_groups)
        assert counts.sum() == net.n and counts.min() >= 1
        # ids ordered by smallest member
        firsts = [m.min() for m in gm.groups()]
        assert firsts == sorted(firsts)

    def test_filter_groups_are_output_channels(self):
        net = build_network("cnn-tiny")
        gm = build_group_map(net, "filter")
        w = net.slot(2, "weight")
        first = gm.group_of[w.offset]
        np.testing.assert_array_equal(gm.members(first), np.arange(w.offset, w.offset + 72))

    def test_channel_groups_interleave(self):
        net = build_network("cnn-tiny")
        gm = build_group_map(net, "channel")
        w = net.slot(2, "weight")
        members = gm.members(gm.group_of[w.offset])
        # input channel 0 of every one of the 8 filters, 9 taps each
        assert len(members) == 72 and np.all(np.diff(members[::9]) == 72)

    def test_structured_mask_keeps_whole_groups(self):
        net = build_network("cnn-tiny")
        gm = build_group_map(net, "filter")
        target = make_target(0.7, gm)
        mask = project_topk(np.random.default_rng(0).uniform(size=gm.num_groups), target, gm)
        sel = group_selection(mask, gm)
        assert sel.sum() == target.k_groups
        np.testing.assert_array_equal(mask, sel[gm.group_of])

    def test_reduce(self):
        gm = GroupMap(np.array([0, 0, 1]), np.array([0, 0]))
        np.testing.assert_allclose(gm.reduce(np.array([1.0, 3.0, 5.0])), [4, 5])
        np.testing.assert_allclose(gm.reduce(np.array([1.0, 3.0, 5.0]), "mean"), [2, 5])


class TestScoresAndIou:
    def test_init_scores_normalized(self):
        s = init_scores(np.array([2.0, -4.0, 1.0]), element_map(3))
        np.testing.assert_allclose(s, [0.5, 1.0, 0.25])

    def test_init_scores_zero(self):
        assert not init_scores(np.zeros(4), element_map(4)).any()

    def test_iou(self):
        assert mask_iou([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(1 / 3)
        assert mask_iou([0, 0], [0, 0]) == 1.0
        with pytest.raises(ValueError):
            mask_iou([1], [1, 0])

    def test_mask_csv_roundtrip(self, tmp_path):
        gm = element_map(4)
        scores = np.array([0.1, 0.7, 0.3, 0.9])
        mask = project_topk(scores, make_target(0.5, gm), gm)
        export_mask_csv(tmp_path / "m.csv", scores, mask, gm)
        s, sel = read_mask_csv(tmp_path / "m.csv")
        np.testing.assert_array_equal(s, scores)
        np.testing.assert_array_equal(sel, [0, 1, 0, 1])
