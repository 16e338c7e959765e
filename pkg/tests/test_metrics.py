import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linedp.corpus import PreparedFile
from linedp.metrics import (IntegrityError, ReleaseRanking, RankedLine, UndefinedMetricError,
                            auc, balanced_accuracy, ceil_fraction, confusion, effort_at_top20_recall,
                            evaluate_release, mcc, mcc_with_flag, rank_release_lines,
                            recall_at_top20_loc, within_file_rank_percentiles)
from linedp.model import PredictionRecord
from oracles import auc_pairs, ba_loop, effort_scan, inspection_order, mcc_loop, recall_scan


def _ranking(flags):
    return ReleaseRanking([RankedLine("f", i + 1, 0.0, bool(b), i + 1) for i, b in enumerate(flags)])


class TestFileLevel:
    def test_auc_perfect(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0

    def test_auc_all_ties(self):
        assert auc([0.3, 0.3], [1, 0]) == 0.5

    def test_auc_pairs(self):
        assert auc([0.8, 0.6, 0.4, 0.7], [1, 0, 0, 1]) == 1.0

    def test_auc_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [0, 0])

    def test_perfect_ba_mcc(self):
        assert balanced_accuracy([0.9, 0.1], [1, 0]) == 1.0
        assert mcc([0.9, 0.1], [1, 0]) == 1.0

    def test_one_of_each(self):
        s, y = [0.9, 0.2, 0.8, 0.3], [1, 0, 0, 1]
        assert confusion(s, y) == (1, 1, 1, 1)
        assert balanced_accuracy(s, y) == 0.5
        assert mcc(s, y) == 0.0

    def test_all_negative(self):
        assert balanced_accuracy([0.1, 0.2], [1, 0]) == 0.5
        value, flagged = mcc_with_flag([0.1, 0.2], [1, 0])
        assert value == 0.0 and flagged

    def test_threshold_is_inclusive(self):
        assert confusion([0.5], [1]) == (1, 0, 0, 0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 100), st.booleans()), min_size=2, max_size=30))
    def test_auc_invariant_under_monotone_map(self, pairs):
        # grid scores so the transform stays strictly monotone in floating point
        s = np.array([p[0] / 100 for p in pairs])
        y = [p[1] for p in pairs]
        if all(y) or not any(y):
            return
        assert auc(s, y) == pytest.approx(auc(np.exp(3 * s) - 2, y), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.01, 0.99), st.booleans()), min_size=1, max_size=30))
    def test_mcc_symmetric_under_flip(self, pairs):
        s = np.array([p[0] for p in pairs])
        y = np.array([p[1] for p in pairs])
        pred = s >= 0.5
        flipped = np.where(pred, 0.0, 1.0)
        assert mcc(flipped, ~y) == pytest.approx(mcc(pred.astype(float), y), abs=1e-12)


class TestReleaseRanking:
    def _records(self):
        return [PredictionRecord("b", 0.1, [(1, 0.9), (2, 0.1)]),
                PredictionRecord("a", 0.9, [(2, 0.3), (1, 0.2)])]

    def test_file_first_order(self):
        truth = {"a": {1: False, 2: True}, "b": {1: False, 2: False}}
        r = rank_release_lines(self._records(), truth)
        assert [(x.file_id, x.line_number) for x in r.lines] == \
            [("a", 2), ("a", 1), ("b", 1), ("b", 2)]
        assert [x.loc_index for x in r.lines] == [1, 2, 3, 4]
        assert r.total_loc == 4 and r.total_defective == 1

    def test_single_file_keeps_internal_order(self):
        rec = PredictionRecord("a", 0.4, [(5, 0.9), (2, 0.5), (9, 0.5)])
        r = rank_release_lines([rec], {"a": {2: False, 5: False, 9: True}})
        assert [x.line_number for x in r.lines] == [5, 2, 9]

    def test_product_order(self):
        truth = {"a": {1: False, 2: True}, "b": {1: False, 2: False}}
        r = rank_release_lines(self._records(), truth, order="product")
        assert [(x.file_id, x.line_number) for x in r.lines][0] == ("a", 2)

    def test_unknown_line(self):
        with pytest.raises(IntegrityError, match="line 3"):
            rank_release_lines([PredictionRecord("a", 0.5, [(3, 0.1)])], {"a": {1: True}})

    def test_unknown_file(self):
        with pytest.raises(IntegrityError):
            rank_release_lines([PredictionRecord("z", 0.5, [(1, 0.1)])], {"a": {1: True}})


class TestEffortAware:
    def test_ceil(self):
        assert ceil_fraction(10, 0.2) == 2
        assert ceil_fraction(11, 0.2) == 3
        assert ceil_fraction(1, 0.2) == 1

    def test_one_of_two_in_top_two(self):
        flags = [0, 1, 0, 0, 0, 0, 0, 0, 1, 0]
        assert recall_at_top20_loc(_ranking(flags)) == 0.5

    def test_positions_two_and_nine(self):
        flags = [0] * 10
        flags[1] = flags[8] = 1
        assert recall_at_top20_loc(_ranking(flags)) == 0.5

    def test_defectives_first(self):
        flags = [1] * 5 + [0] * 45
        assert recall_at_top20_loc(_ranking(flags)) == 1.0
        assert effort_at_top20_recall(_ranking(flags)) == 1 / 50

    def test_second_defective_at_thirty(self):
        flags = [0] * 100
        for pos in (5, 30, 40, 50, 60, 70, 80, 90, 95, 100):
            flags[pos - 1] = 1
        assert effort_at_top20_recall(_ranking(flags)) == pytest.approx(0.30, abs=0)

    def test_no_defectives(self):
        with pytest.raises(UndefinedMetricError):
            recall_at_top20_loc(_ranking([0, 0]))
        with pytest.raises(UndefinedMetricError):
            effort_at_top20_recall(_ranking([0, 0]))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=50))
    def test_positional_scan_oracle(self, flags):
        if not any(flags):
            return
        r = _ranking(flags)
        assert recall_at_top20_loc(r) == recall_scan(flags)
        assert effort_at_top20_recall(r) == effort_scan(flags)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.booleans(), min_size=2, max_size=40), st.data())
    def test_recall_monotone_when_defective_moves_up(self, flags, data):
        idx = [i for i, f in enumerate(flags) if f]
        if not idx or idx[-1] == 0:
            return
        i = data.draw(st.sampled_from([j for j in idx if j > 0]))
        moved = list(flags)
        moved[i - 1], moved[i] = moved[i], moved[i - 1]
        assert recall_at_top20_loc(_ranking(moved)) >= recall_at_top20_loc(_ranking(flags))


class TestReport:
    def _setup(self):
        files = [PreparedFile("a", [(1, ["x"]), (2, ["y"])], True, [False, True]),
                 PreparedFile("b", [(1, ["x"]), (3, ["y"])], False, [False, False])]
        recs = [PredictionRecord("a", 0.8, [(2, 0.5), (1, 0.1)]),
                PredictionRecord("b", 0.3, [(3, 0.4), (1, 0.2)])]
        return recs, files

    def test_all_five_present(self):
        rep = evaluate_release(*self._setup())
        assert rep.auc == 1.0 and rep.ba == 1.0 and rep.mcc == 1.0
        assert rep.recall_top20_loc == 1.0 and rep.effort_top20_recall == 0.25
        assert rep.counts["loc"] == 4 and rep.flags == []

    def test_undefined_metrics_flagged(self):
        recs, files = self._setup()
        rep = evaluate_release(recs[1:], files[1:])
        assert rep.auc is None and rep.recall_top20_loc is None
        assert any(f.startswith("auc") for f in rep.flags)

    def test_within_file_percentiles(self):
        recs, files = self._setup()
        assert within_file_rank_percentiles(recs, files) == [0.5]


def test_random_instances_match_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_files = int(rng.integers(2, 21))
        files, recs, layout = [], [], []
        for i in range(n_files):
            n = int(rng.integers(1, 6))
            nums = sorted(rng.choice(np.arange(1, 40), n, replace=False).tolist())
            bad = (rng.random(n) < 0.3).tolist()
            label = any(bad) or bool(rng.random() < 0.1)
            scores = np.round(rng.random(n), 1).tolist()
            prob = float(np.round(rng.random(), 1))
            fid = f"f{i:02d}"
            files.append(PreparedFile(fid, [(m, ["t"]) for m in nums], label, bad))
            order = sorted(zip(nums, scores), key=lambda t: (-t[1], t[0]))
            recs.append(PredictionRecord(fid, prob, order))
            layout.append((fid, prob, list(zip(nums, scores, bad))))
        labels = [f.file_label for f in files]
        probs = [r.prob for r in recs]
        rep = evaluate_release(recs, files)
        if all(labels) or not any(labels):
            assert rep.auc is None
        else:
            assert rep.auc == auc_pairs(probs, labels)
            assert rep.ba == ba_loop(probs, labels)
        assert rep.mcc == mcc_loop(probs, labels)
        flags = inspection_order(layout)
        if any(flags):
            assert rep.recall_top20_loc == recall_scan(flags)
            assert rep.effort_top20_recall == effort_scan(flags)
