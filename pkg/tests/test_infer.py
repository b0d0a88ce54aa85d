import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cepa.infer import DetectionReport, LayerTable, decide, mad_anomaly_indices

finite = st.floats(-1e3, 1e3, allow_nan=False)
vectors = st.lists(finite, min_size=4, max_size=12)


def test_constant_stats_degenerate():
    idx, degenerate = mad_anomaly_indices([1, 1, 1, 1, 1], "low")
    assert idx.tolist() == [0.0] * 5 and degenerate


def test_hand_computed_low_tail():
    # zero MAD falls back to the floor, so any low outlier is extreme
    idx, degenerate = mad_anomaly_indices([10, 10, 10, 10, 1], "low")
    assert degenerate and idx[4] > 2 and np.all(idx[:4] == 0)
    idx, degenerate = mad_anomaly_indices([10, 11, 9, 10, 1], "low")
    # median 10, |dev| = [0,1,1,0,9] -> MAD 1
    assert not degenerate
    assert math.isclose(idx[4], 9 / 1.4826)
    assert math.isclose(idx[2], 1 / 1.4826) and idx[1] == 0


def test_high_tail_is_one_sided():
    idx, _ = mad_anomaly_indices([10, 11, 9, 10, 1], "high")
    assert idx[4] == 0 and math.isclose(idx[1], 1 / 1.4826)


def test_non_finite_left_out_of_null():
    idx, _ = mad_anomaly_indices([10, 11, 9, 10, math.inf], "low")
    assert idx[4] == 0
    assert math.isclose(idx[2], 1 / (1.4826 * 0.5))


def test_direction_validated():
    with pytest.raises(ValueError):
        mad_anomaly_indices([1, 2, 3, 4], "both")


@settings(max_examples=200, deadline=None)
@given(vectors, st.randoms(use_true_random=False))
def test_permutation_equivariance(stats, rnd):
    perm = list(range(len(stats)))
    rnd.shuffle(perm)
    a, _ = mad_anomaly_indices(stats, "low")
    b, _ = mad_anomaly_indices([stats[i] for i in perm], "low")
    assert np.allclose(a[perm], b)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=4, max_size=12), st.floats(0.01, 100))
def test_scale_invariance(stats, c):
    a, da = mad_anomaly_indices(stats, "low")
    b, db = mad_anomaly_indices([c * s for s in stats], "low")
    if not da:
        assert np.allclose(a, b, rtol=1e-6, atol=1e-9)


def _table(layer, cons, mu):
    return LayerTable.build(layer, dict(enumerate(cons)), dict(enumerate(mu)))


NULL_C = [1.0, 1.1, 0.9, 1.05, 0.95]
NULL_M = [5.0, 5.2, 4.8, 5.1, 4.9]


def test_all_below_threshold_is_clean():
    rep = decide({1: _table(1, NULL_C, NULL_M), 4: _table(4, NULL_C, NULL_M)})
    assert rep.verdict == "clean" and rep.detected_targets == []


def test_detected_in_one_layer_only():
    c = NULL_C[:4] + [0.2]
    m = NULL_M[:4] + [9.0]
    rep = decide({1: _table(1, c, m), 4: _table(4, NULL_C, NULL_M)})
    assert rep.verdict == "poisoned"
    assert rep.detected == {4: 1}
    assert rep.selected_layer == 1


def test_conjunction_required():
    c = NULL_C[:4] + [0.2]
    rep = decide({1: _table(1, c, NULL_M)})
    assert rep.verdict == "clean"
    m = NULL_M[:4] + [9.0]
    assert decide({1: _table(1, NULL_C, m)}).verdict == "clean"


def test_two_classes_in_different_layers():
    c1, m1 = [0.2] + NULL_C[1:], [9.0] + NULL_M[1:]
    c2, m2 = NULL_C[:3] + [0.1, NULL_C[4]], NULL_M[:3] + [12.0, NULL_M[4]]
    rep = decide({1: _table(1, c1, m1), 8: _table(8, c2, m2)})
    assert rep.detected == {0: 1, 3: 8}


def test_layer_with_most_extreme_consensus_recorded():
    c = NULL_C[:4] + [0.2]
    m = NULL_M[:4] + [9.0]
    c_more = NULL_C[:4] + [0.01]
    rep = decide({1: _table(1, c, m), 8: _table(8, c_more, m)})
    assert rep.detected == {4: 8}


def test_threshold_monotonicity():
    c = NULL_C[:3] + [0.6, 0.2]
    m = NULL_M[:3] + [5.6, 9.0]
    tables = {1: _table(1, c, m)}
    previous = None
    for thr in (0.5, 1.0, 2.0, 5.0, 50.0):
        found = set(decide(tables, thr).detected)
        if previous is not None:
            assert found <= previous
        previous = found


def test_incomplete_scan_rejected():
    t1 = _table(1, NULL_C, NULL_M)
    t4 = LayerTable.build(4, dict(enumerate(NULL_C[:4])), dict(enumerate(NULL_M[:4])))
    with pytest.raises(ValueError, match="incomplete"):
        decide({1: t1, 4: t4})
    with pytest.raises(ValueError, match="incomplete"):
        decide({1: t1}, expected_targets=range(6))
    with pytest.raises(ValueError):
        decide({})


def test_report_json_round_trip():
    c = NULL_C[:4] + [math.inf]
    rep = decide({1: _table(1, c, NULL_M), 6: _table(6, NULL_C[:4] + [0.2], NULL_M[:4] + [9.0])})
    text = rep.to_json()
    back = DetectionReport.from_json(text)
    assert back.to_json() == text
    d = rep.to_dict()
    assert d["schema"] == "cepa-report/1"
    assert d["layers"]["1"]["4"]["consensus"] == "inf"
    assert set(d) >= {"layers", "verdict", "detected_targets", "threshold"}
    assert d["detected_targets"] == [4] and d["detection_layers"] == {"4": 6}
