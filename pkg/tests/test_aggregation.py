import numpy as np
import pytest

from abpower.aggregation import ClusterRow, ClusterTable, EventRecord, EventTable, aggregate, aggregate_table
from abpower.errors import DataError, EmptyInputError, InconsistentAssignmentError, SchemaError
from abpower.estimators import estimate_arm_ratio


def test_count_mode():
    rows = aggregate([EventRecord("u", 2.0), EventRecord("u", 3.0)], w_mode="count")
    assert rows == [ClusterRow("u", y=5.0, w=2.0, n_events=2)]


def test_sum_mode():
    rows = aggregate([EventRecord("u", 2.0, 1.5), EventRecord("u", 3.0, 0.5)], w_mode="sum")
    assert (rows[0].y, rows[0].w, rows[0].n_events) == (5.0, 2.0, 2)


def test_singletons_are_identity():
    events = [EventRecord("a", 4.0, 2.0), EventRecord("b", 9.0, 3.0)]
    rows = aggregate(events)
    assert [r.n_events for r in rows] == [1, 1]
    assert estimate_arm_ratio(rows).estimate == pytest.approx(np.mean([4, 9]) / np.mean([2, 3]))
    again = aggregate([EventRecord(r.unit_id, r.y, r.w, r.x) for r in rows])
    assert again == rows


def test_sorted_output_and_covariate_modes():
    events = [
        EventRecord("b", 1.0, 1.0, (2.0, 10.0)),
        EventRecord("a", 1.0, 1.0, (1.0, 0.0)),
        EventRecord("b", 1.0, 1.0, (4.0, 20.0)),
    ]
    assert [r.unit_id for r in aggregate(events)] == ["a", "b"]
    assert aggregate(events, cov_mode="sum")[1].x == (6.0, 30.0)
    assert aggregate(events, cov_mode="mean")[1].x == (3.0, 15.0)
    assert aggregate(events, cov_mode="first")[1].x == (2.0, 10.0)


def test_arm_labels():
    events = [EventRecord("a", 1.0, arm="C"), EventRecord("a", 2.0, arm="C"), EventRecord("b", 1.0, arm="T")]
    assert [r.arm for r in aggregate(events, "count")] == ["C", "T"]


@pytest.mark.parametrize("second", ["T", None])
def test_conflicting_arms(second):
    events = [EventRecord("a", 1.0, arm="C"), EventRecord("a", 2.0, arm=second)]
    with pytest.raises(InconsistentAssignmentError):
        aggregate(events, "count")


def test_mixed_arity():
    with pytest.raises(SchemaError):
        aggregate([EventRecord("a", 1.0, covariates=(1.0,)), EventRecord("b", 1.0)], "count")


def test_sum_mode_without_w():
    with pytest.raises(SchemaError):
        aggregate([EventRecord("a", 1.0)], "sum")


def test_empty():
    with pytest.raises(EmptyInputError):
        aggregate([])


def test_non_finite():
    with pytest.raises(DataError):
        aggregate([EventRecord("a", float("nan"))], "count")


def test_totals_and_permutation(rng):
    n = 5000
    units = rng.integers(0, 400, size=n)
    table = EventTable(unit_ids=units, y=rng.lognormal(size=n) * 1e3, w=rng.random(n), x=rng.normal(size=(n, 2)))
    agg = aggregate_table(table)
    assert agg.y.sum() == pytest.approx(table.y.sum(), rel=1e-12)
    assert agg.n_events.sum() == n

    perm = rng.permutation(n)
    shuffled = EventTable(unit_ids=units[perm], y=table.y[perm], w=table.w[perm], x=table.x[perm])
    agg2 = aggregate_table(shuffled)
    np.testing.assert_array_equal(agg.unit_ids, agg2.unit_ids)
    np.testing.assert_allclose(agg2.y, agg.y, rtol=1e-12)
    np.testing.assert_allclose(agg2.w, agg.w, rtol=1e-12)
    np.testing.assert_allclose(agg2.x, agg.x, rtol=1e-12, atol=1e-12)


def test_table_round_trip():
    rows = [ClusterRow("a", 1.0, 2.0, (0.5,), 3, "C"), ClusterRow("b", 4.0, 1.0, (1.5,), 1, "T")]
    assert ClusterTable.from_rows(rows).rows() == rows
