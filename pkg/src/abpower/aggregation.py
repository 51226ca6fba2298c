"""Roll observation-level events up to one row per unit of assignment.

Every estimator works on cluster aggregates: ``y`` is the summed numerator,
``w`` the summed denominator (or the event count), and ``x`` the covariate
vector of the unit. Two representations are provided. ``EventRecord`` and
``ClusterRow`` are plain records for callers and the CLI; ``EventTable`` and
``ClusterTable`` hold the same data column-wise so the simulation harness can
push thousands of datasets through the same code without building objects.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import EmptyInputError, DataError, InconsistentAssignmentError, SchemaError

WMode = Literal["sum", "count"]
CovMode = Literal["sum", "mean", "first"]

__all__ = [
    "EventRecord",
    "ClusterRow",
    "EventTable",
    "ClusterTable",
    "aggregate",
    "aggregate_table",
    "as_cluster_table",
]


@dataclass(frozen=True, slots=True)
class EventRecord:
    unit_id: str
    y: float
    w: float | None = None
    covariates: tuple[float, ...] = ()
    arm: str | None = None


@dataclass(frozen=True, slots=True)
class ClusterRow:
    unit_id: str
    y: float
    w: float
    x: tuple[float, ...] = ()
    n_events: int = 1
    arm: str | None = None

    @property
    def ratio(self) -> float:
        """Cluster-level average y / w."""
        return self.y / self.w


@dataclass
class EventTable:
    """Column-wise events. ``w`` is None in count mode, ``arms`` None when unlabelled."""

    unit_ids: np.ndarray
    y: np.ndarray
    w: np.ndarray | None = None
    x: np.ndarray | None = None
    arms: np.ndarray | None = None

    def __post_init__(self):
        self.unit_ids = np.asarray(self.unit_ids)
        self.y = np.asarray(self.y, dtype=float)
        n = self.y.shape[0]
        if self.w is not None:
            self.w = np.asarray(self.w, dtype=float)
        if self.x is None:
            self.x = np.empty((n, 0))
        else:
            self.x = np.asarray(self.x, dtype=float).reshape(n, -1)
        if self.arms is not None:
            self.arms = np.asarray(self.arms, dtype=object)

    def __len__(self) -> int:
        return self.y.shape[0]

    @classmethod
    def from_records(cls, events: Sequence[EventRecord]) -> "EventTable":
        if not events:
            raise EmptyInputError("no events to aggregate")
        arity = {len(e.covariates) for e in events}
        if len(arity) > 1:
            raise SchemaError(f"mixed covariate arity across events: {sorted(arity)}")
        p = arity.pop()
        ws = [e.w for e in events]
        missing_w = sum(w is None for w in ws)
        if 0 < missing_w < len(ws):
            raise SchemaError("some events carry a denominator value and some do not")
        arms = [e.arm for e in events]
        return cls(
            unit_ids=np.array([str(e.unit_id) for e in events], dtype=object),
            y=np.array([e.y for e in events], dtype=float),
            w=None if missing_w else np.array(ws, dtype=float),
            x=np.array([e.covariates for e in events], dtype=float).reshape(len(events), p),
            arms=None if all(a is None for a in arms) else np.array(arms, dtype=object),
        )

    def records(self) -> list[EventRecord]:
        w = self.w
        arms = self.arms
        return [
            EventRecord(
                unit_id=str(self.unit_ids[i]),
                y=float(self.y[i]),
                w=None if w is None else float(w[i]),
                covariates=tuple(float(v) for v in self.x[i]),
                arm=None if arms is None else arms[i],
            )
            for i in range(len(self))
        ]


@dataclass
class ClusterTable:
    """Column-wise cluster aggregates, sorted by unit id."""

    y: np.ndarray
    w: np.ndarray
    x: np.ndarray
    unit_ids: np.ndarray | None = None
    n_events: np.ndarray | None = None
    arms: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        n = self.y.shape[0]
        self.w = np.asarray(self.w, dtype=float)
        self.x = np.asarray(self.x, dtype=float).reshape(n, -1)
        if self.n_events is None:
            self.n_events = np.ones(n, dtype=np.int64)
        if self.unit_ids is None:
            self.unit_ids = np.arange(n)
        if self.arms is not None:
            self.arms = np.asarray(self.arms, dtype=object)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_rows(cls, rows: Sequence[ClusterRow]) -> "ClusterTable":
        rows = list(rows)
        if not rows:
            return cls(y=np.empty(0), w=np.empty(0), x=np.empty((0, 0)))
        arity = {len(r.x) for r in rows}
        if len(arity) > 1:
            raise SchemaError(f"mixed covariate arity across rows: {sorted(arity)}")
        arms = [r.arm for r in rows]
        return cls(
            y=[r.y for r in rows],
            w=[r.w for r in rows],
            x=np.array([r.x for r in rows], dtype=float).reshape(len(rows), arity.pop()),
            unit_ids=np.array([r.unit_id for r in rows], dtype=object),
            n_events=np.array([r.n_events for r in rows], dtype=np.int64),
            arms=None if all(a is None for a in arms) else arms,
        )

    def rows(self) -> list[ClusterRow]:
        arms = self.arms
        return [
            ClusterRow(
                unit_id=str(self.unit_ids[i]),
                y=float(self.y[i]),
                w=float(self.w[i]),
                x=tuple(float(v) for v in self.x[i]),
                n_events=int(self.n_events[i]),
                arm=None if arms is None else arms[i],
            )
            for i in range(len(self))
        ]

    def subset(self, mask: np.ndarray) -> "ClusterTable":
        return ClusterTable(
            y=self.y[mask],
            w=self.w[mask],
            x=self.x[mask],
            unit_ids=self.unit_ids[mask],
            n_events=self.n_events[mask],
            arms=None if self.arms is None else self.arms[mask],
        )

    def arm_levels(self) -> list:
        if self.arms is None:
            return []
        return sorted({a for a in self.arms if a is not None}, key=str)


def as_cluster_table(rows: ClusterTable | Iterable[ClusterRow]) -> ClusterTable:
    if isinstance(rows, ClusterTable):
        return rows
    return ClusterTable.from_rows(list(rows))


def aggregate_table(events: EventTable, w_mode: WMode = "sum", cov_mode: CovMode = "sum") -> ClusterTable:
    """Aggregate column-wise events to one row per unit, sorted by unit id."""
    if w_mode not in ("sum", "count"):
        raise SchemaError(f"unknown w_mode {w_mode!r}")
    if cov_mode not in ("sum", "mean", "first"):
        raise SchemaError(f"unknown cov_mode {cov_mode!r}")
    n = len(events)
    if n == 0:
        raise EmptyInputError("no events to aggregate")
    if w_mode == "sum" and events.w is None:
        raise SchemaError("w_mode 'sum' needs a denominator value on every event")
    _check_finite(events)

    units, first, inv = np.unique(events.unit_ids, return_index=True, return_inverse=True)
    inv = inv.ravel()
    k = units.shape[0]
    counts = np.bincount(inv, minlength=k)
    y = np.bincount(inv, weights=events.y, minlength=k)
    w = counts.astype(float) if w_mode == "count" else np.bincount(inv, weights=events.w, minlength=k)

    p = events.x.shape[1]
    if cov_mode == "first":
        x = events.x[first].copy()
    else:
        x = np.empty((k, p))
        for j in range(p):
            x[:, j] = np.bincount(inv, weights=events.x[:, j], minlength=k)
        if cov_mode == "mean":
            x /= counts[:, None]

    arms = None
    if events.arms is not None:
        index: dict = {}
        codes = np.fromiter((index.setdefault(a, len(index)) for a in events.arms), dtype=np.int64, count=n)
        lo = np.full(k, n, dtype=np.int64)
        hi = np.full(k, -1, dtype=np.int64)
        np.minimum.at(lo, inv, codes)
        np.maximum.at(hi, inv, codes)
        bad = np.flatnonzero(lo != hi)
        if bad.size:
            labels = list(index)
            u = bad[0]
            raise InconsistentAssignmentError(
                f"unit {units[u]!r} has events labelled {labels[lo[u]]!r} and {labels[hi[u]]!r}"
            )
        arms = events.arms[first]

    return ClusterTable(y=y, w=w, x=x, unit_ids=units, n_events=counts, arms=arms)


def aggregate(events: Sequence[EventRecord], w_mode: WMode = "sum", cov_mode: CovMode = "sum") -> list[ClusterRow]:
    """Aggregate event records to one ``ClusterRow`` per unit, sorted by unit id.

    ``w_mode="count"`` sets each unit's denominator to its number of events.
    ``cov_mode`` chooses how covariates combine within a unit; ``"first"``
    takes the first event in input order and is therefore order-dependent.
    """
    return aggregate_table(EventTable.from_records(events), w_mode, cov_mode).rows()


def _check_finite(events: EventTable) -> None:
    for name, arr in (("y", events.y), ("w", events.w), ("covariate", events.x)):
        if arr is None or arr.size == 0:
            continue
        ok = np.isfinite(arr)
        if not ok.all():
            idx = np.argwhere(~ok)[0]
            raise DataError(f"non-finite {name} value in event {int(idx[0])}")
