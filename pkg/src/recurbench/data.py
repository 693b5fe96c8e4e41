"""Recurrent-event data model and counting-process layouts.

A :class:`RecurrentDataset` holds one :class:`Subject` per individual, each
with ordered calendar-time event times, a censoring time and a fixed
covariate vector. :func:`expand_layout` turns a dataset into the row format
consumed by the Cox engine for one of the four classical recurrent-event
models.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np


class ModelKind(str, enum.Enum):
    AG = "AG"
    PWP = "PWP"
    WLW = "WLW"
    FRAILTY = "Frailty"

    @classmethod
    def parse(cls, value: "str | ModelKind") -> "ModelKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if kind.value.lower() == str(value).lower():
                return kind
        raise ValueError(f"unknown model kind {value!r}")


def round_half_up(x: float) -> int:
    """Round to the nearest integer, halves away from zero (x >= 0)."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class Subject:
    id: int
    event_times: tuple[float, ...]
    censoring_time: float
    covariates: np.ndarray

    def __post_init__(self):
        times = tuple(float(t) for t in self.event_times)
        object.__setattr__(self, "event_times", times)
        object.__setattr__(self, "censoring_time", float(self.censoring_time))
        cov = np.asarray(self.covariates, dtype=float).ravel()
        cov.setflags(write=False)
        object.__setattr__(self, "covariates", cov)
        if not self.censoring_time > 0:
            raise ValueError(f"subject {self.id}: zero follow-up time")
        if any(t <= 0 for t in times):
            raise ValueError(f"subject {self.id}: event times must be > 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"subject {self.id}: event times must be strictly increasing")
        if times and times[-1] > self.censoring_time:
            raise ValueError(f"subject {self.id}: event after censoring time")

    @property
    def n_events(self) -> int:
        return len(self.event_times)

    def __eq__(self, other):
        if not isinstance(other, Subject):
            return NotImplemented
        return (
            self.id == other.id
            and self.event_times == other.event_times
            and self.censoring_time == other.censoring_time
            and np.array_equal(self.covariates, other.covariates)
        )

    __hash__ = None


def event_count(subject: Subject, t: float) -> int:
    """Number of events in the closed interval [0, t]."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return int(np.searchsorted(subject.event_times, t, side="right"))


@dataclass(frozen=True, eq=False)
class RecurrentDataset:
    subjects: tuple[Subject, ...]
    p: int
    active_mask: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if len(self.subjects) < 2:
            raise ValueError("a dataset needs at least 2 subjects")
        for s in self.subjects:
            if s.covariates.shape[0] != self.p:
                raise ValueError(f"subject {s.id}: expected {self.p} covariates")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        if self.active_mask is not None:
            mask = np.asarray(self.active_mask, dtype=bool).ravel()
            if mask.shape[0] != self.p:
                raise ValueError("active_mask length must equal p")
            mask.setflags(write=False)
            object.__setattr__(self, "active_mask", mask)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @cached_property
    def X(self) -> np.ndarray:
        X = np.vstack([s.covariates for s in self.subjects])
        X.setflags(write=False)
        return X

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([s.id for s in self.subjects])

    @cached_property
    def followup(self) -> np.ndarray:
        return np.array([s.censoring_time for s in self.subjects])

    @cached_property
    def n_events(self) -> np.ndarray:
        return np.array([s.n_events for s in self.subjects])

    def subset(self, index: Sequence[int]) -> "RecurrentDataset":
        return RecurrentDataset(
            tuple(self.subjects[i] for i in index), self.p, self.active_mask, dict(self.meta)
        )


def train_test_split(
    data: RecurrentDataset, fraction: float, seed: int
) -> tuple[RecurrentDataset, RecurrentDataset]:
    """Split by subject; both sides keep the original subject order."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n_train = round_half_up(fraction * data.n)
    if n_train < 2 or data.n - n_train < 2:
        raise ValueError(
            f"split of {data.n} subjects at {fraction} leaves a side with < 2 subjects"
        )
    perm = np.random.default_rng(seed).permutation(data.n)
    train = np.sort(perm[:n_train])
    test = np.sort(perm[n_train:])
    return data.subset(train), data.subset(test)


TIMESCALES = ("calendar", "gap", "counting-process")
RISK_SETS = ("unrestricted", "restricted", "semi-restricted")


@dataclass(frozen=True, eq=False)
class ModelLayout:
    """Expanded rows of one model; covariates are looked up per subject.

    ``subject`` indexes into ``covariates`` (dataset order) and ``subject_ids``.
    """

    subject: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    status: np.ndarray
    stratum: np.ndarray
    covariates: np.ndarray
    subject_ids: np.ndarray
    timescale: str
    risk_set: str
    model: ModelKind

    def __post_init__(self):
        for name in ("subject", "start", "stop", "status", "stratum"):
            getattr(self, name).setflags(write=False)
        if np.any(self.start >= self.stop):
            raise ValueError("every row needs start < stop")

    @property
    def n_rows(self) -> int:
        return self.subject.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_subjects(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_strata(self) -> int:
        return int(self.stratum.max())

    def rows(self) -> list[tuple[int, float, float, int, int]]:
        """Rows as plain tuples (subject_id, start, stop, status, stratum)."""
        return [
            (int(self.subject_ids[s]), float(a), float(b), int(d), int(k))
            for s, a, b, d, k in zip(self.subject, self.start, self.stop, self.status, self.stratum)
        ]


def _counting_rows(s: Subject):
    """(start, stop, status) tiling [0, T]; a censoring tie with the last event is dropped."""
    out = []
    prev = 0.0
    for t in s.event_times:
        out.append((prev, t, 1))
        prev = t
    if s.censoring_time > prev:
        out.append((prev, s.censoring_time, 0))
    return out


def expand_layout(
    data: RecurrentDataset, model: "str | ModelKind", k_max: int | None = None
) -> ModelLayout:
    """Expand a dataset into the counting-process rows of ``model``.

    AG and Frailty use one stratum and the unrestricted risk set; PWP puts the
    k-th interval of each subject in stratum k; WLW builds one calendar-time
    row per subject in every stratum 1..k_max (semi-restricted set).
    ``k_max`` only affects WLW and defaults to the largest event count in
    ``data``; subjects with more events are truncated to the first k_max.
    """
    model = ModelKind.parse(model)
    subj, start, stop, status, stratum = [], [], [], [], []

    if model in (ModelKind.AG, ModelKind.FRAILTY, ModelKind.PWP):
        for i, s in enumerate(data.subjects):
            for k, (a, b, d) in enumerate(_counting_rows(s), start=1):
                subj.append(i)
                start.append(a)
                stop.append(b)
                status.append(d)
                stratum.append(k if model is ModelKind.PWP else 1)
        timescale = "counting-process"
        risk_set = "restricted" if model is ModelKind.PWP else "unrestricted"
    else:
        if k_max is None:
            k_max = int(data.n_events.max())
        k_max = max(int(k_max), 1)
        for i, s in enumerate(data.subjects):
            for k in range(1, k_max + 1):
                subj.append(i)
                start.append(0.0)
                if k <= s.n_events:
                    stop.append(s.event_times[k - 1])
                    status.append(1)
                else:
                    stop.append(s.censoring_time)
                    status.append(0)
                stratum.append(k)
        timescale = "calendar"
        risk_set = "semi-restricted"

    return ModelLayout(
        subject=np.asarray(subj, dtype=np.intp),
        start=np.asarray(start, dtype=float),
        stop=np.asarray(stop, dtype=float),
        status=np.asarray(status, dtype=np.int8),
        stratum=np.asarray(stratum, dtype=np.intp),
        covariates=data.X,
        subject_ids=data.ids,
        timescale=timescale,
        risk_set=risk_set,
        model=model,
    )


# -- serialization -----------------------------------------------------------

LAYOUT_COLUMNS = ("subject_id", "start", "stop", "status", "stratum")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_layout_csv(layout: ModelLayout, path: "str | Path") -> None:
    p = layout.p
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(LAYOUT_COLUMNS) + [f"x{j + 1}" for j in range(p)])
        X = layout.covariates
        for s, a, b, d, k in zip(layout.subject, layout.start, layout.stop, layout.status, layout.stratum):
            w.writerow(
                [int(layout.subject_ids[s]), _fmt(a), _fmt(b), int(d), int(k)]
                + [_fmt(v) for v in X[s]]
            )


def write_dataset(
    data: RecurrentDataset,
    path: "str | Path",
    model: "str | ModelKind" = ModelKind.AG,
    extra: dict[str, Any] | None = None,
) -> ModelLayout:
    """Write ``data`` as a layout CSV plus a ``.json`` sidecar next to it."""
    path = Path(path)
    layout = expand_layout(data, model)
    write_layout_csv(layout, path)
    sidecar = {
        "p": data.p,
        "n": data.n,
        "active_mask": None if data.active_mask is None else [bool(v) for v in data.active_mask],
        "model": layout.model.value,
        "timescale": layout.timescale,
        "risk_set": layout.risk_set,
        "followup": {str(int(i)): float(t) for i, t in zip(data.ids, data.followup)},
    }
    sidecar.update(data.meta)
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return layout


def read_dataset(path: "str | Path") -> RecurrentDataset:
    """Rebuild a dataset from an AG/Frailty/PWP layout CSV and its sidecar."""
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    if side.get("timescale") != "counting-process":
        raise ValueError("only counting-process layouts can be read back")
    rows: dict[int, list] = {}
    order: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        p = len(header) - len(LAYOUT_COLUMNS)
        for rec in reader:
            sid = int(rec[0])
            if sid not in rows:
                rows[sid] = [[], None, np.array([float(v) for v in rec[5:]])]
                order.append(sid)
            stop, status = float(rec[2]), int(rec[3])
            if status:
                rows[sid][0].append(stop)
            rows[sid][1] = stop
    followup = side.get("followup", {})
    subjects = []
    for sid in order:
        events, last, x = rows[sid]
        c = float(followup.get(str(sid), last))
        subjects.append(Subject(sid, tuple(events), c, x))
    mask = side.get("active_mask")
    meta = {k: v for k, v in side.items() if k not in ("p", "n", "active_mask", "followup", "model", "timescale", "risk_set")}
    return RecurrentDataset(tuple(subjects), p, None if mask is None else np.array(mask), meta)
