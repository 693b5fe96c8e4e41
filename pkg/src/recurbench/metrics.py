"""Concordance indices for recurrent events and the variable-selection error rate.

Risk scores follow one convention throughout: a higher score means a higher
risk. Tied scores get no credit unless ``tie_credit=0.5`` is requested.
Every index has a literal double-loop twin (``*_bruteforce``) used as an
oracle in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import RecurrentDataset


def _scores(scores, n: int) -> np.ndarray:
    s = np.asarray(scores, dtype=float).ravel()
    if s.shape[0] != n:
        raise ValueError(f"expected {n} scores, got {s.shape[0]}")
    if not np.all(np.isfinite(s)):
        raise ValueError("risk scores must be finite")
    return s


def harrell_c(times, events, scores, tie_credit: float = 0.0) -> tuple[float | None, int]:
    """Harrell's C over ordered pairs (i, j) with T_i > T_j and an event for j.

    Returns ``(c, usable_pairs)``; ``c`` is None when no pair is usable.
    """
    t = np.asarray(times, dtype=float).ravel()
    d = np.asarray(events).ravel().astype(bool)
    if t.shape[0] < 2 or d.shape[0] != t.shape[0]:
        raise ValueError("times and events need equal lengths >= 2")
    eta = _scores(scores, t.shape[0])
    usable = (t[:, None] > t[None, :]) & d[None, :]
    count = int(usable.sum())
    if count == 0:
        return None, 0
    conc = usable & (eta[:, None] < eta[None, :])
    num = float(conc.sum())
    if tie_credit:
        num += tie_credit * float((usable & (eta[:, None] == eta[None, :])).sum())
    return num / count, count


def harrell_c_bruteforce(times, events, scores, tie_credit: float = 0.0):
    n = len(times)
    num = 0.0
    den = 0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if times[i] > times[j] and events[j]:
                den += 1
                if scores[i] < scores[j]:
                    num += 1
                elif scores[i] == scores[j]:
                    num += tie_credit
    return (None, 0) if den == 0 else (num / den, den)


def event_order_outcome(data: RecurrentDataset, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Subjects at risk of a k-th event, their calendar time to it and its indicator."""
    idx, times, status = [], [], []
    for i, s in enumerate(data.subjects):
        if s.n_events >= k - 1:
            idx.append(i)
            if s.n_events >= k:
                times.append(s.event_times[k - 1])
                status.append(1)
            else:
                times.append(s.censoring_time)
                status.append(0)
    return np.array(idx, dtype=int), np.array(times, dtype=float), np.array(status, dtype=int)


def harrell_per_event(
    data: RecurrentDataset, scores, tie_credit: float = 0.0, max_k: int | None = None
) -> list[tuple[int, float, int]]:
    """Harrell's C for each event order k, up to the last k with usable pairs."""
    eta = _scores(scores, data.n)
    out = []
    top = int(data.n_events.max()) if max_k is None else int(max_k)
    for k in range(1, top + 1):
        idx, t, d = event_order_outcome(data, k)
        if idx.shape[0] < 2:
            c, count = None, 0
        else:
            c, count = harrell_c(t, d, eta[idx], tie_credit)
        out.append((k, c, count))
    while out and out[-1][2] == 0:
        out.pop()
    return [(k, c, n) for k, c, n in out if n > 0]


def _counts_at(data: RecurrentDataset, t: np.ndarray) -> np.ndarray:
    """N_i(t[i, j]) for every subject i and truncation time t[i, j]."""
    out = np.empty(t.shape, dtype=int)
    for i, s in enumerate(data.subjects):
        out[i] = np.searchsorted(s.event_times, t[i], side="right")
    return out


def kim_c(data: RecurrentDataset, scores, tie_credit: float = 0.0) -> tuple[float | None, int]:
    """Kim's C-index: risk order against event counts up to the shared follow-up."""
    if data.n < 2:
        raise ValueError("need at least 2 subjects")
    eta = _scores(scores, data.n)
    T = data.followup
    tmin = np.minimum(T[:, None], T[None, :])
    N = _counts_at(data, tmin)
    more = N > N.T  # N_i(T_i ^ T_j) > N_j(T_i ^ T_j)
    count = int(more.sum())
    if count == 0:
        return None, 0
    num = float((more & (eta[:, None] > eta[None, :])).sum())
    if tie_credit:
        num += tie_credit * float((more & (eta[:, None] == eta[None, :])).sum())
    return num / count, count


def kim_c_bruteforce(data: RecurrentDataset, scores, tie_credit: float = 0.0):
    from .data import event_count

    subs = data.subjects
    num = 0.0
    den = 0
    for i, si in enumerate(subs):
        for j, sj in enumerate(subs):
            t = min(si.censoring_time, sj.censoring_time)
            if event_count(si, t) > event_count(sj, t):
                den += 1
                if scores[i] > scores[j]:
                    num += 1
                elif scores[i] == scores[j]:
                    num += tie_credit
    return (None, 0) if den == 0 else (num / den, den)


def error_rate(active_mask, flagged) -> tuple[float, int, int]:
    """(err, FP, FN) with err = (FP + FN) / p."""
    a = np.asarray(active_mask, dtype=bool).ravel()
    f = np.asarray(flagged, dtype=bool).ravel()
    if a.shape != f.shape:
        raise ValueError("masks must have equal length")
    fp = int(np.sum(f & ~a))
    fn = int(np.sum(a & ~f))
    return (fp + fn) / a.shape[0], fp, fn


@dataclass
class MetricReport:
    harrell_per_event: list[tuple[int, float | None, int]] = field(default_factory=list)
    kim_c: float | None = None
    kim_pair_count: int = 0
    error_rate: float | None = None
    fp: int | None = None
    fn: int | None = None

    def harrell(self, k: int) -> tuple[float | None, int]:
        for kk, c, n in self.harrell_per_event:
            if kk == k:
                return c, n
        return None, 0


def evaluate(
    data: RecurrentDataset,
    scores,
    flagged=None,
    tie_credit: float = 0.0,
    max_k: int | None = None,
) -> MetricReport:
    """All three criteria on one dataset; ``flagged=None`` leaves the error rate absent."""
    c, n = kim_c(data, scores, tie_credit)
    rep = MetricReport(harrell_per_event(data, scores, tie_credit, max_k), c, n)
    if flagged is not None and data.active_mask is not None:
        rep.error_rate, rep.fp, rep.fn = error_rate(data.active_mask, flagged)
    return rep
