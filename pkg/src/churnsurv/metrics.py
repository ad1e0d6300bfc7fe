"""Censoring-aware evaluation of predicted survival curves.

Orientation: a higher predicted survival means a lower risk of purchasing
soon. A "case" at horizon t purchased by t; a "control" had not purchased
by t.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .survival import StepSurvivalCurve, censoring_distribution
from .transactions import TransactionRecord, group_by_customer


class MetricError(ValueError):
    pass


@dataclass
class EvalSubject:
    customer_id: str
    predicted_curve: Callable
    event_time: float  # first purchase in the performance window; inf when none
    event_observed: int
    censor_time: float

    def __post_init__(self):
        if self.event_observed and self.event_time > self.censor_time:
            raise ValueError(f"{self.customer_id}: observed event after censoring time")

    @property
    def subject_time(self) -> float:
        return min(self.event_time, self.censor_time)


def _arrays(subjects):
    if not subjects:
        raise MetricError("no subjects")
    t_prime = np.array([s.subject_time for s in subjects], dtype=float)
    delta = np.array([s.event_observed for s in subjects], dtype=bool)
    return t_prime, delta


def survival_matrix(subjects, times) -> np.ndarray:
    """Predicted S_k(t) for every subject (rows) and time (columns)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    return np.stack([np.broadcast_to(np.asarray(s.predicted_curve(times), float), times.shape) for s in subjects])


def subject_censoring_curve(subjects) -> StepSurvivalCurve:
    t_prime, delta = _arrays(subjects)
    return censoring_distribution(t_prime, delta.astype(int))


# -------------------------------------------------------------------- Brier


def brier_uncensored(subjects, t: float) -> float:
    t_prime, delta = _arrays(subjects)
    unresolved = ~delta & (t_prime <= t)
    if unresolved.any():
        raise MetricError(
            f"{int(unresolved.sum())} subjects censored at or before t={t} without an event; use brier_ipcw"
        )
    s = survival_matrix(subjects, [t])[:, 0]
    # same summation as the weighted score, with every weight equal to one
    return _brier_ipcw_from(s, t, t_prime, delta, 1.0, np.ones_like(t_prime))


def _brier_ipcw_from(s_t, t, t_prime, delta, g_t, g_at_tprime):
    n = len(t_prime)
    died = delta & (t_prime <= t)
    alive = t_prime > t
    total = np.sum(np.where(died, s_t**2 / np.where(died, g_at_tprime, 1.0), 0.0))
    total += np.sum(np.where(alive, (1 - s_t) ** 2, 0.0)) / g_t
    return float(total / n)


def brier_ipcw(subjects, t: float, censor_curve: Callable | None = None) -> float:
    """Graf's inverse-probability-of-censoring weighted Brier score at t.

    `censor_curve` defaults to the Kaplan-Meier censoring distribution of the
    subjects themselves.
    """
    t_prime, delta = _arrays(subjects)
    G = censor_curve if censor_curve is not None else subject_censoring_curve(subjects)
    g_t = float(G(t))
    if g_t <= 0:
        raise MetricError(f"grid exceeds censoring support: G({t}) = 0")
    died = delta & (t_prime <= t)
    g_prime = np.asarray(G(t_prime), dtype=float)
    if np.any(g_prime[died] <= 0):
        raise MetricError("grid exceeds censoring support: G = 0 at an event time")
    s_t = survival_matrix(subjects, [t])[:, 0]
    return _brier_ipcw_from(s_t, t, t_prime, delta, g_t, g_prime)


def integrate_scores(grid, scores, t_max: float) -> float:
    """(1 / t_max) * trapezoid integral of the scores over the grid."""
    return float(np.trapezoid(np.asarray(scores, float), np.asarray(grid, float)) / t_max)


def integrated_brier(subjects, t_max: float, grid_size: int = 100, censor_curve: Callable | None = None) -> float:
    if t_max <= 0:
        raise MetricError("t_max must be positive")
    t_prime, delta = _arrays(subjects)
    G = censor_curve if censor_curve is not None else subject_censoring_curve(subjects)
    grid = np.linspace(0.0, t_max, grid_size)
    g_grid = np.asarray(G(grid), dtype=float)
    if np.any(g_grid <= 0):
        raise MetricError(f"grid exceeds censoring support: G = 0 before t_max={t_max}")
    g_prime = np.asarray(G(t_prime), dtype=float)
    S = survival_matrix(subjects, grid)
    scores = []
    for j, t in enumerate(grid):
        died = delta & (t_prime <= t)
        if np.any(g_prime[died] <= 0):
            raise MetricError("grid exceeds censoring support: G = 0 at an event time")
        scores.append(_brier_ipcw_from(S[:, j], t, t_prime, delta, g_grid[j], g_prime))
    return integrate_scores(grid, scores, t_max)


# ------------------------------------------------------- rank statistics


def _pair_counts(lower, upper, block: int = 1024) -> int:
    """Sum over pairs (a, b) of 1{a < b} + 0.5 * 1{a == b}, in exact half-units."""
    halves = 0
    for start in range(0, len(lower), block):
        a = lower[start : start + block, None]
        halves += 2 * int((a < upper[None, :]).sum()) + int((a == upper[None, :]).sum())
    return halves


def concordance(subjects) -> tuple[float, int]:
    """Time-dependent Harrell C for predicted survival curves.

    A pair (i, j) is comparable when t'_i < t'_j and i had an observed event.
    Both curves are read at t'_i, the earlier subject's own time; the pair is
    concordant when S_i(t'_i) < S_j(t'_i), and a tie counts one half. For
    curves that do not cross this is Harrell's C on the risk ordering.
    """
    t_prime, delta = _arrays(subjects)
    idx = np.nonzero(delta)[0]
    grid, col = np.unique(t_prime[idx], return_inverse=True)
    S = survival_matrix(subjects, grid) if len(idx) else np.empty((len(subjects), 0))
    halves = 0
    n_pairs = 0
    for start in range(0, len(idx), 512):
        rows = idx[start : start + 512]
        cols = col[start : start + 512]
        comparable = t_prime[rows, None] < t_prime[None, :]
        n_pairs += int(comparable.sum())
        own = S[rows, cols][:, None]
        other = S[:, cols].T
        halves += 2 * int(((own < other) & comparable).sum()) + int(((own == other) & comparable).sum())
    if n_pairs == 0:
        raise MetricError("no comparable pairs")
    return halves / (2 * n_pairs), n_pairs


def c_index(subjects) -> float:
    return concordance(subjects)[0]


def cd_auc(subjects, t: float) -> float:
    """Cumulative/dynamic AUC: P(S_control(t) > S_case(t)), ties counted half."""
    t_prime, delta = _arrays(subjects)
    cases = delta & (t_prime <= t)
    controls = t_prime > t
    if not cases.any():
        raise MetricError(f"no cases (observed events by t={t})")
    if not controls.any():
        raise MetricError(f"no controls (subjects event-free past t={t})")
    s = survival_matrix(subjects, [t])[:, 0]
    halves = _pair_counts(s[cases], s[controls])
    return halves / (2 * int(cases.sum()) * int(controls.sum()))


@dataclass
class BinaryResult:
    accuracy: float
    sensitivity: float
    specificity: float
    threshold: float
    n_resolved: int
    n_excluded: int


def binary_at_horizon(subjects, t: float) -> BinaryResult:
    """Classify "purchases by t" as S_k(t) < median_k S_k(t).

    Subjects censored at or before t without a purchase have no label and are
    left out of the confusion matrix.
    """
    t_prime, delta = _arrays(subjects)
    s = survival_matrix(subjects, [t])[:, 0]
    threshold = float(np.median(s))
    positive_truth = delta & (t_prime <= t)
    negative_truth = t_prime > t
    resolved = positive_truth | negative_truth
    if not resolved.any():
        raise MetricError(f"no subject has a resolvable label at t={t}")
    pred = s < threshold
    tp = int(np.sum(pred & positive_truth))
    tn = int(np.sum(~pred & negative_truth))
    n_pos = int(positive_truth.sum())
    n_neg = int(negative_truth.sum())
    return BinaryResult(
        accuracy=(tp + tn) / int(resolved.sum()),
        sensitivity=tp / n_pos if n_pos else math.nan,
        specificity=tn / n_neg if n_neg else math.nan,
        threshold=threshold,
        n_resolved=int(resolved.sum()),
        n_excluded=int((~resolved).sum()),
    )


# ----------------------------------------------------------------- report


@dataclass
class EvalReport:
    horizon: float
    brier_at: dict[float, float]
    ibs: float
    ibs_t_max: float
    c_index: float
    cd_auc_at: dict[float, float]
    binary: BinaryResult
    n_subjects: int
    n_comparable_pairs: int
    n_excluded: int = 0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["brier_at"] = {repr(k): v for k, v in self.brier_at.items()}
        d["cd_auc_at"] = {repr(k): v for k, v in self.cd_auc_at.items()}
        return d

    def rows(self, model: str, dataset: str, split: str) -> list[list]:
        out = []
        for t, v in self.brier_at.items():
            out.append([model, dataset, split, "brier", t, v])
        out.append([model, dataset, split, "ibs", self.ibs_t_max, self.ibs])
        out.append([model, dataset, split, "c_index", "", self.c_index])
        for t, v in self.cd_auc_at.items():
            out.append([model, dataset, split, "cd_auc", t, v])
        for name in ("accuracy", "sensitivity", "specificity"):
            out.append([model, dataset, split, name, self.horizon, getattr(self.binary, name)])
        return out


METRIC_HEADER = ["model", "dataset", "split", "metric", "horizon", "value"]


def write_metrics_csv(path: str | Path, rows: Iterable[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_HEADER)
        for r in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in r])


def write_report_json(path: str | Path, reports: Mapping[str, EvalReport]) -> None:
    Path(path).write_text(
        json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2, sort_keys=True), encoding="utf-8"
    )


def build_subjects(predictions: Mapping[str, Callable], holdout: Iterable[TransactionRecord],
                   analysis_date: date, performance_days: float) -> list[EvalSubject]:
    """One subject per predicted customer, timed from the analysis date.

    The event is the first holdout purchase within `performance_days`.
    """
    first = {cid: dates[0] for cid, dates in group_by_customer(holdout).items()}
    subjects = []
    for cid in sorted(predictions):
        d = first.get(cid)
        t_star = float((d - analysis_date).days) if d is not None else math.inf
        if d is not None and t_star <= 0:
            raise MetricError(f"{cid}: holdout purchase on {d} is not after the analysis date")
        observed = int(t_star <= performance_days)
        subjects.append(EvalSubject(cid, predictions[cid], t_star if observed else math.inf, observed, performance_days))
    return subjects


def evaluate(predictions: Mapping[str, Callable], holdout: Iterable[TransactionRecord], horizon: float,
             analysis_date: date, performance_days: float, horizons=None, grid_size: int = 100) -> EvalReport:
    subjects = build_subjects(predictions, holdout, analysis_date, performance_days)
    horizons = sorted(set(horizons or [horizon]) | {horizon})
    G = subject_censoring_curve(subjects)
    notes = []
    t_max = horizon
    support = G.support_end()
    if t_max >= support:
        t_max = float(np.nextafter(support, 0))
        notes.append(f"IBS grid capped at {t_max} (censoring support)")
    brier = {float(t): brier_ipcw(subjects, t, G) for t in horizons}
    auc = {float(t): cd_auc(subjects, t) for t in horizons}
    c, n_pairs = concordance(subjects)
    binary = binary_at_horizon(subjects, horizon)
    return EvalReport(
        horizon=float(horizon),
        brier_at=brier,
        ibs=integrated_brier(subjects, t_max, grid_size, G),
        ibs_t_max=float(t_max),
        c_index=c,
        cd_auc_at=auc,
        binary=binary,
        n_subjects=len(subjects),
        n_comparable_pairs=n_pairs,
        n_excluded=binary.n_excluded,
        notes=notes,
    )
