"""Exponential survival, censored MLE, Kaplan-Meier and a Breslow Cox model."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .transactions import CustomerSequence


@dataclass(frozen=True)
class ExponentialSurvival:
    rate: float

    def __post_init__(self):
        if not (math.isfinite(self.rate) and self.rate > 0):
            raise ValueError(f"rate must be positive and finite, got {self.rate}")

    def __call__(self, t):
        return np.exp(-self.rate * np.asarray(t, dtype=float))

    def density(self, t):
        return self.rate * self(t)

    def quantile(self, p):
        """Time by which a fraction `p` of next purchases have happened."""
        return -np.log1p(-np.asarray(p, dtype=float)) / self.rate

    @property
    def mean(self) -> float:
        return 1.0 / self.rate


def survival_at(model: ExponentialSurvival, t: float) -> float:
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    return float(math.exp(-model.rate * t))


def deferred_probability(model: ExponentialSurvival, t1: float, t2: float) -> float:
    """P(t1 < next purchase <= t2) = S(t1) - S(t2)."""
    if t1 < 0:
        raise ValueError(f"t1 must be non-negative, got {t1}")
    if t1 > t2:
        raise ValueError(f"t1={t1} exceeds t2={t2}")
    return survival_at(model, t1) - survival_at(model, t2)


def censored_exponential_mle(times, observed) -> ExponentialSurvival:
    """Rate = (#observed events) / (total exposure), i.e. K_obs / (K * mean time)."""
    times = np.asarray(times, dtype=float)
    observed = np.asarray(observed)
    if times.shape != observed.shape or times.size == 0:
        raise ValueError("times and observed must be parallel and non-empty")
    if np.any(times < 0):
        raise ValueError("times must be non-negative")
    events = int(np.sum(observed))
    if events == 0:
        raise ValueError("rate unidentifiable: no observed events")
    exposure = float(times.sum())
    if exposure <= 0:
        raise ValueError("rate unidentifiable: all times are zero")
    return ExponentialSurvival(events / exposure)


@dataclass(frozen=True)
class StepSurvivalCurve:
    """Right-continuous step function equal to 1 before the first knot.

    Past the last knot the final value is carried forward.
    """

    knots: np.ndarray = field(default_factory=lambda: np.zeros(0))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        if knots.shape != values.shape or knots.ndim != 1:
            raise ValueError("knots and values must be parallel 1-d arrays")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        if np.any(np.diff(values) > 0) or np.any(values < 0) or np.any(values > 1):
            raise ValueError("values must be non-increasing within [0, 1]")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)] if self.values.size else 1.0, 1.0)
        return out if out.ndim else float(out)

    def support_end(self) -> float:
        """Largest time with a positive value (inf if the curve never reaches 0)."""
        zero = np.nonzero(self.values <= 0)[0]
        return float(self.knots[zero[0]]) if zero.size else math.inf

    def to_rows(self) -> list[tuple[float, float]]:
        return [(0.0, 1.0)] + list(zip(self.knots.tolist(), self.values.tolist()))


def write_curve_csv(path: str | Path, curve: StepSurvivalCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "survival"])
        for t, s in curve.to_rows():
            writer.writerow([repr(t), repr(s)])


def kaplan_meier(times, observed) -> StepSurvivalCurve:
    """Product-limit estimate. Events at t are counted before censorings at t."""
    times = np.asarray(times, dtype=float)
    observed = np.asarray(observed).astype(bool)
    if times.shape != observed.shape or times.size == 0:
        raise ValueError("times and observed must be parallel and non-empty")
    if np.any(times < 0):
        raise ValueError("times must be non-negative")

    event_times, deaths = np.unique(times[observed], return_counts=True)
    if event_times.size == 0:
        return StepSurvivalCurve()
    sorted_times = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_times, event_times, side="left")
    values = np.cumprod(1.0 - deaths / at_risk)
    return StepSurvivalCurve(event_times, values)


def per_customer_km(seq: CustomerSequence) -> StepSurvivalCurve:
    return kaplan_meier(seq.times, seq.observed)


def censoring_distribution(times, observed) -> StepSurvivalCurve:
    """G(t) = P(C > t): Kaplan-Meier with censorings treated as the events."""
    return kaplan_meier(times, 1 - np.asarray(observed, dtype=int))


# --------------------------------------------------------------------------- Cox


class CoxFitError(RuntimeError):
    pass


@dataclass
class CoxModel:
    beta: np.ndarray
    means: np.ndarray
    knots: np.ndarray  # distinct event times
    cumhaz: np.ndarray  # Breslow baseline cumulative hazard at the knots, for x = means
    covariate_names: list[str]
    n_iter: int = 0

    @property
    def baseline(self) -> StepSurvivalCurve:
        return StepSurvivalCurve(self.knots, np.exp(-self.cumhaz))

    def cumulative_hazard(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        return np.where(idx >= 0, self.cumhaz[np.maximum(idx, 0)] if self.cumhaz.size else 0.0, 0.0)

    def risk(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.exp((x - self.means) @ self.beta)

    def survival_curve(self, x) -> StepSurvivalCurve:
        """S(t | x) = exp(-cumhaz(t) * exp((x - mean) . beta))."""
        return StepSurvivalCurve(self.knots, np.exp(-self.cumhaz * self.risk(x)[0]))


def _risk_set_sums(X, times, observed, beta):
    """Breslow partial likelihood pieces at each distinct event time.

    Returns (loglik, grad, hess, event_times, deaths, s0) with loglik, grad and
    hess on the total (not mean) scale.
    """
    n, p = X.shape
    eta = X @ beta
    shift = eta.max() if n else 0.0
    w = np.exp(eta - shift)

    order = np.argsort(-times, kind="stable")
    t_desc = times[order]
    cw = np.cumsum(w[order])
    cwx = np.cumsum(w[order, None] * X[order], axis=0)
    cwxx = np.cumsum(w[order, None, None] * X[order, :, None] * X[order, None, :], axis=0)

    event_times, deaths = np.unique(times[observed], return_counts=True)
    # last position (in descending order) whose time is >= each event time
    last = np.searchsorted(-t_desc, -event_times, side="right") - 1
    s0 = cw[last]
    s1 = cwx[last]
    s2 = cwxx[last]
    xbar = s1 / s0[:, None]

    loglik = float(eta[observed].sum() - np.sum(deaths * (np.log(s0) + shift)))
    grad = X[observed].sum(axis=0) - (deaths[:, None] * xbar).sum(axis=0)
    hess = -np.einsum("k,kij->ij", deaths, s2 / s0[:, None, None] - xbar[:, :, None] * xbar[:, None, :])
    return loglik, grad, hess, event_times, deaths, s0 * math.exp(shift)


def cox_partial_loglik(X, times, observed, beta) -> float:
    X = np.asarray(X, dtype=float).reshape(len(times), -1)
    return _risk_set_sums(X, np.asarray(times, float), np.asarray(observed).astype(bool), np.asarray(beta, float))[0]


def cox_fit(covariates, times, observed, max_iter: int = 100, tol: float = 1e-9, names=None,
            max_effect: float = 30.0) -> CoxModel:
    """Newton-Raphson on the Breslow partial likelihood, then the Breslow baseline.

    Covariates are centered before fitting. Convergence is declared when the
    gradient norm of the per-event mean log partial likelihood drops below `tol`.
    The fit is refused as monotone (no finite maximiser, e.g. separated data)
    when a coefficient's effect over one standard deviation of its covariate
    exceeds `max_effect` on the log-hazard scale, or when the information of
    the standardized covariates per event collapses below 1e-6 at the optimum.
    """
    times = np.asarray(times, dtype=float)
    observed = np.asarray(observed).astype(bool)
    X = np.asarray(covariates, dtype=float).reshape(len(times), -1)
    n, p = X.shape
    if n == 0 or not observed.any():
        raise CoxFitError("need at least one observed event")
    names = list(names) if names is not None else [f"x{i}" for i in range(p)]
    means = X.mean(axis=0) if n else np.zeros(p)
    Xc = X - means
    n_events = int(observed.sum())
    if np.linalg.matrix_rank(Xc) < p:
        raise CoxFitError("singular information matrix; covariates may be collinear or constant")
    sd = Xc.std(axis=0)

    beta = np.zeros(p)
    loglik, grad, hess, *_ = _risk_set_sums(Xc, times, observed, beta)
    it = 0
    while np.linalg.norm(grad) / n_events >= tol:
        if it >= max_iter:
            raise CoxFitError(
                f"Newton did not converge in {max_iter} iterations "
                f"(|grad|/events={np.linalg.norm(grad) / n_events:.3g}, beta={beta.tolist()}); "
                "the partial likelihood may be monotone (separated data)"
            )
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise CoxFitError("singular information matrix; covariates may be collinear or constant") from None
        if not np.all(np.isfinite(step)) or np.linalg.cond(-hess) > 1e12:
            raise CoxFitError("singular information matrix; covariates may be collinear or constant")
        scale = 1.0
        for _ in range(40):
            candidate = beta + scale * step
            new = _risk_set_sums(Xc, times, observed, candidate)
            if new[0] >= loglik - 1e-12 * abs(loglik):
                break
            scale /= 2
        beta = candidate
        loglik, grad, hess, *_ = new
        it += 1
        if np.any(np.abs(beta) * sd > max_effect):
            raise CoxFitError(
                f"coefficients diverging (beta={beta.tolist()}); the partial likelihood "
                "appears monotone (separated data)"
            )

    info = -hess * np.outer(sd, sd) / n_events
    if np.linalg.eigvalsh(info).min() < 1e-6:
        raise CoxFitError(
            f"information vanishes at beta={beta.tolist()}; the partial likelihood "
            "appears monotone (separated data)"
        )
    _, _, _, event_times, deaths, s0 = _risk_set_sums(Xc, times, observed, beta)
    return CoxModel(beta, means, event_times, np.cumsum(deaths / s0), names, it)


COX_FEATURES = ["log1p_mean_gap", "log1p_n_gaps"]


def cox_features(seq: CustomerSequence) -> np.ndarray:
    """[log(1 + mean observed gap), log(1 + number of observed gaps)].

    Customers without an observed gap use their censored tail as the mean gap.
    """
    gaps = [t for t, d in zip(seq.times, seq.observed) if d == 1]
    mean_gap = float(np.mean(gaps)) if gaps else seq.recency
    return np.array([math.log1p(mean_gap), math.log1p(len(gaps))])


def cox_dataset(sequences: list[CustomerSequence], unit: str = "gap"):
    """Cox design matrix, times and flags.

    unit="gap": one row per sequence entry (observed gaps and the censored tail),
    all rows of a customer sharing that customer's features.
    unit="customer": one row per customer with the censored tail as its time;
    when the tail is zero the last observed gap is used as an event instead.
    """
    rows, times, flags = [], [], []
    for seq in sequences:
        x = cox_features(seq)
        if unit == "gap":
            for t, d in zip(seq.times, seq.observed):
                rows.append(x)
                times.append(t)
                flags.append(d)
        elif unit == "customer":
            gaps = [t for t, d in zip(seq.times, seq.observed) if d == 1]
            rows.append(x)
            if seq.recency > 0 or not gaps:
                times.append(seq.recency)
                flags.append(0)
            else:
                times.append(gaps[-1])
                flags.append(1)
        else:
            raise ValueError(f"unknown Cox observation unit {unit!r}")
    return np.array(rows).reshape(len(rows), len(COX_FEATURES)), np.array(times, float), np.array(flags, int)
