"""Synthetic multi-purchase customers with known exponential return rates.

Each customer draws a rate lambda = max(rate_floor, Normal(mu, sigma^2)), makes a
first purchase uniformly in the first half of the horizon, and then repeats:
stop for good with probability `stop_prob`, otherwise wait Exp(lambda) days and
purchase again if still inside the horizon.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .transactions import TransactionRecord


@dataclass
class SimConfig:
    n_customers: int = 100_000
    mu: float = 0.08
    sigma: float = 0.02
    rate_floor: float = 0.01
    stop_prob: float = 0.15
    horizon_days: float = 365.0
    seed: int = 0
    start_date: date = date(2020, 1, 1)

    def __post_init__(self):
        if self.n_customers < 1:
            raise ValueError(f"n_customers must be positive, got {self.n_customers}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.rate_floor <= 0:
            raise ValueError("rate_floor must be positive")
        if not 0.0 <= self.stop_prob <= 1.0:
            raise ValueError("stop_prob must lie in [0, 1]")
        if self.horizon_days <= 0:
            raise ValueError("horizon_days must be positive")


@dataclass
class SimCustomer:
    customer_id: str
    true_rate: float
    purchase_times: np.ndarray  # fractional days since start_date
    churned: bool

    def purchase_dates(self, start: date) -> list[date]:
        return [start + timedelta(days=math.floor(t)) for t in self.purchase_times]

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.purchase_times)


def _customer(rng: np.random.Generator, cid: str, cfg: SimConfig) -> SimCustomer:
    rate = max(cfg.rate_floor, rng.normal(cfg.mu, cfg.sigma))
    first = rng.uniform(0.0, cfg.horizon_days / 2)
    room = cfg.horizon_days - first

    # Number of gap draws before the stop fires; equivalent to checking the
    # stop before every draw.
    if cfg.stop_prob > 0:
        n_draws = int(rng.geometric(cfg.stop_prob)) - 1
        gaps = rng.exponential(1.0 / rate, size=n_draws)
        elapsed = np.cumsum(gaps)
        inside = elapsed < room
        churned = bool(inside.all())
        elapsed = elapsed[inside] if churned else elapsed[: int(np.argmin(inside))]
    else:
        chunks = []
        total = 0.0
        while total < room:
            chunk = total + np.cumsum(rng.exponential(1.0 / rate, size=64))
            chunks.append(chunk)
            total = chunk[-1]
        elapsed = np.concatenate(chunks)
        elapsed = elapsed[elapsed < room]
        churned = False
    return SimCustomer(cid, float(rate), np.concatenate([[first], first + elapsed]), churned)


def simulate(cfg: SimConfig) -> tuple[list[SimCustomer], list[TransactionRecord]]:
    """Generate customers and the flat transaction log they imply.

    Customer k uses its own generator seeded from (seed, k), so output does not
    depend on generation order.
    """
    width = len(str(cfg.n_customers - 1))
    customers = []
    for k in range(cfg.n_customers):
        rng = np.random.default_rng([cfg.seed, k])
        customers.append(_customer(rng, f"c{k:0{width}d}", cfg))

    records = []
    for c in customers:
        for i, d in enumerate(c.purchase_dates(cfg.start_date)):
            records.append(TransactionRecord(c.customer_id, i, d))
    return customers, records


def write_ground_truth(path: str | Path, customers: list[SimCustomer]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["customer_id", "true_rate", "churned"])
        for c in customers:
            writer.writerow([c.customer_id, repr(c.true_rate), int(c.churned)])


def read_ground_truth(path: str | Path) -> dict[str, tuple[float, bool]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {
            row["customer_id"]: (float(row["true_rate"]), row["churned"] == "1")
            for row in csv.DictReader(fh)
        }


@dataclass
class SimSummary:
    n_customers: int
    mean_purchases: float
    median_purchases: int
    mean_gap: float
    churn_fraction: float

    def lines(self) -> list[str]:
        return [
            f"customers          {self.n_customers}",
            f"mean purchases     {self.mean_purchases:.3f}",
            f"median purchases   {self.median_purchases}",
            f"mean observed gap  {self.mean_gap:.3f} days",
            f"churned by horizon {self.churn_fraction:.3f}",
        ]


def lower_median(values) -> float:
    v = np.sort(np.asarray(values))
    return v[(len(v) - 1) // 2]


def sim_summary(customers: list[SimCustomer]) -> SimSummary:
    if not customers:
        raise ValueError("cannot summarise an empty customer list")
    counts = np.array([len(c.purchase_times) for c in customers])
    gaps = np.concatenate([c.gaps for c in customers])
    return SimSummary(
        n_customers=len(customers),
        mean_purchases=float(counts.mean()),
        median_purchases=int(lower_median(counts)),
        mean_gap=float(gaps.mean()) if gaps.size else float("nan"),
        churn_fraction=float(np.mean([c.churned for c in customers])),
    )
