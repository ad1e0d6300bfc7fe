"""Transaction logs to per-customer inter-arrival sequences.

A customer with purchase dates d0 <= d1 <= ... <= dn observed up to an
analysis date A is represented by the gaps [d1-d0, ..., dn-d(n-1), A-dn]
with flags [1, ..., 1, 0]: every gap is an observed event except the
trailing recency, which is right-censored.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

HEADER = ("customer_id", "order_no", "purchase_date")


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class TransactionRecord:
    customer_id: str
    order_no: int
    purchase_date: date


@dataclass
class CustomerSequence:
    customer_id: str
    times: list[float]
    observed: list[int]

    def __post_init__(self):
        if len(self.times) != len(self.observed) or not self.times:
            raise ValueError(
                f"{self.customer_id}: times and observed must be parallel and non-empty"
            )

    def __len__(self):
        return len(self.times)

    @property
    def recency(self) -> float:
        """The censored tail: days from last purchase to the analysis date."""
        return self.times[-1]

    @property
    def n_observed(self) -> int:
        return int(sum(self.observed))

    def to_json(self) -> str:
        return json.dumps(
            {"customer_id": self.customer_id, "times": self.times, "observed": self.observed}
        )

    @classmethod
    def from_json(cls, line: str) -> "CustomerSequence":
        obj = json.loads(line)
        return cls(obj["customer_id"], [float(t) for t in obj["times"]], [int(d) for d in obj["observed"]])


@dataclass
class PaddedExample:
    customer_id: str
    window: np.ndarray
    mask: np.ndarray
    target: float
    target_observed: int


def ingest(source: BinaryIO | bytes | str | Path) -> list[TransactionRecord]:
    """Parse a `customer_id,order_no,purchase_date` CSV into records.

    `source` may be raw bytes, a binary stream or a path. Rows keep file order.
    """
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return ingest(fh)
    if isinstance(source, bytes):
        source = io.BytesIO(source)

    text = io.TextIOWrapper(source, encoding="utf-8", newline="")
    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise IngestError("empty file") from None
    if tuple(h.strip() for h in header) != HEADER:
        raise IngestError(f"line 1: expected header {','.join(HEADER)}, got {','.join(header)}")

    records = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise IngestError(f"line {line}: expected 3 fields, got {len(row)}")
        cid, order, raw_date = (c.strip() for c in row)
        if not cid:
            raise IngestError(f"line {line}: empty customer_id")
        try:
            order_no = int(order)
        except ValueError:
            raise IngestError(f"line {line}: order_no {order!r} is not an integer") from None
        if order_no < 0:
            raise IngestError(f"line {line}: order_no {order_no} is negative")
        try:
            when = date.fromisoformat(raw_date)
        except ValueError:
            raise IngestError(f"line {line}: unparseable date {raw_date!r}") from None
        records.append(TransactionRecord(cid, order_no, when))

    if not records:
        raise IngestError("no data rows")
    return records


def write_transactions(path: str | Path, records: Iterable[TransactionRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for r in records:
            writer.writerow([r.customer_id, r.order_no, r.purchase_date.isoformat()])


def group_by_customer(records: Iterable[TransactionRecord]) -> dict[str, list[date]]:
    """Sorted purchase dates per customer, customers in sorted id order."""
    grouped: dict[str, list[date]] = defaultdict(list)
    for r in records:
        grouped[r.customer_id].append(r.purchase_date)
    return {cid: sorted(grouped[cid]) for cid in sorted(grouped)}


def build_sequences(records: list[TransactionRecord], analysis_date: date) -> list[CustomerSequence]:
    if not records:
        raise ValueError("at least one record is required")
    sequences = []
    for cid, dates in group_by_customer(records).items():
        if dates[-1] > analysis_date:
            raise ValueError(
                f"{cid}: purchase on {dates[-1].isoformat()} is after analysis date "
                f"{analysis_date.isoformat()}"
            )
        gaps = [float((b - a).days) for a, b in zip(dates, dates[1:])]
        tail = float((analysis_date - dates[-1]).days)
        sequences.append(CustomerSequence(cid, gaps + [tail], [1] * len(gaps) + [0]))
    return sequences


def clamp_zero_gaps(seq: CustomerSequence, eps: float = 0.5) -> CustomerSequence:
    """Replace observed zero-length gaps (same-day repeat purchases) by `eps` days."""
    times = [eps if (d == 1 and t <= 0.0) else t for t, d in zip(seq.times, seq.observed)]
    return CustomerSequence(seq.customer_id, times, list(seq.observed))


def make_windows(seq: CustomerSequence, s: int) -> list[PaddedExample]:
    """Stride-1 training pairs: the last `s` entries seen so far -> the next entry."""
    if s < 1:
        raise ValueError("s must be >= 1")
    out = []
    for j in range(1, len(seq)):
        out.append(_left_pad(seq.customer_id, seq.times[:j], s, seq.times[j], seq.observed[j]))
    return out


def serving_window(seq: CustomerSequence, s: int) -> PaddedExample:
    """Window over the full sequence, censored tail included. Target is the tail itself."""
    if s < 1:
        raise ValueError("s must be >= 1")
    return _left_pad(seq.customer_id, seq.times, s, seq.times[-1], 0)


def _left_pad(cid, history, s, target, target_observed) -> PaddedExample:
    tail = history[-s:]
    window = np.zeros(s)
    mask = np.zeros(s, dtype=np.int8)
    if tail:
        window[s - len(tail):] = tail
        mask[s - len(tail):] = 1
    return PaddedExample(cid, window, mask, float(target), int(target_observed))


@dataclass
class WindowBatch:
    """Column-stacked training pairs, the array form of a list of PaddedExample."""

    windows: np.ndarray
    masks: np.ndarray
    targets: np.ndarray
    observed: np.ndarray
    customer_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        ids = [self.customer_ids[i] for i in idx] if self.customer_ids else []
        return WindowBatch(self.windows[idx], self.masks[idx], self.targets[idx], self.observed[idx], ids)


def stack_examples(examples: list[PaddedExample], s: int) -> WindowBatch:
    if not examples:
        return WindowBatch(np.zeros((0, s)), np.zeros((0, s), dtype=np.int8), np.zeros(0), np.zeros(0), [])
    return WindowBatch(
        np.stack([e.window for e in examples]),
        np.stack([e.mask for e in examples]),
        np.array([e.target for e in examples], dtype=float),
        np.array([e.target_observed for e in examples], dtype=float),
        [e.customer_id for e in examples],
    )


def training_batch(sequences: Iterable[CustomerSequence], s: int) -> WindowBatch:
    examples = [ex for seq in sequences for ex in make_windows(seq, s)]
    return stack_examples(examples, s)


def serving_batch(sequences: Iterable[CustomerSequence], s: int) -> WindowBatch:
    return stack_examples([serving_window(seq, s) for seq in sequences], s)


def write_sequences(path: str | Path, sequences: Iterable[CustomerSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(seq.to_json() + "\n")


def read_sequences(path: str | Path) -> list[CustomerSequence]:
    with open(path, encoding="utf-8") as fh:
        return [CustomerSequence.from_json(line) for line in fh if line.strip()]
