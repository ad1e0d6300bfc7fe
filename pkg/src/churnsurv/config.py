"""Flat `key = value` run configuration shared by every CLI subcommand."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/synthetic"

    # simulate
    n_customers: int = 20_000
    mu: float = 0.08
    sigma: float = 0.02
    rate_floor: float = 0.01
    stop_prob: float = 0.15
    horizon_days: float = 365.0
    start_date: str = "2020-01-01"

    # prepare
    transactions: str = ""  # defaults to <out>/transactions.csv
    analysis_date: str = ""  # empty: latest purchase minus min_performance_days
    min_performance_days: int = 183
    train_frac: float = 0.8
    val_frac: float = 0.2

    # train
    seq_len: int = 7
    eps_gap: float = 0.5
    hidden: int = 16
    mlp_widths: str = "16,1"
    clamp: float = 6.0
    loss_kind: str = "censored_nll"
    learning_rate: float = 0.01
    batch_size: int = 128
    epochs: int = 15
    gradient_clip: float = 5.0
    input_transform: str = "log1p"

    # predict / baseline / evaluate
    horizon: float = 100.0
    cox_unit: str = "gap"
    grid_size: int = 100
    dataset: str = "synthetic"

    def __post_init__(self):
        if self.n_customers < 1:
            raise ConfigError(f"n_customers must be positive, got {self.n_customers}")
        if self.train_frac < 0 or self.val_frac < 0 or self.train_frac + self.val_frac > 1 + 1e-12:
            raise ConfigError("split fractions must be non-negative and sum to at most 1")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(int(w) for w in str(self.mlp_widths).split(",") if w.strip())

    def lines(self) -> list[str]:
        return [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]


def _coerce(name: str, kind, raw: str):
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None


def parse_pairs(pairs: dict[str, str]) -> dict:
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, types[key], raw)
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    pairs = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        pairs[key] = value
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    pairs = read_config_file(path) if path else {}
    pairs.update(overrides or {})
    return dataclasses.replace(RunConfig(), **parse_pairs(pairs))
