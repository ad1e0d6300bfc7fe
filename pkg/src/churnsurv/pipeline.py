"""End-to-end steps: simulate, prepare, train, predict, baseline, evaluate.

Every step reads and writes fixed file names inside the run directory, so a
run directory plus its config fully describes an experiment.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig
from .recurrent import TrainConfig, load_model, predict_rates, save_model, train
from .simulate import SimConfig, sim_summary, simulate, write_ground_truth
from .survival import (
    COX_FEATURES,
    ExponentialSurvival,
    StepSurvivalCurve,
    cox_dataset,
    cox_features,
    cox_fit,
    per_customer_km,
)
from .transactions import (
    CustomerSequence,
    build_sequences,
    ingest,
    read_sequences,
    write_sequences,
    write_transactions,
)

PREDICTION_COLUMNS = ["customer_id", "lambda_hat", "survival_at_recency", "survival_at_horizon", "deferred_30_60"]
MODEL_KINDS = ("rnn", "km", "cox")


class PipelineError(RuntimeError):
    pass


@dataclass
class RunPaths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    transactions = property(lambda self: self.root / "transactions.csv")
    ground_truth = property(lambda self: self.root / "ground_truth.csv")
    manifest = property(lambda self: self.root / "manifest.json")
    model = property(lambda self: self.root / "model.json")
    train_log = property(lambda self: self.root / "train_log.csv")
    report = property(lambda self: self.root / "report.json")
    metrics = property(lambda self: self.root / "metrics.csv")

    def sequences(self, split: str) -> Path:
        return self.root / f"sequences_{split}.jsonl"

    def holdout(self, split: str) -> Path:
        return self.root / f"holdout_{split}.csv"

    def predictions(self, kind: str) -> Path:
        return self.root / f"predictions_{kind}.csv"

    def curves(self, kind: str) -> Path:
        return self.root / f"curves_{kind}.jsonl"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing input file {path} ({hint})")
    return path


# ------------------------------------------------------------------ simulate


def sim_config(cfg: RunConfig) -> SimConfig:
    return SimConfig(
        n_customers=cfg.n_customers,
        mu=cfg.mu,
        sigma=cfg.sigma,
        rate_floor=cfg.rate_floor,
        stop_prob=cfg.stop_prob,
        horizon_days=cfg.horizon_days,
        seed=cfg.seed,
        start_date=date.fromisoformat(cfg.start_date),
    )


def cmd_simulate(cfg: RunConfig) -> list[str]:
    paths = RunPaths(cfg.out)
    paths.root.mkdir(parents=True, exist_ok=True)
    customers, records = simulate(sim_config(cfg))
    write_transactions(paths.transactions, records)
    write_ground_truth(paths.ground_truth, customers)
    return sim_summary(customers).lines()


# ------------------------------------------------------------------- prepare


def split_of(customer_id: str, seed: int, train_frac: float, val_frac: float) -> str:
    """Deterministic split from a seeded hash of the customer id."""
    digest = hashlib.sha256(f"{seed}:{customer_id}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    if u < train_frac:
        return "train"
    if u < train_frac + val_frac:
        return "validation"
    return "unused"


def cmd_prepare(cfg: RunConfig) -> list[str]:
    paths = RunPaths(cfg.out)
    paths.root.mkdir(parents=True, exist_ok=True)
    source = Path(cfg.transactions) if cfg.transactions else paths.transactions
    records = ingest(_require(source, "run `simulate` or set transactions"))

    first = min(r.purchase_date for r in records)
    last = max(r.purchase_date for r in records)
    if cfg.analysis_date:
        analysis = date.fromisoformat(cfg.analysis_date)
    else:
        analysis = last - timedelta(days=cfg.min_performance_days)
    if not first <= analysis < last:
        raise PipelineError(
            f"analysis_date {analysis.isoformat()} outside data range "
            f"[{first.isoformat()}, {last.isoformat()})"
        )

    splits = {"train": [], "validation": []}
    assignment = {}
    for cid in sorted({r.customer_id for r in records}):
        s = split_of(cid, cfg.seed, cfg.train_frac, cfg.val_frac)
        assignment[cid] = s
        if s in splits:
            splits[s].append(cid)

    summary = []
    for split in ("train", "validation"):
        recs = [r for r in records if assignment[r.customer_id] == split]
        before = [r for r in recs if r.purchase_date <= analysis]
        after = [r for r in recs if r.purchase_date > analysis]
        seqs = build_sequences(before, analysis) if before else []
        write_sequences(paths.sequences(split), seqs)
        write_transactions(paths.holdout(split), after)
        summary.append(f"{split}: {len(splits[split])} customers, {len(seqs)} with history, {len(after)} holdout rows")

    manifest = {
        "seed": cfg.seed,
        "analysis_date": analysis.isoformat(),
        "data_start": first.isoformat(),
        "data_end": last.isoformat(),
        "performance_days": (last - analysis).days,
        "train_frac": cfg.train_frac,
        "val_frac": cfg.val_frac,
        "train": splits["train"],
        "validation": splits["validation"],
    }
    paths.manifest.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return [f"analysis date {analysis.isoformat()}, performance period {manifest['performance_days']} days"] + summary


def read_manifest(paths: RunPaths) -> dict:
    return json.loads(_require(paths.manifest, "run `prepare` first").read_text(encoding="utf-8"))


# --------------------------------------------------------------------- train


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        loss_kind=cfg.loss_kind,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        seed=cfg.seed,
        gradient_clip=cfg.gradient_clip,
        input_transform=cfg.input_transform,
        hidden=cfg.hidden,
        mlp_widths=cfg.widths,
        clamp=cfg.clamp,
        seq_len=cfg.seq_len,
        eps_gap=cfg.eps_gap,
    )


def cmd_train(cfg: RunConfig) -> list[str]:
    paths = RunPaths(cfg.out)
    seqs = read_sequences(_require(paths.sequences("train"), "run `prepare` first"))
    result = train(seqs, train_config(cfg))
    save_model(result.net, paths.model)
    result.write_log(paths.train_log)
    return [f"trained {cfg.epochs} epochs, final loss {result.epoch_losses[-1]:.6f}"]


# ------------------------------------------------------- predict / baseline


def _prediction_row(cid: str, curve, recency: float, horizon: float, rate: float | None) -> list:
    s = lambda t: float(curve(t))  # noqa: E731
    return [
        cid,
        "" if rate is None else repr(rate),
        repr(s(recency)),
        repr(s(horizon)),
        repr(s(30.0) - s(60.0)),
    ]


def _curve_json(cid: str, curve) -> str:
    if isinstance(curve, ExponentialSurvival):
        return json.dumps({"customer_id": cid, "kind": "exponential", "rate": curve.rate})
    return json.dumps(
        {"customer_id": cid, "kind": "step", "knots": curve.knots.tolist(), "values": curve.values.tolist()}
    )


def read_curves(path: Path) -> dict:
    curves = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj["kind"] == "exponential":
                curves[obj["customer_id"]] = ExponentialSurvival(obj["rate"])
            else:
                curves[obj["customer_id"]] = StepSurvivalCurve(obj["knots"], obj["values"])
    return curves


def write_predictions(paths: RunPaths, kind: str, seqs: list[CustomerSequence], curves: dict, horizon: float) -> None:
    with open(paths.predictions(kind), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_COLUMNS)
        for seq in seqs:
            curve = curves[seq.customer_id]
            rate = curve.rate if isinstance(curve, ExponentialSurvival) else None
            writer.writerow(_prediction_row(seq.customer_id, curve, seq.recency, horizon, rate))
    with open(paths.curves(kind), "w", encoding="utf-8") as fh:
        for seq in seqs:
            fh.write(_curve_json(seq.customer_id, curves[seq.customer_id]) + "\n")


def cmd_predict(cfg: RunConfig, split: str = "validation") -> list[str]:
    paths = RunPaths(cfg.out)
    net = load_model(_require(paths.model, "run `train` first"))
    seqs = read_sequences(_require(paths.sequences(split), "run `prepare` first"))
    curves = predict_rates(net, seqs)
    write_predictions(paths, "rnn", seqs, curves, cfg.horizon)
    return [f"rnn: scored {len(seqs)} {split} customers"]


def fit_cox_baseline(train_seqs: list[CustomerSequence], unit: str = "gap"):
    X, times, observed = cox_dataset(train_seqs, unit)
    return cox_fit(X, times, observed, names=COX_FEATURES)


def cmd_baseline(cfg: RunConfig, kind: str, split: str = "validation") -> list[str]:
    paths = RunPaths(cfg.out)
    seqs = read_sequences(_require(paths.sequences(split), "run `prepare` first"))
    if kind == "km":
        curves = {s.customer_id: per_customer_km(s) for s in seqs}
        lines = [f"km: scored {len(seqs)} {split} customers"]
    elif kind == "cox":
        model = fit_cox_baseline(read_sequences(_require(paths.sequences("train"), "run `prepare` first")), cfg.cox_unit)
        curves = {s.customer_id: model.survival_curve(cox_features(s)) for s in seqs}
        lines = [f"cox: beta={np.round(model.beta, 6).tolist()} after {model.n_iter} Newton steps"]
    else:
        raise PipelineError(f"unknown baseline kind {kind!r}; expected km or cox")
    write_predictions(paths, kind, seqs, curves, cfg.horizon)
    return lines


# ------------------------------------------------------------------ evaluate


def cmd_evaluate(cfg: RunConfig) -> list[str]:
    paths = RunPaths(cfg.out)
    manifest = read_manifest(paths)
    training = set(manifest["train"])
    analysis = date.fromisoformat(manifest["analysis_date"])
    holdout = ingest_or_empty(_require(paths.holdout("validation"), "run `prepare` first"))

    reports = {}
    rows = []
    for kind in MODEL_KINDS:
        if not paths.curves(kind).exists():
            continue
        curves = read_curves(paths.curves(kind))
        leaked = sorted(training & curves.keys())
        if leaked:
            raise PipelineError(
                f"{kind}: refusing to score {len(leaked)} customers from the training split (e.g. {leaked[0]})"
            )
        report = metrics.evaluate(
            curves, holdout, cfg.horizon, analysis, float(manifest["performance_days"]), grid_size=cfg.grid_size
        )
        reports[kind] = report
        rows.extend(report.rows(kind, cfg.dataset, "validation"))
    if not reports:
        raise PipelineError("no prediction curves found; run `predict` and/or `baseline` first")
    metrics.write_report_json(paths.report, reports)
    metrics.write_metrics_csv(paths.metrics, rows)
    out = []
    for kind, r in reports.items():
        out.append(
            f"{kind}: brier@{r.horizon:g}={r.brier_at[r.horizon]:.4f} ibs={r.ibs:.4f} "
            f"c={r.c_index:.4f} auc={r.cd_auc_at[r.horizon]:.4f} acc={r.binary.accuracy:.4f} "
            f"(n={r.n_subjects}, excluded={r.n_excluded})"
        )
    return out


def ingest_or_empty(path: Path):
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        if not fh.readline().strip():
            return []
    return ingest(path)


def run_all(cfg: RunConfig) -> list[str]:
    lines = []
    lines += cmd_simulate(cfg)
    lines += cmd_prepare(cfg)
    lines += cmd_train(cfg)
    lines += cmd_predict(cfg)
    lines += cmd_baseline(cfg, "km")
    lines += cmd_baseline(cfg, "cox")
    lines += cmd_evaluate(cfg)
    return lines
