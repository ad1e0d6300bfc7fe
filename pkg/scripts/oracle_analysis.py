"""Model-free reference numbers for the synthetic generator.

    python3 scripts/oracle_analysis.py RUN_DIR

RUN_DIR is a finished run (see run_synthetic.py). The script prints

* the mean inter-arrival time implied by the rate distribution, 1/E[rate]
  versus E[1/rate], next to the pooled mean gap of the simulated log;
* rank correlations with the true rate reachable by simple per-customer
  estimators that ignore the network entirely;
* integrated Brier scores of exponential curves built from the true rates,
  which bound what an exact rate estimate can achieve on this data.
"""

import json
import sys
from datetime import date

import numpy as np

from churnsurv.metrics import build_subjects, integrated_brier, subject_censoring_curve
from churnsurv.pipeline import RunPaths, ingest_or_empty, read_curves
from churnsurv.simulate import read_ground_truth
from churnsurv.survival import ExponentialSurvival
from churnsurv.transactions import group_by_customer, ingest


def spearman(a, b):
    ra = np.argsort(np.argsort(a))
    rb = np.argsort(np.argsort(b))
    return float(np.corrcoef(ra, rb)[0, 1])


def gap_means(cfg_mu=0.08, cfg_sigma=0.02, floor=0.01, n=4_000_000, seed=0):
    rates = np.maximum(floor, np.random.default_rng(seed).normal(cfg_mu, cfg_sigma, n))
    return 1 / rates.mean(), float(np.mean(1 / rates))


def main(run_dir):
    paths = RunPaths(run_dir)
    manifest = json.loads(paths.manifest.read_text())
    truth = read_ground_truth(paths.ground_truth)

    inv_mean, mean_inv = gap_means()
    dates = group_by_customer(ingest(paths.transactions))
    pooled = np.concatenate([np.diff([d.toordinal() for d in ds]) for ds in dates.values()]).mean()
    print("mean gap")
    print(f"  1 / E[rate]        {inv_mean:8.3f} days")
    print(f"  E[1 / rate]        {mean_inv:8.3f} days")
    print(f"  simulated, pooled  {pooled:8.3f} days")

    seqs = [s for s in (json.loads(line) for line in open(paths.sequences("validation"))) if len(s["times"]) >= 5]
    true = [truth[s["customer_id"]][0] for s in seqs]
    estimators = {
        "censored MLE, last 7 entries incl. tail": lambda t, d: sum(d[-7:]) / max(sum(t[-7:]), 1e-9),
        "inverse mean of last 6 observed gaps": lambda t, d: 1 / max(np.mean(t[:-1][-6:]), 0.5),
        "inverse mean of all observed gaps": lambda t, d: 1 / max(np.mean(t[:-1]), 0.5),
    }
    print(f"\nSpearman with the true rate, {len(seqs)} validation customers with >= 5 purchases")
    for name, f in estimators.items():
        est = [f(s["times"], s["observed"]) for s in seqs]
        print(f"  {name:42s} {spearman(est, true):+.4f}")
    rnn = read_curves(paths.curves("rnn"))
    print(f"  {'trained network':42s} {spearman([rnn[s['customer_id']].rate for s in seqs], true):+.4f}")

    analysis = date.fromisoformat(manifest["analysis_date"])
    period = float(manifest["performance_days"])
    holdout = ingest_or_empty(paths.holdout("validation"))
    ids = list(read_curves(paths.curves("km")))

    def ibs(curves, t_max=100.0):
        subjects = build_subjects(curves, holdout, analysis, period)
        return integrated_brier(subjects, t_max, 100, subject_censoring_curve(subjects))

    print("\nintegrated Brier score on validation, t_max = 100")
    for kind in ("rnn", "km", "cox"):
        print(f"  {kind:38s} {ibs(read_curves(paths.curves(kind))):.4f}")
    print(f"  {'exponential at the true rate':38s} {ibs({c: ExponentialSurvival(truth[c][0]) for c in ids}):.4f}")
    returned = len({r.customer_id for r in holdout} & set(ids)) / len(ids)
    print(f"\nshare of validation customers purchasing in the performance period: {returned:.3f}")


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(sys.argv[1])
