import csv
import json
import shutil
import subprocess
import sys

import pytest

from churnsurv import cli
from churnsurv.config import ConfigError, RunConfig, load_config, read_config_file
from churnsurv.pipeline import MODEL_KINDS, PREDICTION_COLUMNS, PipelineError, RunPaths, cmd_evaluate, cmd_prepare, split_of
from churnsurv.transactions import ingest, read_sequences


def test_config_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nseed = 4\nepochs = 3   # trailing\nloss_kind = weighted_asymmetric\n")
    cfg = load_config(path, {"epochs": "9"})
    assert (cfg.seed, cfg.epochs, cfg.loss_kind) == (4, 9, "weighted_asymmetric")
    assert cfg.learning_rate == RunConfig().learning_rate
    assert read_config_file(path)["epochs"] == "3"


@pytest.mark.parametrize(
    "text, fragment",
    [("nonsense\n", "key = value"), ("bogus = 1\n", "unknown config key"), ("epochs = many\n", "cannot parse")],
)
def test_config_errors(tmp_path, text, fragment):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError, match=fragment):
        load_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.cfg")


def test_split_is_seeded_and_stable():
    ids = [f"c{k:04d}" for k in range(2000)]
    a = [split_of(c, 0, 0.8, 0.2) for c in ids]
    assert a == [split_of(c, 0, 0.8, 0.2) for c in ids]
    assert a != [split_of(c, 1, 0.8, 0.2) for c in ids]
    assert abs(a.count("train") / 2000 - 0.8) < 0.03
    assert set(split_of(c, 0, 0.5, 0.2) for c in ids) == {"train", "validation", "unused"}


def test_small_run_outputs(small_run):
    cfg, lines = small_run
    paths = RunPaths(cfg.out)
    manifest = json.loads(paths.manifest.read_text())
    train_ids, val_ids = set(manifest["train"]), set(manifest["validation"])
    assert train_ids and val_ids and not train_ids & val_ids

    for kind in MODEL_KINDS:
        with open(paths.predictions(kind), newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == PREDICTION_COLUMNS
        ids = {r[0] for r in rows[1:]}
        assert ids <= val_ids and ids == {s.customer_id for s in read_sequences(paths.sequences("validation"))}
        for r in rows[1:]:
            assert all(0.0 <= float(v) <= 1.0 for v in r[2:])

    # holdout rows lie strictly after the analysis date, sequences end at it
    for rec in ingest(paths.holdout("validation")):
        assert rec.purchase_date.isoformat() > manifest["analysis_date"]
    assert paths.metrics.exists() and paths.train_log.exists()
    assert any(line.startswith("rnn:") for line in lines)


def test_evaluate_refuses_training_customers(small_run, tmp_path):
    cfg, _ = small_run
    out = tmp_path / "copy"
    shutil.copytree(cfg.out, out)
    paths = RunPaths(out)
    leaked = json.loads(paths.manifest.read_text())["train"][0]
    with open(paths.curves("km"), "a") as fh:
        fh.write(json.dumps({"customer_id": leaked, "kind": "exponential", "rate": 0.1}) + "\n")
    with pytest.raises(PipelineError, match="training split"):
        cmd_evaluate(load_config(overrides={"out": str(out)}))


def test_prepare_rejects_out_of_range_analysis_date(small_run, tmp_path):
    cfg, _ = small_run
    over = {"out": str(tmp_path), "transactions": str(RunPaths(cfg.out).transactions), "analysis_date": "2030-01-01"}
    with pytest.raises(PipelineError, match="outside data range"):
        cmd_prepare(load_config(overrides=over))


@pytest.mark.parametrize("command", ["prepare", "train", "predict", "evaluate"])
def test_cli_missing_inputs_fail_on_one_line(tmp_path, capsys, command):
    code = cli.main([command, "--out", str(tmp_path / "empty"), "-q"])
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 1
    assert len(err) == 1 and err[0].startswith("error: ") and "missing input file" in err[0]


def test_cli_baseline_requires_kind(capsys):
    with pytest.raises(SystemExit):
        cli.main(["baseline"])


def test_cli_bad_override(tmp_path, capsys):
    assert cli.main(["simulate", "--out", str(tmp_path), "--set", "epochs"]) == 1
    assert "KEY=VALUE" in capsys.readouterr().err


def test_cli_end_to_end_subprocess(tmp_path):
    out = tmp_path / "run"
    base = [sys.executable, "-m", "churnsurv"]
    opts = ["--out", str(out), "--seed", "2", "--set", "n_customers=400", "--set", "epochs=1", "-q"]
    for step in (["simulate"], ["prepare"], ["train"], ["predict"], ["baseline", "--kind", "km"], ["evaluate"]):
        proc = subprocess.run(base + step + opts, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
    assert "rnn:" in proc.stdout and "km:" in proc.stdout and "cox:" not in proc.stdout


def test_cli_echoes_config(tmp_path, capsys):
    assert cli.main(["simulate", "--out", str(tmp_path), "--set", "n_customers=5"]) == 0
    err = capsys.readouterr().err
    assert "# n_customers = 5" in err
