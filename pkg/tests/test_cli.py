import csv
import json

import numpy as np
import pytest

from affect_e2e import synth
from affect_e2e.cli import main, read_predictions, write_predictions


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth-data", "--seed", "4", "--train", "2", "--validation", "1", "--test", "1", "--duration", "6", "--out", str(root)]) == 0
    return root


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_usage_errors(capsys, data, tmp_path):
    assert main(["train", "--modality", "speech", "--data", str(data), "--out", str(tmp_path), "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["train", "--modality", "smell", "--data", str(data), "--out", str(tmp_path)]) == 1
    assert main(["train", "--modality", "speech", "--seq-len", "100", "--data", str(data), "--out", str(tmp_path)]) == 1
    assert main(["eval", "--data", str(data), "--out", str(tmp_path)]) == 1
    assert main(["--help"]) == 0


def test_data_errors(data, tmp_path):
    assert main(["train", "--modality", "speech", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    assert main(["eval", "--predictions", str(tmp_path), "--data", str(data), "--out", str(tmp_path / "e")]) == 2
    (tmp_path / "chains.json").write_text("[]")
    assert main(["postprocess-apply", "--chains", str(tmp_path / "chains.json"), "--predictions", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_eval_on_oracle_predictions_is_perfect(data, tmp_path):
    ds = synth.read_dataset(data)
    for i in ds.ids:
        write_predictions(tmp_path / "pred" / f"{i}.csv", ds[i].trajectory.gold)
    assert main(["eval", "--predictions", str(tmp_path / "pred"), "--data", str(data), "--split", "test", "--out", str(tmp_path / "ev")]) == 0
    table = rows(tmp_path / "ev" / "eval.csv")
    assert [r["dimension"] for r in table] == ["arousal", "valence"]
    for r in table:
        assert float(r["rho_c"]) == pytest.approx(1.0, abs=1e-12)
        assert float(r["rho_c_postprocessed"]) == pytest.approx(1.0, abs=1e-12)


def test_prediction_csv_round_trip(tmp_path):
    pred = np.random.default_rng(0).uniform(-1, 1, size=(150, 2))
    write_predictions(tmp_path / "r.csv", pred)
    np.testing.assert_array_equal(read_predictions(tmp_path, ["r"])["r"], pred)


def test_postprocess_fit_and_apply(data, tmp_path):
    ds = synth.read_dataset(data)
    for i in ds.ids:
        gold = ds[i].trajectory.gold
        write_predictions(tmp_path / "pred" / f"{i}.csv", 0.5 * gold + 0.1)
    chains = tmp_path / "chains.json"
    assert main(["postprocess-fit", "--predictions", str(tmp_path / "pred"), "--data", str(data), "--out", str(chains)]) == 0
    body = json.loads(chains.read_text())
    assert set(body) == {"arousal", "valence"}
    assert main(["postprocess-apply", "--chains", str(chains), "--predictions", str(tmp_path / "pred"), "--out", str(tmp_path / "post")]) == 0
    fixed = read_predictions(tmp_path / "post", ds.ids)
    val = ds.split["validation"][0]
    np.testing.assert_allclose(fixed[val], ds[val].trajectory.gold, atol=1e-12)


def test_train_mse_then_eval_reports_rho(data, tmp_path):
    out = tmp_path / "run"
    argv = ["train", "--modality", "speech", "--objective", "mse", "--epochs", "1", "--audio-batch", "2",
            "--hidden-size", "8", "--data", str(data), "--out", str(out)]
    assert main(argv) == 0
    assert {p.name for p in out.iterdir()} == {"checkpoint", "metrics.csv", "run.json"}
    run = json.loads((out / "run.json").read_text())
    assert run["seed"] == 0 and run["train_config"]["objective"] == "mse"
    assert main(["eval", "--model", str(out / "checkpoint"), "--data", str(data), "--out", str(tmp_path / "ev")]) == 0
    for r in rows(tmp_path / "ev" / "eval.csv"):
        assert -1.0 <= float(r["rho_c"]) <= 1.0
    assert (tmp_path / "ev" / "predictions" / "rec_002.csv").exists()


def test_analyze_gates_writes_report(data, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--modality", "speech", "--epochs", "0", "--hidden-size", "4", "--data", str(data), "--out", str(out)]) == 0
    assert main(["analyze-gates", "--model", str(out / "checkpoint"), "--data", str(data), "--out", str(tmp_path / "g")]) == 0
    table = rows(tmp_path / "g" / "gate_correlations.csv")
    assert len(table) == 2 * 4 * 4
    first = (tmp_path / "g" / "gate_correlations.csv").read_bytes()
    assert main(["analyze-gates", "--model", str(out / "checkpoint"), "--data", str(data), "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "gate_correlations.csv").read_bytes() == first
