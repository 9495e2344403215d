import json

import pytest

from dorar import cli
from dorar import evaluation as E


def run(*args):
    return cli.main([str(a) for a in args])


def test_invalid_dataset_is_usage_error(capsys):
    assert run("train-blackbox", "--dataset", "imagenet") == 2
    assert "usage" in capsys.readouterr().err


def test_missing_command_and_bad_flag():
    assert run() == 2
    assert run("evaluate", "--bogus", "1") == 2


def test_missing_blackbox_is_usage_error(tmp_path):
    assert run("evaluate", "--dataset", "synthetic", "--out", tmp_path) == 2


def test_missing_dataset_is_runtime_error(tmp_path, monkeypatch):
    monkeypatch.setenv("DORAR_DATA_DIR", str(tmp_path / "nothing"))
    assert run("train-blackbox", "--dataset", "mnist", "--out", tmp_path) == 1


def test_verify_infotheory(tmp_path, capsys):
    assert run("verify-infotheory", "--trials", 50, "--out", tmp_path) == 0
    manifest = json.loads((tmp_path / "verify-infotheory.manifest.json").read_text())
    assert manifest["max_identity_residual"] < 1e-10 and manifest["xor_coinformation"] == -1.0
    assert manifest["version"].startswith("0.1.0")
    assert (tmp_path / "infotheory.csv").read_text().startswith("trial,lhs,rhs")


def test_compare_published_rows(tmp_path, capsys):
    a, b = tmp_path / "dorar.csv", tmp_path / "grad.csv"
    E.append_results(a, [E.EvaluationRecord("dorar", 4, "4x4", 0.8130, 0.0044, 0.8818, 0.0048, 5, "mnist")])
    E.append_results(b, [E.EvaluationRecord("grad", 4, "4x4", 0.1807, 0.0033, 0.9081, 0.0045, 5, "mnist")])
    assert run("compare", "--a", a, "--b", b, "--basis", "partial-order", "--out", tmp_path) == 0
    assert "first_better" in capsys.readouterr().out
    assert (tmp_path / "comparison.csv").read_text().splitlines()[1] == "dorar,grad,partial-order,first_better"
    assert run("compare", "--a", a, "--out", tmp_path) == 2


def test_config_file_with_flag_override(tmp_path):
    conf = tmp_path / "c.config"
    conf.write_text("trials = 3\nseed = 4\n")
    assert run("verify-infotheory", "--config", conf, "--seed", 9, "--out", tmp_path) == 0
    rerun = (tmp_path / "verify-infotheory.config").read_text()
    assert "trials = 3" in rerun and "seed = 9" in rerun
    conf.write_text("nonsense = 1\n")
    assert run("verify-infotheory", "--config", conf, "--out", tmp_path) == 2


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    data = root / "data"
    assert run("synth-gen", "--data", data, "--samples-per-user", 30, "--seed", 1, "--out", root) == 0
    assert run("train-blackbox", "--dataset", "synthetic", "--data", data, "--epochs", 8, "--seed", 1,
               "--accuracy-floor", 0.9, "--out", root) == 0
    return root, data, root / "blackbox-synthetic-1.ckpt"


def test_synth_gen_and_blackbox(synthetic_run):
    root, data, ckpt = synthetic_run
    assert (data / "train.csv").exists() and (data / "test.csv").exists()
    assert ckpt.exists()
    acc = float((root / "accuracy.csv").read_text().splitlines()[1].split(",")[-1])
    assert acc >= 0.9
    manifest = json.loads((root / "train-blackbox.manifest.json").read_text())
    assert manifest["seeds"] == [1] and manifest["wall_time_s"] > 0


def test_accuracy_floor_failure(synthetic_run, tmp_path):
    _, data, _ = synthetic_run
    assert run("train-blackbox", "--dataset", "synthetic", "--data", data, "--epochs", 1,
               "--accuracy-floor", 1.01, "--out", tmp_path) == 1
    assert (tmp_path / "accuracy.csv").exists()


def test_selector_records_feed_evaluate(synthetic_run, tmp_path):
    root, data, ckpt = synthetic_run
    common = ["--dataset", "synthetic", "--data", data, "--blackbox", ckpt, "--n-e", 4]
    assert run("train-selector", *common, "--steps", 3, "--out", tmp_path) == 0
    attributions = tmp_path / "attributions.csv"
    assert attributions.exists() and (tmp_path / "train.log").exists()
    quick = ["--reps", 1, "--retrain-epochs", 1, "--eval-max-train", 200]
    assert run("evaluate", *common, "--method", "dorar", "--selector", tmp_path / "selector-synthetic-0.ckpt",
               *quick, "--out", tmp_path / "a") == 0
    assert run("evaluate", *common, "--method", "records", "--records", attributions, *quick,
               "--out", tmp_path / "b") == 0
    ra = E.read_results(tmp_path / "a" / "results.csv")[0]
    rb = E.read_results(tmp_path / "b" / "results.csv")[0]
    assert (ra.a1_mean, ra.a2_mean) == (rb.a1_mean, rb.a2_mean)
    assert run("explain", *common, "--method", "dorar", "--selector", tmp_path / "selector-synthetic-0.ckpt",
               "--indices", "0,1", "--out", tmp_path / "png") == 0
    assert len(list((tmp_path / "png").glob("*.png"))) == 2


def test_evaluate_with_workers_matches_serial(synthetic_run, tmp_path):
    root, data, ckpt = synthetic_run
    args = ["evaluate", "--dataset", "synthetic", "--data", data, "--blackbox", ckpt, "--method", "random",
            "--n-e", 4, "--reps", 2, "--retrain-epochs", 1, "--eval-max-train", 200]
    assert run(*args, "--out", tmp_path / "s") == 0
    assert run(*args, "--workers", 2, "--out", tmp_path / "p") == 0
    assert E.read_results(tmp_path / "s" / "results.csv") == E.read_results(tmp_path / "p" / "results.csv")
    row = (tmp_path / "s" / "results.csv").read_text().splitlines()[1]
    assert row.split(",")[-1] == "0;1"
