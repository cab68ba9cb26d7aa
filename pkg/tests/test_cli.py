import json

import pytest
import yaml

from dynafs.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NOT_CONVERGED, EXIT_OK, main

SMALL = dict(n_subjects=60, n_features=5, n_informative=2, n_static=1, tick_min=5, tick_max=7, gbdt_trees=10,
             gbdt_min_leaf=5, hidden=8, rollout_ticks=128, min_steps=300, max_steps=600, c_max=3.0, t_max=8)


def _config(tmp_path, **kw):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump({**SMALL, **kw}))
    return str(p)


def test_gen_data_writes_csvs(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", _config(tmp_path), "--out-dir", str(out)]) == EXIT_OK
    for name in ("events.csv", "labels.csv", "schema.csv", "dataset.json"):
        assert (out / name).exists()
    assert json.loads((out / "dataset.json").read_text())["n_subjects"] == 60
    assert "wrote 60 subjects" in capsys.readouterr().out


def test_generated_csvs_round_trip_through_csv_source(tmp_path):
    out = tmp_path / "data"
    main(["gen-data", "--config", _config(tmp_path), "--out-dir", str(out)])
    cfg = _config(tmp_path, data_source="csv", events_path=str(out / "events.csv"),
                  schema_path=str(out / "schema.csv"), labels_path=str(out / "labels.csv"))
    assert main(["train-predictor", "--config", cfg, "--out-dir", str(tmp_path / "p")]) == EXIT_OK
    assert (tmp_path / "p" / "predictor_pretrained.json").exists()


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["run", "--config", _config(tmp_path, c_max=-1.0), "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("no_such_key: 1\n")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG


def test_data_error_exit_code(tmp_path, capsys):
    cfg = _config(tmp_path, data_source="csv", events_path=str(tmp_path / "missing.csv"),
                  schema_path=str(tmp_path / "missing_schema.csv"), labels_path=str(tmp_path / "l.csv"))
    assert main(["run", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == EXIT_DATA
    assert "data error" in capsys.readouterr().err


def test_viz_without_inputs_is_data_error(tmp_path):
    assert main(["viz", "--config", _config(tmp_path), "--out-dir", str(tmp_path / "empty")]) == EXIT_DATA


def test_stagewise_verbs_and_viz(tmp_path):
    cfg, out = _config(tmp_path), str(tmp_path / "o")
    assert main(["train-predictor", "--config", cfg, "--out-dir", out]) == EXIT_OK
    assert main(["train-policy", "--config", cfg, "--out-dir", out]) in (EXIT_OK, EXIT_NOT_CONVERGED)
    assert main(["retrain-predictor", "--config", cfg, "--out-dir", out]) == EXIT_OK
    assert main(["viz", "--config", cfg, "--out-dir", out, "--mode", "deterministic"]) == EXIT_OK
    for name in ("policy.json", "history.jsonl", "predictor.json", "activation.csv", "activation.svg"):
        assert (tmp_path / "o" / name).exists()


def test_run_and_seed_override(tmp_path, capsys):
    out = tmp_path / "o"
    code = main(["run", "--config", _config(tmp_path), "--out-dir", str(out), "--seed", "4"])
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    assert "test cost" in capsys.readouterr().out
    assert (out / "metrics.json").exists()


@pytest.mark.parametrize("method,selector", [("permutation", "topk"), ("lasso", "knapsack")])
def test_baseline_verb(tmp_path, method, selector):
    out = tmp_path / "o"
    assert main(["baseline", "--config", _config(tmp_path), "--out-dir", str(out),
                 "--method", method, "--selector", selector]) == EXIT_OK
    res = json.loads((out / f"baseline_{method}.json").read_text())
    assert res["selector"] == selector and res["test"]["cost"] >= 0
    assert (out / f"baseline_{method}.csv").exists()


def test_l1_svm_on_regression_is_data_error(tmp_path):
    assert main(["baseline", "--config", _config(tmp_path), "--out-dir", str(tmp_path / "o"),
                 "--method", "l1_svm"]) == EXIT_DATA


def test_sweep_writes_curve(tmp_path):
    out = tmp_path / "o"
    code = main(["sweep", "--config", _config(tmp_path), "--out-dir", str(out), "--c-max", "4,2"])
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    assert (out / "curve.csv").exists() and (out / "curve.svg").read_text().startswith("<svg")


def test_unknown_verb_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2
