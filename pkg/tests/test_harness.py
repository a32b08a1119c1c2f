import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from prevadapt.cli import main as cli_main
from prevadapt.harness import (
    ExperimentConfig,
    MetricsRow,
    SiteSpec,
    default_config,
    generate_datasets,
    read_results_csv,
    run_experiment,
    summarize,
    write_results_csv,
)
from prevadapt.semdata import EmissionConfig, SiteDataset
from prevadapt.train import TrainConfig
from prevadapt.adapt import EmConfig


def tiny_config(methods, seeds=(0,), out_dir="results"):
    return ExperimentConfig(
        sites=[
            SiteSpec("tr_a", "train", 0.9, 400),
            SiteSpec("tr_b", "train", 0.7, 400),
            SiteSpec("val", "validation", 0.5, 200),
            SiteSpec("test", "test", 0.3, 200),
        ],
        emission=EmissionConfig(dim=3),
        methods=list(methods),
        seeds=list(seeds),
        train=TrainConfig(epochs=4, batch_size=64, hidden=(16,), prevalence_hidden=(8,)),
        em=EmConfig(iterations=3, g_hidden=(8,)),
        out_dir=out_dir,
    )


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(sites=[SiteSpec("a", "train", 0.5, 10)])
    with pytest.raises(ValueError):
        tiny_config(["NOPE"])
    with pytest.raises(ValueError):
        tiny_config(["ERM"], seeds=())
    with pytest.raises(ValueError):
        SiteSpec("a", "holdout", 0.5, 10)


def test_config_json_roundtrip():
    cfg = default_config()
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


def test_metrics_row_validates_f1():
    with pytest.raises(ValueError):
        MetricsRow("ERM", "s", 0, 1.2, 0.0, 0.5, 0.1)


def test_single_method_single_seed_yields_one_row(tmp_path):
    cfg = tiny_config(["ERM"])
    rows, errors = run_experiment(cfg, out_dir=tmp_path)
    assert errors == []
    assert len(rows) == 1
    assert rows[0].method == "ERM" and rows[0].site == "test" and rows[0].seed == 0


def test_results_csv_schema(tmp_path):
    cfg = tiny_config(["ERM", "GPA"])
    run_experiment(cfg, out_dir=tmp_path)
    text = (tmp_path / "results.csv").read_text().splitlines()
    assert text[0] == "method,site,seed,f1,nll,p_y1_hat,seconds"
    assert len(text) == 3  # header + 2 methods
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["oracle_access"] == {"ERM": False, "GPA": False}
    assert manifest["n_errors"] == 0
    assert "calibration_nll_fitted" in manifest["per_seed"][0]


def test_all_methods_run(tmp_path):
    cfg = tiny_config(["ERM", "ERM_Z", "CoPA", "CoPA_star", "GPA", "GPA_star"], seeds=(0, 1))
    rows, errors = run_experiment(cfg, out_dir=tmp_path)
    assert errors == []
    assert len(rows) == 12
    # checkpoints, traces and training logs come along
    assert (tmp_path / "checkpoints" / "seed0" / "ratio.json").exists()
    assert (tmp_path / "checkpoints" / "seed0" / "prevalence_tr_a.json").exists()
    assert (tmp_path / "checkpoints" / "seed1" / "baseline_ERM.json").exists()
    assert (tmp_path / "traces" / "GPA_test_seed0.csv").exists()
    assert (tmp_path / "traces" / "GPA_star_test_seed1.csv").exists()
    assert (tmp_path / "logs" / "train_seed0.csv").exists()


def _strip_seconds(csv_text: str) -> str:
    lines = csv_text.strip().splitlines()
    return "\n".join(",".join(line.split(",")[:-1]) for line in lines)


def test_repeated_runs_identical_results(tmp_path):
    cfg = tiny_config(["ERM", "GPA"], seeds=(0, 1))
    run_experiment(cfg, out_dir=tmp_path / "a")
    run_experiment(cfg, out_dir=tmp_path / "b")
    a = _strip_seconds((tmp_path / "a" / "results.csv").read_text())
    b = _strip_seconds((tmp_path / "b" / "results.csv").read_text())
    assert a == b


def test_thread_count_does_not_change_results(tmp_path):
    cfg = tiny_config(["ERM", "GPA"], seeds=(0, 1))
    run_experiment(cfg, out_dir=tmp_path / "serial", threads=1)
    run_experiment(cfg, out_dir=tmp_path / "parallel", threads=2)
    a = _strip_seconds((tmp_path / "serial" / "results.csv").read_text())
    b = _strip_seconds((tmp_path / "parallel" / "results.csv").read_text())
    assert a == b


def test_summarize_single_seed_zero_stderr(tmp_path):
    rows = [MetricsRow("ERM", "s", 0, 0.5, 1.0, 0.3, 0.01)]
    (tmp_path / "results.csv").parent.mkdir(exist_ok=True)
    write_results_csv(tmp_path / "results.csv", rows)
    summary = summarize(tmp_path)
    assert summary[0]["stderr"] == 0.0
    assert summary[0]["n_seeds"] == 1


def test_summarize_hand_arithmetic(tmp_path):
    rows = [
        MetricsRow("ERM", "s", 0, 0.4, 1.0, 0.3, 0.01),
        MetricsRow("ERM", "s", 1, 0.6, 1.0, 0.3, 0.01),
    ]
    write_results_csv(tmp_path / "results.csv", rows)
    summary = summarize(tmp_path)
    assert summary[0]["mean_f1"] == pytest.approx(0.5)
    assert summary[0]["stderr"] == pytest.approx(0.1)


def test_summarize_matches_independent_computation(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    values = {}
    for method in ("A_method", "B_method"):
        vals = rng.uniform(0.2, 0.9, size=5)
        values[method] = vals
        rows += [MetricsRow("GPA", f"{method}", s, float(v), 1.0, 0.5, 0.0) for s, v in enumerate(vals)]
    write_results_csv(tmp_path / "results.csv", rows)
    for entry in summarize(tmp_path):
        vals = values[entry["site"]]
        assert entry["mean_f1"] == pytest.approx(np.mean(vals))
        assert entry["stderr"] == pytest.approx(np.std(vals, ddof=1) / np.sqrt(5))


def test_summarize_empty_rejected(tmp_path):
    write_results_csv(tmp_path / "results.csv", [])
    with pytest.raises(ValueError):
        summarize(tmp_path)


def test_failed_cell_recorded_not_fatal(tmp_path, monkeypatch):
    import prevadapt.harness as harness

    def broken(*a, **k):
        raise RuntimeError("em exploded")

    monkeypatch.setattr(harness, "em_conditional_prevalence", broken)
    cfg = tiny_config(["ERM", "GPA"])
    rows, errors = run_experiment(cfg, out_dir=tmp_path)
    assert len(rows) == 1 and rows[0].method == "ERM"
    assert len(errors) == 1 and errors[0][0] == "GPA" and "em exploded" in errors[0][3]
    assert (tmp_path / "errors.csv").exists()


def test_generate_datasets(tmp_path):
    cfg = tiny_config(["ERM"], seeds=(0, 1))
    written = generate_datasets(cfg, tmp_path)
    assert len(written) == 8  # 4 sites x 2 seeds
    ds = SiteDataset.load_csv(tmp_path / "seed0" / "tr_a.csv")
    assert ds.n == 400
    assert ds.x.shape[1] == 3
    again = generate_datasets(cfg, tmp_path / "again")
    assert (tmp_path / "seed0" / "tr_a.csv").read_text() == (tmp_path / "again" / "seed0" / "tr_a.csv").read_text()


def test_cli_run_and_summarize(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_config(["ERM", "GPA"]).to_dict()))
    out_dir = tmp_path / "out"
    rc = cli_main(["run", "--config", str(cfg_path), "--out", str(out_dir)])
    assert rc == 0
    assert (out_dir / "results.csv").exists()
    rc = cli_main(["summarize", "--in", str(out_dir)])
    assert rc == 0
    captured = capsys.readouterr()
    assert "mean_f1" in captured.out
    assert (out_dir / "summary.csv").exists()


def test_cli_seed_override(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_config(["ERM"], seeds=(0, 1, 2)).to_dict()))
    out_dir = tmp_path / "out"
    rc = cli_main(["run", "--config", str(cfg_path), "--out", str(out_dir), "--seeds", "3"])
    assert rc == 0
    records = read_results_csv(out_dir / "results.csv")
    assert [r["seed"] for r in records] == ["3"]


def test_cli_gen(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_config(["ERM"]).to_dict()))
    rc = cli_main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "data")])
    assert rc == 0
    assert (tmp_path / "data" / "seed0" / "test.csv").exists()
    assert (tmp_path / "data" / "manifest.json").exists()


def test_cli_nonzero_exit_on_cell_failure(tmp_path, monkeypatch):
    import prevadapt.harness as harness

    monkeypatch.setattr(harness, "em_conditional_prevalence",
                        lambda *a, **k: (_ for _ in ()).throw(RuntimeError("boom")))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_config(["GPA"]).to_dict()))
    rc = cli_main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "out")])
    assert rc == 1


def test_cli_entry_point_via_subprocess(tmp_path):
    result = subprocess.run(
        [sys.executable, "-m", "prevadapt.cli", "run", "--help"],
        capture_output=True, text=True,
    )
    assert result.returncode == 0
    assert "--threads" in result.stdout
