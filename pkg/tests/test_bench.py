"""Experiment configs, runner outputs, reports, and the CLI."""

import json
import math
import os

import numpy as np
import pytest

from fedunlab.bench import (
    ExperimentConfig,
    MetricsRow,
    convergence_summary,
    divergence_risk,
    draw_random_sample_requests,
    plateau_improvement_test,
    run_experiment,
    unlearning_efficiency_report,
)
from fedunlab.cli import main as cli_main
from fedunlab.data import UnlearnRequest, generate_synthetic
from fedunlab.errors import InvalidArgumentError
from fedunlab.unlearn import NOOP, PARTIAL_RETRAIN, UnlearnOutcome


def _config_dict(output_dir, **overrides):
    raw = {
        "dataset": {"num_clients": 3, "samples_per_client": 4, "dim": 2,
                    "classes": 2, "beta": 0.5, "seed": 1},
        "loss": "quadratic",
        "hyper": {"total_steps": 8, "local_steps": 2, "rho_sample": 0.5,
                  "rho_client": 0.5, "lr": 0.05},
        "repeats": 1,
        "seed_base": 3,
        "output_dir": output_dir,
    }
    raw.update(overrides)
    return raw


# ----------------------------------------------------------------------
# config parsing


def test_config_from_dict_defaults(tmp_path):
    config = ExperimentConfig.from_dict(_config_dict(str(tmp_path)))
    assert config.total_steps == 8
    assert config.lr == 0.05
    assert config.requests == []
    assert config.storage_mode == "full_history"


def test_config_missing_field_names_path(tmp_path):
    raw = _config_dict(str(tmp_path))
    del raw["hyper"]["total_steps"]
    with pytest.raises(InvalidArgumentError, match="hyper.total_steps"):
        ExperimentConfig.from_dict(raw)


def test_config_auto_lr(tmp_path):
    raw = _config_dict(str(tmp_path))
    raw["hyper"]["lr"] = "auto"
    config = ExperimentConfig.from_dict(raw)
    assert config.lr is None


def test_config_parses_request_list(tmp_path):
    raw = _config_dict(str(tmp_path))
    raw["requests"] = [
        {"kind": "sample", "client": 1, "uid": 5, "issue_step": 8},
        {"kind": "client", "client": 2},
    ]
    config = ExperimentConfig.from_dict(raw)
    assert config.requests[0] == UnlearnRequest(
        kind="sample", target_client=1, target_uid=5, issue_step=8
    )
    assert config.requests[1].target_uid is None
    assert config.requests[1].issue_step == 8  # defaults to total_steps


def test_config_parses_random_requests(tmp_path):
    raw = _config_dict(str(tmp_path))
    raw["requests"] = {"random_samples": 4, "seed": 11}
    config = ExperimentConfig.from_dict(raw)
    assert config.random_sample_requests == 4
    assert config.request_seed == 11


def test_config_from_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(_config_dict(str(tmp_path))))
    config = ExperimentConfig.from_file(str(path))
    assert config.dataset_clients == 3


# ----------------------------------------------------------------------
# runner


def test_run_experiment_writes_files(tmp_path):
    raw = _config_dict(str(tmp_path / "out"))
    raw["requests"] = {"random_samples": 2, "seed": 4}
    raw["repeats"] = 2
    config = ExperimentConfig.from_dict(raw)
    results = run_experiment(config)
    assert len(results) == 2
    for result in results:
        assert len(result.metrics) == 4  # rounds
        assert len(result.outcomes) == 2
        assert sorted(os.listdir(result.run_dir)) == [
            "metrics.csv", "outcomes.csv", "timings.csv",
        ]


def test_run_experiment_metrics_deterministic(tmp_path):
    """metrics.csv and outcomes.csv are byte-identical across re-runs;
    wall-clock numbers live in timings.csv and the outcomes wall column."""
    contents = []
    for attempt in range(2):
        out = str(tmp_path / f"attempt_{attempt}")
        raw = _config_dict(out)
        raw["requests"] = {"random_samples": 2, "seed": 4}
        config = ExperimentConfig.from_dict(raw)
        results = run_experiment(config)
        with open(os.path.join(results[0].run_dir, "metrics.csv"), "rb") as f:
            metrics = f.read()
        with open(os.path.join(results[0].run_dir, "outcomes.csv")) as f:
            lines = f.read().splitlines()
        stripped = [",".join(line.split(",")[:-1]) for line in lines]
        contents.append((metrics, stripped))
    assert contents[0][0] == contents[1][0]
    assert contents[0][1] == contents[1][1]


def test_run_experiment_auto_lr_satisfies_condition(tmp_path):
    raw = _config_dict(str(tmp_path / "out"))
    raw["hyper"]["lr"] = "auto"
    config = ExperimentConfig.from_dict(raw)
    results = run_experiment(config, write_files=False)
    assert results[0].hyper.lr > 0
    for row in results[0].metrics:
        assert row.lr_condition_margin < 0


def test_draw_random_sample_requests_distinct():
    dataset = generate_synthetic(
        num_clients=3, samples_per_client=4, dim=1, classes=2, beta=0.5, seed=2
    )
    requests = draw_random_sample_requests(dataset, 5, seed=1, issue_step=10)
    uids = [r.target_uid for r in requests]
    assert len(set(uids)) == 5
    for request in requests:
        assert dataset.client(request.target_client).has_uid(request.target_uid)


# ----------------------------------------------------------------------
# reports


def _metric(run, round_index, grad, avg):
    return MetricsRow(
        run=run, round=round_index, iteration=2 * round_index,
        grad_norm_sq=grad, avg_grad_norm_sq=avg, loss=1.0, diversity=1.5,
        lr_condition_margin=-0.1, rho_sample_realized=0.5,
        rho_client_realized=0.5, curvature_ratio=2.0,
    )


def test_convergence_summary():
    rows = [_metric(0, r, grad=1.0 / r, avg=sum(1.0 / i for i in range(1, r + 1)) / r)
            for r in range(1, 9)]
    summary = convergence_summary(rows)
    assert summary["runs"] == 1
    assert summary["rounds"] == 8
    assert summary["mean_plateau"] == pytest.approx(
        np.mean([1.0 / 7, 1.0 / 8])
    )
    with pytest.raises(InvalidArgumentError):
        convergence_summary([])


def test_plateau_improvement_test():
    small = [1.0, 1.1, 0.9, 1.05, 1.2, 0.95, 1.0, 1.1]
    large = [0.5, 0.55, 0.45, 0.5, 0.6, 0.48, 0.52, 0.5]
    pvalue, significant = plateau_improvement_test(small, large)
    assert significant and pvalue < 0.05
    with pytest.raises(InvalidArgumentError):
        plateau_improvement_test([1.0], [1.0, 2.0])


def test_divergence_risk():
    assert divergence_risk(local_steps=50, total_steps=100,
                           curvature_ratio=0.01, diversity=4.0)
    assert not divergence_risk(local_steps=1, total_steps=1000,
                               curvature_ratio=1.0, diversity=2.0)


def _outcome(action, retrained, rho=0.5):
    return UnlearnOutcome(
        request=UnlearnRequest(kind="sample", target_client=0, target_uid=1,
                               issue_step=10),
        action=action, from_iteration=None if retrained == 0 else 11 - retrained,
        retrained_iterations=retrained, wall_time_s=0.01, final_model=None,
        rho_sample_realized=rho, rho_client_realized=rho, probes=1,
    )


def test_unlearning_efficiency_report_oracle():
    outcomes = [_outcome(NOOP, 0), _outcome(PARTIAL_RETRAIN, 4),
                _outcome(PARTIAL_RETRAIN, 6), _outcome("stale", 0)]
    report = unlearning_efficiency_report(outcomes, total_steps=10)
    assert report["requests"] == 4
    assert report["serviced"] == 3
    assert report["stale"] == 1
    assert report["noop"] == 1
    assert report["recompute_rate"] == pytest.approx(2 / 3)
    assert report["mean_retrained_iterations"] == pytest.approx(10 / 3)
    assert report["speedup_vs_full_retrain"] == pytest.approx(30 / 10)


def test_unlearning_efficiency_report_no_recompute():
    report = unlearning_efficiency_report([_outcome(NOOP, 0)], total_steps=10)
    assert report["recompute_rate"] == 0.0
    assert math.isinf(report["speedup_vs_full_retrain"])


# ----------------------------------------------------------------------
# CLI


def test_cli_pipeline(tmp_path, capsys):
    data = str(tmp_path / "data.txt")
    ckpt = str(tmp_path / "ckpt.txt")
    ckpt2 = str(tmp_path / "ckpt2.txt")
    data2 = str(tmp_path / "data2.txt")

    assert cli_main([
        "gen-data", "--num-clients", "3", "--samples-per-client", "4",
        "--dim", "2", "--seed", "5", "--out", data,
    ]) == 0
    assert cli_main([
        "train", "--data", data, "--total-steps", "8", "--local-steps", "2",
        "--rho-sample", "0.5", "--rho-client", "0.5", "--lr", "0.05",
        "--seed", "3", "--out", ckpt,
    ]) == 0
    assert cli_main([
        "unlearn", "--data", data, "--checkpoint", ckpt, "--kind", "sample",
        "--client", "0", "--uid", "1", "--out", ckpt2, "--data-out", data2,
    ]) == 0
    out = capsys.readouterr().out
    assert "sample deletion of client 0 uid 1" in out
    assert os.path.exists(ckpt2) and os.path.exists(data2)

    requests = tmp_path / "requests.txt"
    requests.write_text("# comment\nclient,2,-,8\n")
    assert cli_main([
        "stream", "--data", data2, "--checkpoint", ckpt2,
        "--requests", str(requests),
    ]) == 0


def test_cli_verify(capsys):
    assert cli_main(["verify", "--kind", "sample"]) == 0
    assert cli_main(["verify", "--kind", "client"]) == 0
    out = capsys.readouterr().out
    assert out.count("verdict=pass") == 2


def test_cli_bench_and_report(tmp_path, capsys):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(_config_dict(
        str(tmp_path / "out"),
        requests={"random_samples": 1, "seed": 2},
    )))
    assert cli_main(["bench", "--config", str(config_path)]) == 0
    metrics = tmp_path / "out" / "run_0" / "metrics.csv"
    assert metrics.exists()
    capsys.readouterr()
    assert cli_main(["report", "--metrics", str(metrics)]) == 0
    assert "mean_plateau" in capsys.readouterr().out


def test_cli_error_exit_code(tmp_path, capsys):
    missing = str(tmp_path / "nope.txt")
    code = cli_main([
        "train", "--data", missing, "--total-steps", "4", "--local-steps", "2",
        "--rho-sample", "0.5", "--rho-client", "0.5", "--lr", "0.1",
        "--out", str(tmp_path / "x.txt"),
    ])
    assert code != 0
