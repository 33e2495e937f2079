"""End-to-end command driver: artifacts, dump format, reports, and figures."""

import json
from pathlib import Path

import numpy as np
import pytest

from trajdiff.cli import (
    cmd_evaluate,
    cmd_plot,
    cmd_sample,
    cmd_train,
    main,
    read_prediction_dump,
)
from trajdiff.core import PredictionSet
from trajdiff.data import SyntheticConfig
from trajdiff.metrics import MetricReport
from trajdiff.training import RunConfig, TrajectoryForecaster, build_dataset

REPORT_KEYS = {"ade", "fde", "jade", "jfde", "collision_rate",
               "K", "N", "window_count", "config_echo"}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """One micro training run plus a sampled dump, shared by the module."""
    root = tmp_path_factory.mktemp("clirun")
    config = RunConfig(
        synthetic=SyntheticConfig(num_scenes=8, steps=25),
        d_model=16, heads=4, num_layers=1, ff_dim=32, K=3, t_steps=6,
        max_steps=2, batch_size=4, ebm_hidden=8,
        max_train_windows=6, max_test_windows=3,
        out_dir=str(root / "run"),
    )
    summary = cmd_train(config)
    dump = root / "preds.jsonl"
    cmd_sample(summary["checkpoint_final"], dump, seed=5)
    return config, summary, dump


def test_train_writes_all_artifacts(run_dir):
    config, summary, _ = run_dir
    out = Path(config.out_dir)
    for name in ("config.json", "train_log.jsonl",
                 "checkpoint_final.pt", "checkpoint_best.pt"):
        assert (out / name).exists(), name
    assert summary["steps"] == config.max_steps
    log_lines = (out / "train_log.jsonl").read_text().splitlines()
    assert json.loads(log_lines[0])["config_echo"] == config.echo()
    assert len(log_lines) == 1 + config.max_steps


def test_dump_has_header_and_one_record_per_window(run_dir):
    config, _, dump = run_dir
    header, records = read_prediction_dump(dump)
    _, test_pairs = build_dataset(config)
    assert header["config_echo"] == config.echo()
    assert header["K"] == config.K and header["seed"] == 5
    assert len(records) == len(test_pairs)
    ids = [r["window_id"] for r in records]
    assert len(set(ids)) == len(ids)


def test_dump_matches_in_process_prediction(run_dir):
    config, summary, dump = run_dir
    _, records = read_prediction_dump(dump)
    model = TrajectoryForecaster.load(summary["checkpoint_final"])
    _, test_pairs = build_dataset(config)
    for i, (rec, (obs, fut)) in enumerate(zip(records, test_pairs)):
        preds = model.predict_window(obs, seed=5 + i * config.K,
                                     w=config.guidance_scale)
        np.testing.assert_allclose(
            np.asarray(rec["trajectories"]), preds.trajectories, atol=1e-9
        )
        np.testing.assert_array_equal(np.asarray(rec["gt"]), fut.Y)
        np.testing.assert_array_equal(np.asarray(rec["obs"]), obs.X)


def test_evaluate_report_is_complete_and_reproducible(run_dir, tmp_path):
    _, _, dump = run_dir
    report_path = tmp_path / "scores.json"
    flat = cmd_evaluate(dump, out_path=report_path)
    on_disk = json.loads(report_path.read_text())
    assert set(on_disk) == REPORT_KEYS
    assert on_disk == flat

    header, records = read_prediction_dump(dump)
    config = RunConfig.from_dict(json.loads(header["config_echo"]))
    pairs = [
        (PredictionSet(trajectories=np.asarray(r["trajectories"]),
                       weights=np.asarray(r["weights"])),
         np.asarray(r["gt"]))
        for r in records
    ]
    direct = MetricReport.from_windows(pairs, threshold=config.collision_threshold)
    for key, value in direct.to_flat_dict().items():
        assert flat[key] == value


def test_evaluate_default_report_path_and_figures(run_dir):
    _, _, dump = run_dir
    cmd_evaluate(dump, figures=True)
    report = dump.with_suffix(".report.json")
    hist = report.with_name(report.stem + "_ade_hist.png")
    assert report.exists()
    assert hist.exists() and hist.stat().st_size > 0


def test_ground_truth_dump_scores_zero_error(run_dir, tmp_path):
    """A dump whose single hypothesis is the ground truth has zero displacement."""
    _, _, dump = run_dir
    header, records = read_prediction_dump(dump)
    perfect = tmp_path / "perfect.jsonl"
    with open(perfect, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            gt = np.asarray(rec["gt"], dtype=np.float64)
            rec = dict(rec)
            rec["trajectories"] = gt[None].tolist()
            rec["weights"] = [1.0]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    flat = cmd_evaluate(perfect, out_path=tmp_path / "perfect.json")
    assert flat["ade"] == 0.0 and flat["fde"] == 0.0
    assert flat["jade"] == 0.0 and flat["jfde"] == 0.0
    assert flat["K"] == 1


def test_plot_writes_one_curve_per_hypothesis_agent(run_dir, tmp_path):
    config, _, dump = run_dir
    _, records = read_prediction_dump(dump)
    rec = records[0]
    out = tmp_path / "window.svg"
    cmd_plot(dump, rec["window_id"], out)
    svg = out.read_text()
    n = len(rec["agent_ids"])
    assert svg.count('id="hypothesis-') == config.K * n
    assert svg.count('id="history-agent-') == n
    assert svg.count('id="truth-agent-') == n
    assert svg.count('id="mean-agent-') == n


def test_plot_unknown_window_exits_with_data_error(run_dir, tmp_path, capsys):
    _, _, dump = run_dir
    rc = main(["plot", "--predictions", str(dump),
               "--window-id", "nope:0", "--out", str(tmp_path / "x.svg")])
    assert rc == 1
    assert "error[data]" in capsys.readouterr().err


def test_main_evaluate_exit_codes(run_dir, tmp_path, capsys):
    _, _, dump = run_dir
    assert main(["evaluate", "--predictions", str(dump),
                 "--out", str(tmp_path / "r.json")]) == 0
    out = capsys.readouterr().out
    assert json.loads(out.strip().splitlines()[-1])["window_count"] >= 1
    assert main(["evaluate", "--predictions", str(tmp_path / "missing.jsonl")]) == 1
    assert "error[data]" in capsys.readouterr().err


def test_main_train_flag_overrides(tmp_path, capsys):
    rc = main([
        "train",
        "--synthetic", json.dumps({"num_scenes": 6, "steps": 22}),
        "--d-model", "8", "--heads", "2", "--num-layers", "1", "--ff-dim", "16",
        "--K", "2", "--t-steps", "4", "--max-steps", "1", "--batch-size", "2",
        "--ebm-hidden", "4", "--max-train-windows", "4", "--max-test-windows", "2",
        "--out-dir", str(tmp_path / "run"),
    ])
    assert rc == 0
    saved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert saved["d_model"] == 8 and saved["K"] == 2
    assert saved["synthetic"]["num_scenes"] == 6


def test_main_rejects_invalid_config_override(tmp_path, capsys):
    rc = main(["train", "--d-model", "10", "--heads", "4",
               "--out-dir", str(tmp_path / "bad")])
    assert rc == 1
    assert "error[config]" in capsys.readouterr().err


def test_dump_reader_validates(tmp_path):
    from trajdiff.core import DataError

    with pytest.raises(DataError):
        read_prediction_dump(tmp_path / "absent.jsonl")
    empty = tmp_path / "empty.jsonl"
    empty.write_text("\n")
    with pytest.raises(DataError):
        read_prediction_dump(empty)
    noecho = tmp_path / "noecho.jsonl"
    noecho.write_text('{"split": "test"}\n')
    with pytest.raises(DataError):
        read_prediction_dump(noecho)
    garbled = tmp_path / "garbled.jsonl"
    garbled.write_text('{"config_echo": "{}"}\nnot json\n')
    with pytest.raises(DataError):
        read_prediction_dump(garbled)
