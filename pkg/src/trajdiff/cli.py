"""Command-line driver: train, sample, evaluate, and plot.

Every artifact a command writes embeds the run's canonical config echo, and
every command is deterministic given its inputs and seeds. Errors derived
from user input exit nonzero with a single categorized line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from trajdiff.core import ConfigError, DataError, PredictionSet, TrajdiffError
from trajdiff.metrics import MetricReport, min_ade
from trajdiff.plotting import plot_error_histogram, plot_window_record
from trajdiff.training import (
    RunConfig,
    TrajectoryForecaster,
    build_dataset,
    load_config,
    save_config,
)

# converters for the flags that mirror RunConfig fields; "synthetic" takes a
# JSON object and the window caps take plain ints
_FIELD_PARSERS = {
    "dataset": str,
    "synthetic": json.loads,
    "data_seed": int,
    "t_h": int,
    "t_f": int,
    "window_stride": int,
    "test_fraction": float,
    "max_train_windows": int,
    "max_test_windows": int,
    "d_model": int,
    "heads": int,
    "num_layers": int,
    "ff_dim": int,
    "K": int,
    "t_steps": int,
    "beta_start": float,
    "beta_end": float,
    "max_agents": int,
    "ebm_hidden": int,
    "lambda_reg": float,
    "lambda_div": float,
    "lambda_ebm": float,
    "tau": float,
    "ebm_alpha": float,
    "cond_dropout": float,
    "guidance_scale": float,
    "lr": float,
    "weight_decay": float,
    "batch_size": int,
    "max_steps": int,
    "seed": int,
    "collision_threshold": float,
    "out_dir": str,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(RunConfig):
        parser.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f"cfg_{f.name}",
            type=_FIELD_PARSERS[f.name],
            default=None,
            help=f"override RunConfig.{f.name}",
        )


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    base = load_config(args.config).to_dict() if args.config else RunConfig().to_dict()
    overrides = {
        f.name: getattr(args, f"cfg_{f.name}")
        for f in fields(RunConfig)
        if getattr(args, f"cfg_{f.name}") is not None
    }
    if overrides.get("dataset") not in (None, "synthetic") and "synthetic" not in overrides:
        overrides["synthetic"] = None
    base.update(overrides)
    return RunConfig.from_dict(base)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(config: RunConfig) -> dict:
    """Fit on the train split; write config, loss log, and both checkpoints."""
    out = Path(config.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".writable"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    save_config(config, out / "config.json")
    train_pairs, test_pairs = build_dataset(config)
    model = TrajectoryForecaster(config)
    history = model.fit(train_pairs)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config_echo": config.echo()}, sort_keys=True) + "\n")
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    final_path = out / "checkpoint_final.pt"
    best_path = out / "checkpoint_best.pt"
    model.save(final_path, extra={"steps": len(history)})
    model.save_best(best_path)
    summary = {
        "train_windows": len(train_pairs),
        "test_windows": len(test_pairs),
        "steps": len(history),
        "final_loss": history[-1]["total"] if history else None,
        "checkpoint_final": str(final_path),
        "checkpoint_best": str(best_path),
        "train_log": str(log_path),
    }
    print(f"trained {summary['steps']} steps on {summary['train_windows']} windows; "
          f"final loss {summary['final_loss']}; checkpoints in {out}")
    return summary


def cmd_sample(checkpoint, out_path, split: str = "test", k: int | None = None,
               w: float | None = None, seed: int = 0,
               rerank: bool = False) -> dict:
    """Sample every window of a split; write one record per line."""
    model = TrajectoryForecaster.load(checkpoint)
    config = model.config
    train_pairs, test_pairs = build_dataset(config)
    if split == "train":
        pairs = train_pairs
    elif split == "test":
        pairs = test_pairs
    else:
        raise ConfigError(f"split must be train or test, got {split!r}")
    k_use = config.K if k is None else k
    w_use = config.guidance_scale if w is None else w
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "config_echo": config.echo(),
        "split": split,
        "K": k_use,
        "w": w_use,
        "seed": seed,
        "rerank": rerank,
        "checkpoint": str(checkpoint),
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i, (obs, fut) in enumerate(pairs):
            preds = model.predict_window(
                obs, seed=seed + i * k_use, w=w_use,
                rerank=rerank, hypotheses=k,
            )
            record = {
                "window_id": f"{obs.scene_id}:{obs.start}",
                "scene_id": obs.scene_id,
                "start": obs.start,
                "agent_ids": list(obs.agent_ids),
                "obs": obs.X.tolist(),
                "gt": fut.Y.tolist(),
                "trajectories": preds.trajectories.tolist(),
                "weights": preds.weights.tolist(),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"sampled {len(pairs)} windows (K={k_use}, w={w_use}) -> {out_path}")
    return {"windows": len(pairs), "path": str(out_path)}


def read_prediction_dump(path):
    """Header dict plus record list from a prediction dump file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no prediction dump at {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"prediction dump {path} is empty")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DataError(f"prediction dump {path} is not valid JSONL: {exc}") from None
    if "config_echo" not in header:
        raise DataError(f"prediction dump {path} is missing its config echo")
    return header, records


def cmd_evaluate(predictions, out_path=None, figures: bool = False) -> dict:
    """Score a prediction dump against its embedded ground truth."""
    header, records = read_prediction_dump(predictions)
    if not records:
        raise DataError("prediction dump holds no windows")
    config = RunConfig.from_dict(json.loads(header["config_echo"]))
    pairs = []
    for rec in records:
        preds = PredictionSet(
            trajectories=np.asarray(rec["trajectories"], dtype=np.float64),
            weights=np.asarray(rec["weights"], dtype=np.float64),
        )
        pairs.append((preds, np.asarray(rec["gt"], dtype=np.float64)))
    report = MetricReport.from_windows(pairs, threshold=config.collision_threshold)
    flat = report.to_flat_dict()
    flat["config_echo"] = header["config_echo"]
    out_path = Path(out_path) if out_path else Path(predictions).with_suffix(".report.json")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(flat, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if figures:
        per_window = [min_ade(p, g) for p, g in pairs]
        plot_error_histogram(
            per_window,
            out_path.with_name(out_path.stem + "_ade_hist.png"),
            config_echo=header["config_echo"],
        )
    shown = {k: v for k, v in flat.items() if k != "config_echo"}
    print(json.dumps(shown, sort_keys=True))
    return flat


def cmd_plot(predictions, window_id: str, out_path) -> str:
    """Render one window of a dump to an image file."""
    header, records = read_prediction_dump(predictions)
    match = [r for r in records if r.get("window_id") == window_id]
    if not match:
        known = ", ".join(r.get("window_id", "?") for r in records[:5])
        raise DataError(
            f"no window {window_id!r} in dump (first ids: {known} ...)"
        )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    plot_window_record(match[0], out_path, config_echo=header["config_echo"])
    print(f"plotted {window_id} -> {out_path}")
    return str(out_path)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajdiff",
        description="Train, sample, evaluate, and plot trajectory forecasts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a model and write checkpoints")
    p_train.add_argument("--config", default=None, help="JSON config file")
    _add_config_flags(p_train)

    p_sample = sub.add_parser("sample", help="write a prediction dump")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--out", required=True)
    p_sample.add_argument("--split", default="test", choices=("train", "test"))
    p_sample.add_argument("--k", type=int, default=None,
                          help="use only the first k hypothesis slots")
    p_sample.add_argument("--w", type=float, default=None,
                          help="guidance scale override")
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--rerank", action="store_true",
                          help="order hypotheses by refined weight")

    p_eval = sub.add_parser("evaluate", help="score a prediction dump")
    p_eval.add_argument("--predictions", required=True)
    p_eval.add_argument("--out", default=None, help="report path")
    p_eval.add_argument("--figures", action="store_true",
                        help="render figures alongside the report")

    p_plot = sub.add_parser("plot", help="render one window to an image")
    p_plot.add_argument("--predictions", required=True)
    p_plot.add_argument("--window-id", required=True)
    p_plot.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(_config_from_args(args))
        elif args.command == "sample":
            cmd_sample(args.checkpoint, args.out, split=args.split, k=args.k,
                       w=args.w, seed=args.seed, rerank=args.rerank)
        elif args.command == "evaluate":
            cmd_evaluate(args.predictions, out_path=args.out, figures=args.figures)
        elif args.command == "plot":
            cmd_plot(args.predictions, args.window_id, args.out)
    except TrajdiffError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
