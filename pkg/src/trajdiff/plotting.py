"""Static figure emission for prediction dumps.

Color scheme, fixed across every figure: observed history in light blue,
ground-truth future in dark blue, sampled hypotheses in light gray, and the
weight-averaged trajectory in violet. Hypothesis curves carry group ids of
the form ``hypothesis-{k}-agent-{n}`` so vector output stays auditable.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402
from matplotlib.lines import Line2D  # noqa: E402

from trajdiff.core import DataError  # noqa: E402

HISTORY_COLOR = "#74add1"
GROUND_TRUTH_COLOR = "#08306b"
SAMPLE_COLOR = "#b8b8b8"
MEAN_COLOR = "#7b3294"


def _with_anchor(last_obs: np.ndarray, future: np.ndarray) -> np.ndarray:
    """Prepend the last observed point so future curves connect visually."""
    return np.concatenate([last_obs[None, :], future], axis=0)


def plot_window_record(record: dict, out_path, config_echo: str | None = None) -> None:
    """Render one dump record: history, truth, samples, weighted mean."""
    obs = np.asarray(record["obs"], dtype=np.float64)
    gt = np.asarray(record["gt"], dtype=np.float64)
    trajs = np.asarray(record["trajectories"], dtype=np.float64)
    weights = np.asarray(record["weights"], dtype=np.float64)
    if trajs.ndim != 4 or obs.ndim != 3 or gt.ndim != 3:
        raise DataError("malformed prediction record")
    k_hyp, n_agents = trajs.shape[:2]
    mean = np.tensordot(weights, trajs, axes=(0, 0))

    fig, ax = plt.subplots(figsize=(6.0, 6.0))
    for n in range(n_agents):
        anchor = obs[n, -1]
        for k in range(k_hyp):
            line, = ax.plot(*_with_anchor(anchor, trajs[k, n]).T,
                            color=SAMPLE_COLOR, linewidth=0.8, alpha=0.7,
                            zorder=1)
            line.set_gid(f"hypothesis-{k}-agent-{n}")
        hist_line, = ax.plot(obs[n, :, 0], obs[n, :, 1], color=HISTORY_COLOR,
                             linewidth=2.0, marker="o", markersize=3, zorder=3)
        hist_line.set_gid(f"history-agent-{n}")
        gt_line, = ax.plot(*_with_anchor(anchor, gt[n]).T,
                           color=GROUND_TRUTH_COLOR, linewidth=2.0, zorder=4)
        gt_line.set_gid(f"truth-agent-{n}")
        mean_line, = ax.plot(*_with_anchor(anchor, mean[n]).T,
                             color=MEAN_COLOR, linewidth=1.6,
                             linestyle="--", zorder=2)
        mean_line.set_gid(f"mean-agent-{n}")

    ax.legend(
        handles=[
            Line2D([], [], color=HISTORY_COLOR, marker="o", label="history"),
            Line2D([], [], color=GROUND_TRUTH_COLOR, label="ground truth"),
            Line2D([], [], color=SAMPLE_COLOR, label=f"{k_hyp} samples"),
            Line2D([], [], color=MEAN_COLOR, linestyle="--", label="weighted mean"),
        ],
        loc="best", fontsize=8,
    )
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(str(record.get("window_id", "window")), fontsize=10)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    _save(fig, out_path, config_echo)


def plot_error_histogram(per_window_errors, out_path,
                         config_echo: str | None = None,
                         label: str = "per-window min ADE") -> None:
    """Histogram of a per-window metric, written next to the report."""
    errors = np.asarray(list(per_window_errors), dtype=np.float64)
    if errors.size == 0:
        raise DataError("no per-window errors to plot")
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.hist(errors, bins=min(30, max(5, errors.size // 4)),
            color=HISTORY_COLOR, edgecolor=GROUND_TRUTH_COLOR)
    ax.set_xlabel(label)
    ax.set_ylabel("windows")
    ax.set_title(f"{label} over {errors.size} windows "
                 f"(mean {errors.mean():.3f})", fontsize=10)
    _save(fig, out_path, config_echo)


def _save(fig, out_path, config_echo: str | None) -> None:
    metadata = {"Description": config_echo} if config_echo else None
    try:
        fig.savefig(out_path, metadata=metadata, bbox_inches="tight")
    finally:
        plt.close(fig)
