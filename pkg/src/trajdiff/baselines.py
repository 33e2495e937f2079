"""Reference predictors the learned model is measured against."""

from __future__ import annotations

import numpy as np

from trajdiff.core import DataError, PredictionSet


def constant_velocity_trajectory(obs, horizon: int) -> np.ndarray:
    """Extrapolate each agent's last observed velocity, [N, horizon, 2].

    The velocity is the displacement over the final observed step, so the
    prediction is the straight line every social-force-free agent follows.
    """
    x = obs.X if hasattr(obs, "X") else np.asarray(obs, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != 2 or x.shape[1] < 2:
        raise DataError(
            f"need at least two observed steps of [N, T_h, 2], got {x.shape}"
        )
    if horizon < 1:
        raise DataError("horizon must be positive")
    last = x[:, -1, :]
    vel = last - x[:, -2, :]
    steps = np.arange(1, horizon + 1, dtype=np.float64)
    return last[:, None, :] + steps[None, :, None] * vel[:, None, :]


def constant_velocity_prediction(obs, horizon: int) -> PredictionSet:
    """The extrapolation wrapped as a single-hypothesis prediction set."""
    return PredictionSet(
        trajectories=constant_velocity_trajectory(obs, horizon)[None]
    )
