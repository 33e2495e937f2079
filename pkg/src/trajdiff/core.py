"""Shared types and coordinate transforms for multi-agent trajectory forecasting.

Conventions used throughout the package:

* positions are float64 arrays in metres, axes ordered ``[agent, step, xy]``;
* observed history has ``T_h`` steps, the future horizon has ``T_f`` steps;
* prediction sets stack ``K`` hypotheses in front: ``[K, agent, step, xy]``;
* "relative" futures are offsets from each agent's last observed position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

WEIGHT_TOL = 1e-9


class TrajdiffError(Exception):
    """Base error; ``category`` feeds the CLI's one-line error reporting."""

    category = "error"


class ParseError(TrajdiffError):
    category = "parse"


class DataError(TrajdiffError):
    category = "data"


class ConfigError(TrajdiffError):
    category = "config"


class CheckpointError(TrajdiffError):
    category = "checkpoint"


class NotFittedError(TrajdiffError):
    category = "model"


def _as_float_array(value, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != ndim:
        raise DataError(f"{name} must have {ndim} axes, got shape {arr.shape}")
    return arr


def _freeze(obj, **arrays) -> None:
    """Attach read-only arrays to a frozen dataclass instance."""
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(obj, name, arr)


@dataclass(frozen=True)
class Scene:
    """A contiguous block of annotated frames.

    Attributes:
        scene_id: stable identifier (source file plus block index).
        agent_ids: one id per agent row in ``positions``.
        positions: [N, T, 2] positions; undefined where ``valid`` is False.
        valid: [N, T] presence mask.
        frame_interval: seconds between consecutive steps.
    """

    scene_id: str
    agent_ids: tuple[int, ...]
    positions: np.ndarray
    valid: np.ndarray
    frame_interval: float = 0.4

    def __post_init__(self) -> None:
        pos = _as_float_array(self.positions, "positions", 3)
        valid = np.asarray(self.valid, dtype=bool)
        if pos.shape[-1] != 2:
            raise DataError(f"positions must end in an xy axis, got {pos.shape}")
        if valid.shape != pos.shape[:2]:
            raise DataError(
                f"valid mask shape {valid.shape} does not match positions {pos.shape[:2]}"
            )
        if len(self.agent_ids) != pos.shape[0]:
            raise DataError("agent_ids length does not match positions")
        if self.frame_interval <= 0:
            raise DataError("frame_interval must be positive")
        object.__setattr__(self, "agent_ids", tuple(int(a) for a in self.agent_ids))
        _freeze(self, positions=pos, valid=valid)

    @property
    def num_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def num_steps(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class ObservationWindow:
    """Fully observed history block: ``X`` is [N, T_h, 2]."""

    X: np.ndarray
    agent_ids: tuple[int, ...] = ()
    scene_id: str = ""
    start: int = 0

    def __post_init__(self) -> None:
        x = _as_float_array(self.X, "X", 3)
        if x.shape[-1] != 2:
            raise DataError(f"X must end in an xy axis, got {x.shape}")
        ids = self.agent_ids or tuple(range(x.shape[0]))
        if len(ids) != x.shape[0]:
            raise DataError("agent_ids length does not match X")
        object.__setattr__(self, "agent_ids", tuple(int(a) for a in ids))
        _freeze(self, X=x)

    @property
    def num_agents(self) -> int:
        return self.X.shape[0]

    @property
    def horizon(self) -> int:
        return self.X.shape[1]

    def last_positions(self) -> np.ndarray:
        """[N, 2] positions at the final observed step."""
        return self.X[:, -1, :]


@dataclass(frozen=True)
class FutureWindow:
    """Ground-truth continuation block: ``Y`` is [N, T_f, 2]."""

    Y: np.ndarray
    agent_ids: tuple[int, ...] = ()
    scene_id: str = ""
    start: int = 0

    def __post_init__(self) -> None:
        y = _as_float_array(self.Y, "Y", 3)
        if y.shape[-1] != 2:
            raise DataError(f"Y must end in an xy axis, got {y.shape}")
        ids = self.agent_ids or tuple(range(y.shape[0]))
        if len(ids) != y.shape[0]:
            raise DataError("agent_ids length does not match Y")
        object.__setattr__(self, "agent_ids", tuple(int(a) for a in ids))
        _freeze(self, Y=y)

    @property
    def num_agents(self) -> int:
        return self.Y.shape[0]

    @property
    def horizon(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class PredictionSet:
    """K trajectory hypotheses with per-hypothesis weights.

    ``trajectories`` is [K, N, T_f, 2]; ``weights`` is [K], non-negative and
    summing to one within ``WEIGHT_TOL`` (uniform when omitted).
    """

    trajectories: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        traj = np.asarray(self.trajectories, dtype=np.float64)
        if traj.ndim != 4 or traj.shape[-1] != 2:
            raise DataError(
                f"trajectories must be [K, N, T_f, 2], got shape {traj.shape}"
            )
        k = traj.shape[0]
        if self.weights is None:
            w = np.full(k, 1.0 / k, dtype=np.float64)
        else:
            w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (k,):
            raise DataError(f"weights must have shape ({k},), got {w.shape}")
        if np.any(w < 0):
            raise DataError("weights must be non-negative")
        if abs(float(w.sum()) - 1.0) > WEIGHT_TOL:
            raise DataError(f"weights must sum to 1 within {WEIGHT_TOL}, got {w.sum()!r}")
        _freeze(self, trajectories=traj, weights=w)

    @property
    def num_hypotheses(self) -> int:
        return self.trajectories.shape[0]

    @property
    def num_agents(self) -> int:
        return self.trajectories.shape[1]

    def mean_trajectory(self) -> np.ndarray:
        """Weight-averaged trajectory, [N, T_f, 2]."""
        return np.einsum("k,knts->nts", self.weights, self.trajectories)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-coordinate min/max of relative futures over a training split."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self) -> None:
        low = np.asarray(self.low, dtype=np.float64).reshape(-1)
        high = np.asarray(self.high, dtype=np.float64).reshape(-1)
        if low.shape != (2,) or high.shape != (2,):
            raise DataError("low/high must each hold one value per coordinate")
        if not np.all(high > low):
            raise DataError(
                f"degenerate normalization stats: high {high} must exceed low {low}"
            )
        _freeze(self, low=low, high=high)

    @classmethod
    def fit(cls, relative_futures: Iterable[np.ndarray]) -> "NormalizationStats":
        """Compute per-coordinate extrema over an iterable of [N, T_f, 2] blocks."""
        low = np.full(2, np.inf)
        high = np.full(2, -np.inf)
        count = 0
        for block in relative_futures:
            arr = np.asarray(block, dtype=np.float64).reshape(-1, 2)
            if arr.size == 0:
                continue
            low = np.minimum(low, arr.min(axis=0))
            high = np.maximum(high, arr.max(axis=0))
            count += arr.shape[0]
        if count == 0:
            raise DataError("cannot fit normalization stats on empty data")
        return cls(low=low, high=high)


def _traj_array(value, attr: str) -> np.ndarray:
    if hasattr(value, attr):
        value = getattr(value, attr)
    return np.asarray(value, dtype=np.float64)


def to_relative(fut, obs) -> np.ndarray:
    """Express futures as offsets from each agent's last observed position.

    Args:
        fut: FutureWindow or array [..., N, T_f, 2].
        obs: ObservationWindow or array [N, T_h, 2].

    Returns:
        Array shaped like ``fut`` with per-agent anchors subtracted.
    """
    y = _traj_array(fut, "Y")
    x = _traj_array(obs, "X")
    return y - x[:, -1:, :]


def from_relative(rel, obs) -> np.ndarray:
    """Inverse of :func:`to_relative`."""
    r = _traj_array(rel, "Y")
    x = _traj_array(obs, "X")
    return r + x[:, -1:, :]


def normalize(rel: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Min-max map relative offsets into [-1, 1] using training-split stats."""
    rel = np.asarray(rel, dtype=np.float64)
    return 2.0 * (rel - stats.low) / (stats.high - stats.low) - 1.0


def denormalize(norm: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of :func:`normalize`."""
    norm = np.asarray(norm, dtype=np.float64)
    return (norm + 1.0) * 0.5 * (stats.high - stats.low) + stats.low


def canonical_agent_order(obs) -> np.ndarray:
    """Indices sorting agents by first observed position, lexicographic in (x, y).

    Gives a stable, input-order-independent rank for agent-order embeddings:
    permuting the agent axis permutes the returned ranks identically.
    """
    x = _traj_array(obs, "X")
    first = x[:, 0, :]
    return np.lexsort((first[:, 1], first[:, 0]))
