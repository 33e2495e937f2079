"""Displacement and collision metrics over prediction sets.

Marginal metrics (min_ade / min_fde) pick the best hypothesis per agent and
then average over agents; joint metrics (jade / jfde) average over agents
within each hypothesis first and then pick the best hypothesis, so they can
never beat their marginal counterparts. All metrics ignore hypothesis
weights: they are best-of-K quantities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from trajdiff.core import DataError, PredictionSet

DEFAULT_COLLISION_THRESHOLD = 0.1


def _pred_array(preds) -> np.ndarray:
    if isinstance(preds, PredictionSet):
        preds = preds.trajectories
    arr = np.asarray(preds, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[-1] != 2:
        raise DataError(f"predictions must be [K, N, T, 2], got {arr.shape}")
    return arr


def _gt_array(gt) -> np.ndarray:
    if hasattr(gt, "Y"):
        gt = gt.Y
    arr = np.asarray(gt, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 2:
        raise DataError(f"ground truth must be [N, T, 2], got {arr.shape}")
    return arr


def _displacements(preds, gt) -> np.ndarray:
    """Per-step L2 error, [K, N, T]."""
    p = _pred_array(preds)
    g = _gt_array(gt)
    if p.shape[1:] != g.shape:
        raise DataError(f"prediction shape {p.shape} does not match gt {g.shape}")
    return np.linalg.norm(p - g[None], axis=-1)


def min_ade(preds, gt) -> float:
    """Mean over agents of the best per-agent average displacement error."""
    err = _displacements(preds, gt).mean(axis=2)  # [K, N]
    return float(err.min(axis=0).mean())


def min_fde(preds, gt) -> float:
    """Mean over agents of the best per-agent final displacement error."""
    err = _displacements(preds, gt)[:, :, -1]  # [K, N]
    return float(err.min(axis=0).mean())


def jade(preds, gt) -> float:
    """Best over hypotheses of the agent-averaged displacement error."""
    err = _displacements(preds, gt).mean(axis=2)  # [K, N]
    return float(err.mean(axis=1).min())


def jfde(preds, gt) -> float:
    """Best over hypotheses of the agent-averaged final displacement error."""
    err = _displacements(preds, gt)[:, :, -1]
    return float(err.mean(axis=1).min())


def collision_rate(preds, threshold: float = DEFAULT_COLLISION_THRESHOLD) -> float:
    """Fraction of hypotheses where any agent pair passes closer than threshold.

    Windows with fewer than two agents cannot collide and score 0.
    """
    p = _pred_array(preds)
    k, n = p.shape[:2]
    if n < 2:
        return 0.0
    iu, ju = np.triu_indices(n, k=1)
    dist = np.linalg.norm(p[:, iu] - p[:, ju], axis=-1)  # [K, pairs, T]
    collided = (dist < threshold).any(axis=(1, 2))
    return float(collided.mean())


@dataclass(frozen=True)
class MetricReport:
    """Aggregate metrics over a collection of windows.

    ``ade``..``collision_rate`` are unweighted means of per-window values;
    ``num_agents`` totals agents across windows (window sizes vary).
    """

    ade: float
    fde: float
    jade: float
    jfde: float
    collision_rate: float
    num_hypotheses: int
    num_agents: int
    window_count: int

    def __post_init__(self) -> None:
        if self.jade < self.ade - 1e-9 or self.jfde < self.fde - 1e-9:
            raise DataError(
                "joint metrics cannot beat marginal metrics: "
                f"jade={self.jade} ade={self.ade} jfde={self.jfde} fde={self.fde}"
            )

    def to_flat_dict(self) -> dict:
        return {
            "ade": self.ade,
            "fde": self.fde,
            "jade": self.jade,
            "jfde": self.jfde,
            "collision_rate": self.collision_rate,
            "K": self.num_hypotheses,
            "N": self.num_agents,
            "window_count": self.window_count,
        }

    @classmethod
    def from_windows(
        cls,
        pairs: Iterable[tuple],
        threshold: float = DEFAULT_COLLISION_THRESHOLD,
    ) -> "MetricReport":
        """Aggregate (predictions, ground truth) pairs into one report."""
        ades, fdes, jades, jfdes, crs = [], [], [], [], []
        k_seen: set[int] = set()
        agents = 0
        for preds, gt in pairs:
            p = _pred_array(preds)
            g = _gt_array(gt)
            k_seen.add(p.shape[0])
            agents += p.shape[1]
            ades.append(min_ade(p, g))
            fdes.append(min_fde(p, g))
            jades.append(jade(p, g))
            jfdes.append(jfde(p, g))
            crs.append(collision_rate(p, threshold))
        if not ades:
            raise DataError("cannot build a metric report from zero windows")
        if len(k_seen) != 1:
            raise DataError(f"inconsistent hypothesis counts across windows: {sorted(k_seen)}")
        return cls(
            ade=float(np.mean(ades)),
            fde=float(np.mean(fdes)),
            jade=float(np.mean(jades)),
            jfde=float(np.mean(jfdes)),
            collision_rate=float(np.mean(crs)),
            num_hypotheses=k_seen.pop(),
            num_agents=agents,
            window_count=len(ades),
        )
