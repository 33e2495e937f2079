"""Dataset plumbing: annotation parsing, windowing, splits, synthetic scenes,
and checkpoint persistence.

Annotation files follow the common pedestrian-benchmark text layout: one
``frame_id agent_id x y`` row per line, whitespace separated, with frame ids
advancing by a fixed increment (10 in the raw recordings) per 0.4 s step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from trajdiff.core import (
    CheckpointError,
    ConfigError,
    DataError,
    FutureWindow,
    NormalizationStats,
    ObservationWindow,
    ParseError,
    Scene,
)

CHECKPOINT_VERSION = 1
DEFAULT_FRAME_INTERVAL = 0.4

SUBSET_NAMES = ("eth", "hotel", "univ", "zara1", "zara2")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def parse_trajectory_file(path, frame_interval: float = DEFAULT_FRAME_INTERVAL) -> list[Scene]:
    """Parse a whitespace-delimited annotation file into scenes.

    One scene is emitted per maximal run of frames advancing by the file's
    smallest frame increment; consecutive annotation frames are treated as
    consecutive steps.

    Args:
        path: text file with ``frame_id agent_id x y`` rows.
        frame_interval: seconds between consecutive annotation steps.

    Returns:
        List of Scene objects in frame order.

    Raises:
        ParseError: malformed row (wrong arity or unparseable number), with
            the offending line number in the message.
        DataError: an agent annotated twice in one frame.
    """
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(
                    f"{path.name}:{lineno}: expected 4 columns, got {len(parts)}"
                )
            try:
                frame = int(float(parts[0]))
                agent = int(float(parts[1]))
                x = float(parts[2])
                y = float(parts[3])
            except ValueError as exc:
                raise ParseError(f"{path.name}:{lineno}: {exc}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError(f"{path.name}:{lineno}: non-finite coordinate")
            rows.append((frame, agent, x, y))

    if not rows:
        return []

    seen: set[tuple[int, int]] = set()
    for frame, agent, _, _ in rows:
        key = (frame, agent)
        if key in seen:
            raise DataError(
                f"{path.name}: agent {agent} annotated twice in frame {frame}"
            )
        seen.add(key)

    frames = sorted({r[0] for r in rows})
    diffs = [b - a for a, b in zip(frames, frames[1:])]
    step = min(diffs) if diffs else 1

    blocks: list[list[int]] = [[frames[0]]]
    for prev, cur in zip(frames, frames[1:]):
        if cur - prev == step:
            blocks[-1].append(cur)
        else:
            blocks.append([cur])

    by_frame: dict[int, list[tuple[int, float, float]]] = {}
    for frame, agent, x, y in rows:
        by_frame.setdefault(frame, []).append((agent, x, y))

    scenes = []
    for bi, block in enumerate(blocks):
        index_of = {f: i for i, f in enumerate(block)}
        agent_ids = sorted({a for f in block for a, _, _ in by_frame.get(f, [])})
        rank = {a: i for i, a in enumerate(agent_ids)}
        positions = np.zeros((len(agent_ids), len(block), 2), dtype=np.float64)
        valid = np.zeros((len(agent_ids), len(block)), dtype=bool)
        for f in block:
            t = index_of[f]
            for agent, x, y in by_frame.get(f, []):
                i = rank[agent]
                positions[i, t] = (x, y)
                valid[i, t] = True
        scenes.append(
            Scene(
                scene_id=f"{path.stem}#{bi}",
                agent_ids=tuple(agent_ids),
                positions=positions,
                valid=valid,
                frame_interval=frame_interval,
            )
        )
    return scenes


# ---------------------------------------------------------------------------
# windowing and splits
# ---------------------------------------------------------------------------

def window_scenes(
    scenes: Iterable[Scene],
    t_h: int = 8,
    t_f: int = 12,
    stride: int = 1,
) -> list[tuple[ObservationWindow, FutureWindow]]:
    """Slide a (t_h + t_f)-step window over each scene.

    A window keeps exactly the agents present at every one of its steps and
    is dropped when no agent qualifies. Start offsets advance by ``stride``.
    """
    if t_h < 2 or t_f < 1:
        raise ConfigError("need t_h >= 2 and t_f >= 1")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    span = t_h + t_f
    out = []
    for scene in scenes:
        for start in range(0, scene.num_steps - span + 1, stride):
            block = scene.valid[:, start:start + span]
            keep = np.flatnonzero(block.all(axis=1))
            if keep.size == 0:
                continue
            ids = tuple(scene.agent_ids[i] for i in keep)
            obs = ObservationWindow(
                X=scene.positions[keep, start:start + t_h],
                agent_ids=ids,
                scene_id=scene.scene_id,
                start=start,
            )
            fut = FutureWindow(
                Y=scene.positions[keep, start + t_h:start + span],
                agent_ids=ids,
                scene_id=scene.scene_id,
                start=start,
            )
            out.append((obs, fut))
    return out


@dataclass(frozen=True)
class DatasetSplit:
    """Named train/test partition of scenes."""

    name: str
    train: tuple[Scene, ...]
    test: tuple[Scene, ...]


def leave_one_out_split(subsets: Mapping[str, Sequence[Scene]], held_out: str) -> DatasetSplit:
    """Train on every subset except ``held_out``; test on ``held_out``.

    Training scenes follow sorted subset-name order so the split is a pure
    function of its inputs.
    """
    if held_out not in subsets:
        raise ConfigError(
            f"unknown held-out subset {held_out!r}; have {sorted(subsets)}"
        )
    train: list[Scene] = []
    for name in sorted(subsets):
        if name != held_out:
            train.extend(subsets[name])
    return DatasetSplit(name=held_out, train=tuple(train), test=tuple(subsets[held_out]))


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic scene generator.

    ``mix`` weights the three scenario families; weights are normalized.
    All randomness comes from the seed passed to generate_synthetic_scenes,
    so (config, seed) fully determines the output.
    """

    num_scenes: int = 10
    steps: int = 25
    agent_range: tuple[int, int] = (2, 6)
    speed_range: tuple[float, float] = (0.6, 1.8)
    arena: float = 8.0
    frame_interval: float = DEFAULT_FRAME_INTERVAL
    mix: Mapping[str, float] = field(
        default_factory=lambda: {
            "constant_velocity": 1.0,
            "crossing": 1.0,
            "repulsive": 1.0,
        }
    )
    repulsion_strength: float = 1.5
    repulsion_range: float = 1.8

    def __post_init__(self) -> None:
        if self.num_scenes < 1 or self.steps < 2:
            raise ConfigError("need num_scenes >= 1 and steps >= 2")
        lo, hi = self.agent_range
        if not (2 <= lo <= hi):
            raise ConfigError("agent_range must satisfy 2 <= low <= high")
        if not self.mix or any(w < 0 for w in self.mix.values()):
            raise ConfigError("mix weights must be non-negative and non-empty")
        known = {"constant_velocity", "crossing", "repulsive"}
        unknown = set(self.mix) - known
        if unknown:
            raise ConfigError(f"unknown scenario names {sorted(unknown)}")
        if sum(self.mix.values()) <= 0:
            raise ConfigError("mix weights must not all be zero")


def _constant_velocity_scene(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    n = int(rng.integers(cfg.agent_range[0], cfg.agent_range[1] + 1))
    starts = rng.uniform(-cfg.arena, cfg.arena, (n, 2))
    headings = rng.uniform(0.0, 2.0 * np.pi, n)
    speeds = rng.uniform(*cfg.speed_range, n)
    vel = speeds[:, None] * np.stack([np.cos(headings), np.sin(headings)], axis=1)
    t = np.arange(cfg.steps) * cfg.frame_interval
    return starts[:, None, :] + vel[:, None, :] * t[None, :, None]


def _crossing_setup(rng: np.random.Generator, cfg: SyntheticConfig):
    """Two straight paths meeting near the arena centre around mid-sequence."""
    center = rng.uniform(-1.0, 1.0, 2)
    a0 = rng.uniform(0.0, 2.0 * np.pi)
    sep = rng.uniform(np.pi / 3, 2.0 * np.pi / 3) * rng.choice([-1.0, 1.0])
    angles = np.array([a0, a0 + sep])
    speeds = rng.uniform(*cfg.speed_range, 2)
    t_mid = cfg.steps / 2.0 + rng.uniform(-1.5, 1.5, 2)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    vel = speeds[:, None] * dirs
    starts = center[None, :] - vel * (t_mid[:, None] * cfg.frame_interval)
    return starts, vel


def _crossing_scene(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    starts, vel = _crossing_setup(rng, cfg)
    t = np.arange(cfg.steps) * cfg.frame_interval
    return starts[:, None, :] + vel[:, None, :] * t[None, :, None]


def _repulsive_scene(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    """Crossing geometry plus a smooth mutual-avoidance velocity push."""
    starts, vel = _crossing_setup(rng, cfg)
    pos = np.empty((2, cfg.steps, 2))
    pos[:, 0] = starts
    cur = starts.copy()
    for t in range(1, cfg.steps):
        delta = cur[0] - cur[1]
        dist = float(np.hypot(*delta)) + 1e-9
        push = cfg.repulsion_strength * math.exp(-dist / cfg.repulsion_range) * (delta / dist)
        step_vel = vel + np.stack([push, -push])
        cur = cur + step_vel * cfg.frame_interval
        pos[:, t] = cur
    return pos


_SCENARIOS = {
    "constant_velocity": _constant_velocity_scene,
    "crossing": _crossing_scene,
    "repulsive": _repulsive_scene,
}


def generate_synthetic_scenes(config: SyntheticConfig, seed: int) -> list[Scene]:
    """Deterministically sample scenes from the configured scenario mix."""
    rng = np.random.default_rng(seed)
    names = sorted(config.mix)
    weights = np.array([config.mix[n] for n in names], dtype=np.float64)
    weights = weights / weights.sum()
    scenes = []
    for i in range(config.num_scenes):
        name = names[int(rng.choice(len(names), p=weights))]
        positions = _SCENARIOS[name](rng, config)
        n = positions.shape[0]
        scenes.append(
            Scene(
                scene_id=f"synthetic-{name}-{i}",
                agent_ids=tuple(range(n)),
                positions=positions,
                valid=np.ones((n, config.steps), dtype=bool),
                frame_interval=config.frame_interval,
            )
        )
    return scenes


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path,
    model_state: Mapping[str, torch.Tensor],
    config: Mapping,
    norm_stats: NormalizationStats,
    extra: Mapping | None = None,
) -> None:
    """Persist parameters, the full config echo, and normalization stats."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dict(config),
        "model_state": dict(model_state),
        "norm_low": norm_stats.low.tolist(),
        "norm_high": norm_stats.high.tolist(),
    }
    if extra:
        payload["extra"] = dict(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, expect_config: Mapping | None = None) -> dict:
    """Load a checkpoint written by :func:`save_checkpoint`.

    Args:
        path: checkpoint file.
        expect_config: when given, the stored config echo must match exactly;
            a mismatch is refused rather than silently reconciled.

    Returns:
        Dict with ``model_state``, ``config``, ``norm_stats``, and ``extra``.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    config = payload["config"]
    if expect_config is not None and dict(expect_config) != dict(config):
        diff = {
            k: (dict(expect_config).get(k), dict(config).get(k))
            for k in set(expect_config) | set(config)
            if dict(expect_config).get(k) != dict(config).get(k)
        }
        raise ConfigError(f"config echo mismatch on resume: {diff}")
    return {
        "model_state": payload["model_state"],
        "config": config,
        "norm_stats": NormalizationStats(
            low=payload["norm_low"], high=payload["norm_high"]
        ),
        "extra": payload.get("extra", {}),
    }
