"""End-to-end pipeline: run configuration, dataset assembly, the training
loop, and windowed prediction with energy-reweighted hypotheses.

The pipeline owns the agent bookkeeping the networks assume: every window is
put into canonical agent order before it touches a network, and predictions
are unsorted back to the caller's agent order on the way out. The denoiser
works in normalized relative coordinates (future minus last observed
position, scaled to [-1, 1] by stats fit on the training split); world-frame
trajectories only exist outside the networks.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from itertools import chain

import numpy as np
import torch

from trajdiff.core import (
    ConfigError,
    DataError,
    FutureWindow,
    NormalizationStats,
    ObservationWindow,
    PredictionSet,
    canonical_agent_order,
    denormalize,
    from_relative,
    normalize,
    to_relative,
)
from trajdiff.data import (
    SyntheticConfig,
    generate_synthetic_scenes,
    load_checkpoint,
    parse_trajectory_file,
    save_checkpoint,
    window_scenes,
)
from trajdiff.denoiser import (
    DiffusionSchedule,
    TrajectoryDenoiser,
    forward_sample,
    sample_train_time,
)
from trajdiff.encoder import ContextEncoder
from trajdiff.objectives import (
    LossWeights,
    diversity_loss,
    ebm_loss,
    regression_loss,
    total_loss,
)
from trajdiff.refinement import EnergyNetwork, refine


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on; round-trips losslessly through JSON.

    ``dataset`` is either the literal string "synthetic" (scenes come from
    the generator configured by ``synthetic``) or a path to an annotation
    text file in frame/agent/x/y format.
    """

    # data
    dataset: str = "synthetic"
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    data_seed: int = 7
    t_h: int = 8
    t_f: int = 12
    window_stride: int = 1
    test_fraction: float = 0.2
    max_train_windows: int | None = None
    max_test_windows: int | None = None
    # model
    d_model: int = 128
    heads: int = 8
    num_layers: int = 4
    ff_dim: int = 512
    K: int = 20
    t_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    max_agents: int = 16
    ebm_hidden: int = 64
    # losses
    lambda_reg: float = 1.0
    lambda_div: float = 1.0
    lambda_ebm: float = 0.1
    tau: float = 0.1
    ebm_alpha: float = 1e-3
    # classifier-free guidance
    cond_dropout: float = 0.1
    guidance_scale: float = 1.0
    # optimization
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0
    # evaluation
    collision_threshold: float = 0.1
    out_dir: str = "runs/default"

    def __post_init__(self) -> None:
        if self.dataset == "synthetic":
            if self.synthetic is None:
                raise ConfigError("synthetic dataset needs a synthetic config")
        elif self.synthetic is not None:
            raise ConfigError("file datasets must leave the synthetic config unset")
        if self.t_h < 2 or self.t_f < 2:
            raise ConfigError("need t_h >= 2 and t_f >= 2")
        if self.window_stride < 1:
            raise ConfigError("window_stride must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        for name in ("max_train_windows", "max_test_windows"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be positive when set")
        if self.d_model < 2 or self.d_model % self.heads != 0:
            raise ConfigError("d_model must be a positive multiple of heads")
        if self.num_layers < 1 or self.ff_dim < 1:
            raise ConfigError("need num_layers >= 1 and ff_dim >= 1")
        if self.K < 1:
            raise ConfigError("need at least one hypothesis")
        if self.t_steps < 1:
            raise ConfigError("need at least one diffusion step")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.max_agents < 1 or self.ebm_hidden < 1:
            raise ConfigError("max_agents and ebm_hidden must be positive")
        # loss weights validate themselves
        self.loss_weights()
        if self.ebm_alpha < 0:
            raise ConfigError("ebm_alpha must be nonnegative")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError("cond_dropout must lie in [0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("need lr > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("need batch_size >= 1 and max_steps >= 0")
        if self.collision_threshold <= 0:
            raise ConfigError("collision_threshold must be positive")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_reg=self.lambda_reg,
            lambda_div=self.lambda_div,
            lambda_ebm=self.lambda_ebm,
            tau=self.tau,
        )

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule.linear(self.t_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        data = dict(raw)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        syn = data.get("synthetic")
        if isinstance(syn, dict):
            syn = dict(syn)
            unknown_syn = set(syn) - {f for f in SyntheticConfig.__dataclass_fields__}
            if unknown_syn:
                raise ConfigError(f"unknown synthetic keys {sorted(unknown_syn)}")
            for key in ("agent_range", "speed_range"):
                if key in syn and syn[key] is not None:
                    syn[key] = tuple(syn[key])
            data["synthetic"] = SyntheticConfig(**syn)
        return cls(**data)

    def echo(self) -> str:
        """Canonical one-line form embedded in every artifact."""
        return json.dumps(self.to_dict(), sort_keys=True)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no config file at {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def _sort_pair(obs: ObservationWindow, fut: FutureWindow):
    """Put one window pair into canonical agent order."""
    order = canonical_agent_order(obs)
    ids = tuple(obs.agent_ids[i] for i in order)
    return (
        ObservationWindow(X=obs.X[order], agent_ids=ids,
                          scene_id=obs.scene_id, start=obs.start),
        FutureWindow(Y=fut.Y[order], agent_ids=ids,
                     scene_id=fut.scene_id, start=fut.start),
    )


def build_dataset(config: RunConfig):
    """Train/test window pairs in canonical agent order.

    Scenes are split by index (the leading (1 - test_fraction) share trains);
    window lists are truncated to the configured caps after windowing.
    """
    if config.dataset == "synthetic":
        scenes = generate_synthetic_scenes(config.synthetic, seed=config.data_seed)
    else:
        scenes = parse_trajectory_file(config.dataset)
    if len(scenes) < 2:
        raise DataError("need at least two scenes to carve out a test split")
    cut = max(1, min(len(scenes) - 1, round(len(scenes) * (1.0 - config.test_fraction))))
    kwargs = dict(t_h=config.t_h, t_f=config.t_f, stride=config.window_stride)
    train = [_sort_pair(o, f) for o, f in window_scenes(scenes[:cut], **kwargs)]
    test = [_sort_pair(o, f) for o, f in window_scenes(scenes[cut:], **kwargs)]
    if config.max_train_windows is not None:
        train = train[:config.max_train_windows]
    if config.max_test_windows is not None:
        test = test[:config.max_test_windows]
    if not train or not test:
        raise DataError(
            f"dataset produced {len(train)} train / {len(test)} test windows; "
            "both splits must be non-empty"
        )
    return train, test


# ---------------------------------------------------------------------------
# the forecaster
# ---------------------------------------------------------------------------

class TrajectoryForecaster:
    """Bundles the context encoder, denoiser, energy network, and stats."""

    def __init__(self, config: RunConfig):
        self.config = config
        torch.manual_seed(config.seed)
        self.encoder = ContextEncoder(
            width=config.d_model,
            heads=config.heads,
            num_layers=config.num_layers,
            ff_dim=config.ff_dim,
            num_hypotheses=config.K,
        )
        self.denoiser = TrajectoryDenoiser(
            horizon=config.t_f,
            cond_dim=self.encoder.guidance_dim,
            d_model=config.d_model,
            heads=config.heads,
            num_layers=config.num_layers,
            ff_dim=config.ff_dim,
            t_steps=config.t_steps,
            max_agents=config.max_agents,
        )
        self.energy = EnergyNetwork(
            horizon=config.t_f,
            cond_dim=self.encoder.guidance_dim,
            hidden=config.ebm_hidden,
        )
        self.schedule = config.schedule()
        self.norm_stats: NormalizationStats | None = None
        self._best_state: dict | None = None
        self._best_step = 0

    # -- persistence --------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "encoder": self.encoder.state_dict(),
            "denoiser": self.denoiser.state_dict(),
            "energy": self.energy.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.encoder.load_state_dict(state["encoder"])
        self.denoiser.load_state_dict(state["denoiser"])
        self.energy.load_state_dict(state["energy"])

    def save(self, path, extra: dict | None = None) -> None:
        if self.norm_stats is None:
            raise DataError("cannot save before fitting normalization stats")
        save_checkpoint(path, self.state_dict(), self.config.to_dict(),
                        self.norm_stats, extra=extra)

    def save_best(self, path) -> None:
        """Persist the lowest-loss parameters seen during the last fit."""
        if self._best_state is None or self.norm_stats is None:
            raise DataError("no best state recorded; fit first")
        save_checkpoint(path, self._best_state, self.config.to_dict(),
                        self.norm_stats, extra={"best_step": self._best_step})

    @classmethod
    def load(cls, path, expect_config: RunConfig | None = None) -> "TrajectoryForecaster":
        expect = expect_config.to_dict() if expect_config is not None else None
        payload = load_checkpoint(path, expect_config=expect)
        config = RunConfig.from_dict(payload["config"])
        model = cls(config)
        model.load_state_dict(payload["model_state"])
        model.norm_stats = payload["norm_stats"]
        return model

    # -- training -----------------------------------------------------

    def fit(self, train_pairs) -> list[dict]:
        """Optimize all three networks; returns one history record per step."""
        if not train_pairs:
            raise DataError("cannot fit on zero windows")
        cfg = self.config
        self.norm_stats = NormalizationStats.fit(
            to_relative(fut, obs) for obs, fut in train_pairs
        )
        prepared = []
        for obs, fut in train_pairs:
            # networks only ever see canonical agent order, whatever the caller
            # passed; prediction applies the same sort, so the two line up
            obs, fut = _sort_pair(obs, fut)
            y_norm = torch.from_numpy(
                normalize(to_relative(fut, obs), self.norm_stats)
            )
            anchors = obs.last_positions()
            prepared.append((obs, y_norm, anchors))

        weights = cfg.loss_weights()
        params = list(chain(self.encoder.parameters(),
                            self.denoiser.parameters(),
                            self.energy.parameters()))
        opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        # linear decay to 10% of the base rate by the final step; late steps
        # refine rather than bounce around the noisy loss surface
        span = max(cfg.max_steps - 1, 1)
        decay = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda step: 1.0 - 0.9 * min(step, span) / span
        )
        rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed + 1)  # train-time noise stream

        history: list[dict] = []
        best = (float("inf"), None, -1)
        n_pairs = len(prepared)
        for step in range(cfg.max_steps):
            if cfg.batch_size >= n_pairs:
                batch = range(n_pairs)
            else:
                batch = rng.choice(n_pairs, size=cfg.batch_size, replace=False)
            parts = torch.zeros(3, dtype=torch.float64)
            total = torch.zeros((), dtype=torch.float64)
            for idx in batch:
                obs, y_norm, anchors = prepared[int(idx)]
                n = y_norm.shape[0]
                t = sample_train_time(rng, cfg.t_steps)
                dropped = rng.random() < cfg.cond_dropout
                G = self.encoder(obs)
                eps = torch.randn(cfg.K, n, cfg.t_f, 2, dtype=torch.float64)
                x_t = forward_sample(y_norm, t, eps, self.schedule)
                y_hat = self.denoiser.predict_target(
                    x_t, t, None if dropped else G, conditioned=not dropped
                )
                reg = regression_loss(y_norm, y_hat, y_hat)
                div = diversity_loss(y_hat, y_norm, cfg.tau)
                ebm = ebm_loss(self.energy, y_norm, y_hat, G.detach(),
                               anchors=anchors, alpha=cfg.ebm_alpha)
                parts = parts + torch.stack([reg, div, ebm]).detach()
                total = total + total_loss((reg, div, ebm), weights)
            count = len(batch)
            total = total / count
            opt.zero_grad()
            total.backward()
            opt.step()
            decay.step()
            record = {
                "step": step,
                "total": float(total.item()),
                "reg": float(parts[0].item() / count),
                "div": float(parts[1].item() / count),
                "ebm": float(parts[2].item() / count),
            }
            history.append(record)
            if record["total"] < best[0]:
                best = (record["total"],
                        copy.deepcopy(self.state_dict()), step)
        self.denoiser.mark_fitted()
        if best[1] is not None:
            best[1]["denoiser"]["fitted_flag"] = self.denoiser.fitted_flag.clone()
        self._best_state = best[1] if best[1] is not None else self.state_dict()
        self._best_step = best[2] if best[2] >= 0 else 0
        return history

    # -- prediction ---------------------------------------------------

    def training_regression_loss(self, pairs, t_grid=None, noise_seed: int = 0) -> float:
        """Conditioned regression loss averaged over a fixed (t, noise) grid.

        A deterministic gauge of fit quality: no step sampling, no dropout.
        """
        self._require_stats()
        cfg = self.config
        if t_grid is None:
            t_grid = sorted({0, cfg.t_steps // 4, cfg.t_steps // 2,
                             (3 * cfg.t_steps) // 4, cfg.t_steps - 1})
        gen = torch.Generator().manual_seed(noise_seed)
        losses = []
        with torch.no_grad():
            for obs, fut in pairs:
                obs, fut = _sort_pair(obs, fut)
                y_norm = torch.from_numpy(
                    normalize(to_relative(fut, obs), self.norm_stats)
                )
                G = self.encoder(obs)
                for t in t_grid:
                    eps = torch.randn(cfg.K, y_norm.shape[0], cfg.t_f, 2,
                                      generator=gen, dtype=torch.float64)
                    x_t = forward_sample(y_norm, int(t), eps, self.schedule)
                    y_hat = self.denoiser.predict_target(x_t, int(t), G)
                    losses.append(regression_loss(y_norm, y_hat, y_hat).item())
        return float(np.mean(losses))

    def _require_stats(self) -> None:
        if self.norm_stats is None:
            raise DataError("normalization stats missing; fit or load first")

    def predict_window(self, obs: ObservationWindow, seed: int = 0,
                       w: float | None = None, rerank: bool = False,
                       refined: bool = True,
                       hypotheses: int | None = None) -> PredictionSet:
        """K world-frame hypotheses for one window, energy-reweighted.

        The window is sorted into canonical agent order for the networks and
        the hypotheses are unsorted back to the caller's agent order.
        ``hypotheses`` asks for only the first few of the K trained
        hypothesis slots; each one is the same trajectory it would be in a
        full draw.
        """
        self._require_stats()
        if rerank and not refined:
            raise ConfigError("rerank requires refined weights")
        cfg = self.config
        if w is None:
            w = cfg.guidance_scale
        k_use = cfg.K if hypotheses is None else int(hypotheses)
        if not 1 <= k_use <= cfg.K:
            raise ConfigError(
                f"hypotheses must lie in [1, {cfg.K}], got {k_use}"
            )
        order = canonical_agent_order(obs)
        unsort = np.argsort(order)
        x_sorted = obs.X[order]
        with torch.no_grad():
            G = self.encoder(x_sorted)[:k_use]
            raw = self.denoiser.sample(G, k_use, self.schedule, w=w, seed=seed)
        rel = denormalize(raw.trajectories, self.norm_stats)
        world = from_relative(rel, x_sorted)
        preds = PredictionSet(trajectories=world)
        if refined:
            preds = refine(self.energy, preds, G,
                           anchors=x_sorted[:, -1, :], rerank=rerank)
        return PredictionSet(trajectories=preds.trajectories[:, unsort],
                             weights=preds.weights)
