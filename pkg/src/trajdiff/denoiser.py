"""Conditional diffusion core: noising schedule, guidance-fused target
prediction, classifier-free guidance, and the deterministic sampler.

The network predicts the clean normalized target directly; the noise
estimate needed by the probability-flow update is recovered algebraically
from the prediction and the schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from trajdiff.core import ConfigError, DataError, NotFittedError, PredictionSet
from trajdiff.layers import BatchStableLinear, TransformerBlock, batch_stable_mode

DEFAULT_T_STEPS = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2


# ---------------------------------------------------------------------------
# schedule and closed-form noising
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise levels; ``alpha_bar[t]`` is the cumulative product of
    (1 - beta) through step t."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64).reshape(-1)
        if beta.size == 0 or beta.shape != alpha_bar.shape:
            raise ConfigError("beta and alpha_bar must be equal-length, non-empty")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ConfigError("beta values must lie strictly inside (0, 1)")
        if np.any(np.diff(beta) < 0):
            raise ConfigError("beta must be nondecreasing")
        if np.any(np.diff(alpha_bar) >= 0) or np.any(alpha_bar <= 0) or np.any(alpha_bar > 1):
            raise ConfigError("alpha_bar must be strictly decreasing within (0, 1]")
        expected = np.cumprod(1.0 - beta)
        if not np.allclose(alpha_bar, expected, rtol=0, atol=1e-12):
            raise ConfigError("alpha_bar is not the cumulative product of (1 - beta)")
        for name, arr in (("beta", beta), ("alpha_bar", alpha_bar)):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T_steps(self) -> int:
        return self.beta.shape[0]

    @classmethod
    def linear(
        cls,
        t_steps: int = DEFAULT_T_STEPS,
        beta_start: float = DEFAULT_BETA_START,
        beta_end: float = DEFAULT_BETA_END,
    ) -> "DiffusionSchedule":
        if t_steps < 1:
            raise ConfigError("need at least one diffusion step")
        beta = np.linspace(beta_start, beta_end, t_steps, dtype=np.float64)
        return cls(beta=beta, alpha_bar=np.cumprod(1.0 - beta))

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T_steps:
            raise ConfigError(f"diffusion step {t} outside [0, {self.T_steps})")
        return t

    def alpha_bar_prev(self, t: int) -> float:
        """alpha_bar of the previous step; 1.0 below step 0 (the clean state)."""
        t = self.check_step(t)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def forward_sample(x0, t: int, eps, schedule: DiffusionSchedule):
    """Closed-form noising: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    t = schedule.check_step(t)
    ab = float(schedule.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def cfg_combine(pred_cond, pred_uncond, w: float):
    """Classifier-free guidance: (1 + w) * conditioned - w * unconditioned."""
    return (1.0 + w) * pred_cond - w * pred_uncond


def sample_train_time(seed, t_steps: int = DEFAULT_T_STEPS) -> int:
    """Draw a training diffusion step from a logit-normal over (0, 1).

    u ~ Normal(0, 1); t = floor(sigmoid(u) * t_steps), clamped into range.
    ``seed`` may be an int or a live numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.standard_normal()
    s = 1.0 / (1.0 + math.exp(-u))
    return min(max(int(s * t_steps), 0), t_steps - 1)


# ---------------------------------------------------------------------------
# the denoising network
# ---------------------------------------------------------------------------

class TrajectoryDenoiser(nn.Module):
    """Predicts clean normalized futures from noisy ones under guidance.

    Inputs are [K, N, T_f, 2] noisy targets plus a per-hypothesis guidance
    condition [K, N, cond_dim]. The hypothesis axis is a pure batch axis:
    all mixing happens across agents within a hypothesis, so each hypothesis
    is computed independently of how many others ride in the same call.

    Agent tokens are assumed to arrive in canonical order (sorted by first
    observed position); the pipeline layer owns that sort and its inverse.
    """

    def __init__(
        self,
        horizon: int = 12,
        cond_dim: int = 256,
        d_model: int = 128,
        heads: int = 8,
        num_layers: int = 4,
        ff_dim: int = 512,
        t_steps: int = DEFAULT_T_STEPS,
        max_agents: int = 16,
    ):
        super().__init__()
        self.horizon = horizon
        self.cond_dim = cond_dim
        self.d_model = d_model
        self.t_steps = t_steps
        self.max_agents = max_agents
        self.target_embed = BatchStableLinear(2 * horizon, d_model)
        self.time_embed = nn.Embedding(t_steps, d_model)
        self.agent_embed = nn.Embedding(max_agents, d_model)
        self.null_condition = nn.Parameter(torch.zeros(cond_dim))
        self.cond_proj = BatchStableLinear(cond_dim, d_model)
        self.fuse_q = BatchStableLinear(d_model, d_model, bias=False)
        self.fuse_k = BatchStableLinear(d_model, d_model, bias=False)
        self.fuse_v = BatchStableLinear(d_model, d_model, bias=False)
        self.fuse_out = BatchStableLinear(2 * d_model, d_model)
        self.blocks = nn.ModuleList(
            TransformerBlock(d_model, heads, ff_dim) for _ in range(num_layers)
        )
        self.head = BatchStableLinear(d_model, 2 * horizon)
        self.register_buffer("fitted_flag", torch.zeros((), dtype=torch.float64))
        self.double()

    # ------------------------------------------------------------------
    # fitted state
    # ------------------------------------------------------------------

    @property
    def fitted(self) -> bool:
        return bool(self.fitted_flag.item() > 0.5)

    def mark_fitted(self) -> None:
        with torch.no_grad():
            self.fitted_flag.fill_(1.0)

    # ------------------------------------------------------------------
    # guidance fusion
    # ------------------------------------------------------------------

    def fusion_attention(self, x_t_emb: torch.Tensor, t: int, G: torch.Tensor) -> torch.Tensor:
        """Cross-attention weights from noisy-target queries to guidance
        tokens, [K, N, N]; rows sum to one."""
        k_hyp, n, _ = x_t_emb.shape
        if G.shape[:2] != (k_hyp, n) or G.shape[2] != self.cond_dim:
            raise DataError(
                f"guidance shape {tuple(G.shape)} incompatible with "
                f"[{k_hyp}, {n}, {self.cond_dim}]"
            )
        if n > self.max_agents:
            raise DataError(f"more than {self.max_agents} agents unsupported")
        t = int(t)
        if not 0 <= t < self.t_steps:
            raise ConfigError(f"diffusion step {t} outside [0, {self.t_steps})")
        t_e = self.time_embed.weight[t]
        a_e = self.agent_embed.weight[:n]
        queries = self.fuse_q(x_t_emb + t_e + a_e)
        keys = self.fuse_k(self.cond_proj(G))
        scores = (queries.unsqueeze(2) * keys.unsqueeze(1)).sum(dim=-1)
        return torch.softmax(scores / math.sqrt(self.d_model), dim=-1)

    def acim_fuse(self, x_t_emb: torch.Tensor, t: int, G: torch.Tensor) -> torch.Tensor:
        """Fuse guidance into the noisy-target embedding via cross-attention.

        Queries come from the embedded noisy target plus step and agent-order
        embeddings; keys/values from the projected guidance. The attended
        guidance is concatenated with the original embedding feature-wise and
        projected back to d_model. Shapes: [K, N, d_model] -> [K, N, d_model].
        """
        attn = self.fusion_attention(x_t_emb, t, G)
        values = self.fuse_v(self.cond_proj(G))
        attended = (attn.unsqueeze(-1) * values.unsqueeze(1)).sum(dim=2)
        return self.fuse_out(torch.cat([x_t_emb, attended], dim=-1))

    # ------------------------------------------------------------------
    # target prediction
    # ------------------------------------------------------------------

    def predict_target(
        self,
        x_t: torch.Tensor,
        t: int,
        G: torch.Tensor | None,
        conditioned: bool = True,
    ) -> torch.Tensor:
        """Estimate the clean normalized target from a noisy one.

        When ``conditioned`` is False the guidance argument is ignored
        entirely and a learned null condition is used instead (the
        classifier-free branch), so the output is bit-independent of G.
        """
        if x_t.ndim != 4 or x_t.shape[-1] != 2 or x_t.shape[2] != self.horizon:
            raise DataError(
                f"x_t must be [K, N, {self.horizon}, 2], got {tuple(x_t.shape)}"
            )
        k_hyp, n = x_t.shape[:2]
        if conditioned:
            if G is None:
                raise DataError("conditioned prediction requires guidance")
            cond = torch.as_tensor(G, dtype=torch.float64)
        else:
            cond = self.null_condition.expand(k_hyp, n, self.cond_dim)
        x_emb = self.target_embed(x_t.reshape(k_hyp, n, 2 * self.horizon))
        h = self.acim_fuse(x_emb, t, cond)
        for block in self.blocks:
            h = block(h)
        return self.head(h).reshape(k_hyp, n, self.horizon, 2)

    # ------------------------------------------------------------------
    # deterministic sampling
    # ------------------------------------------------------------------

    def sample(
        self,
        G: torch.Tensor,
        K: int,
        schedule: DiffusionSchedule,
        w: float = 1.0,
        seed: int = 0,
    ) -> PredictionSet:
        """Draw K hypotheses by deterministic probability-flow denoising.

        Hypothesis k's initial noise comes from its own generator seeded
        with seed + k, and the whole loop runs in batch-stable mode, so a
        given hypothesis is bit-identical no matter how many others are
        requested alongside it. With guidance weight w = 0 only the
        conditioned branch is evaluated.
        """
        if not self.fitted:
            raise NotFittedError(
                "denoiser parameters are untrained; train or load a checkpoint "
                "(or mark_fitted() for synthetic parameter sets)"
            )
        G = torch.as_tensor(G, dtype=torch.float64)
        if G.ndim != 3 or G.shape[2] != self.cond_dim:
            raise DataError(f"guidance must be [K, N, {self.cond_dim}]")
        if K != G.shape[0]:
            raise ConfigError(
                f"requested K={K} but guidance carries {G.shape[0]} hypotheses"
            )
        if schedule.T_steps > self.t_steps:
            raise ConfigError(
                f"schedule has {schedule.T_steps} steps but the network embeds "
                f"only {self.t_steps}"
            )
        n = G.shape[1]
        noise = []
        for k in range(K):
            gen = torch.Generator().manual_seed(int(seed) + k)
            noise.append(
                torch.randn(n, self.horizon, 2, generator=gen, dtype=torch.float64)
            )
        x = torch.stack(noise)

        with torch.no_grad(), batch_stable_mode():
            for t in reversed(range(schedule.T_steps)):
                pred_cond = self.predict_target(x, t, G, conditioned=True)
                if w != 0.0:
                    pred_uncond = self.predict_target(x, t, None, conditioned=False)
                    x0_hat = cfg_combine(pred_cond, pred_uncond, w)
                else:
                    x0_hat = pred_cond
                ab_t = float(schedule.alpha_bar[t])
                ab_prev = schedule.alpha_bar_prev(t)
                eps_hat = (x - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
                x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat

        return PredictionSet(trajectories=x.numpy())
