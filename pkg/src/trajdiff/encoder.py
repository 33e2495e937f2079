"""Scene context encoder: per-hypothesis interest features plus global
interaction features, concatenated into the guidance condition.

The encoder consumes observed histories only. Each agent's history is
shifted so its last observed position sits at the origin, and the global
interaction path additionally sees every agent's last position relative to
the scene centroid — inter-agent geometry survives while the whole encoder
stays translation invariant.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from trajdiff.core import ConfigError, DataError
from trajdiff.layers import TransformerBlock, sinusoidal_table

MAX_HISTORY = 64


def _history_tensor(obs) -> torch.Tensor:
    """Accept an ObservationWindow, array, or tensor; return [N, T_h, 2] float64."""
    if hasattr(obs, "X"):
        obs = obs.X
    if isinstance(obs, torch.Tensor):
        x = obs.to(torch.float64)
    else:
        # copy: window arrays are frozen read-only and torch cannot alias them
        x = torch.from_numpy(np.array(obs, dtype=np.float64))
    if x.ndim != 3 or x.shape[-1] != 2:
        raise DataError(f"history must be [N, T_h, 2], got {tuple(x.shape)}")
    return x


class ContextEncoder(nn.Module):
    """Maps observed histories to the guidance condition G.

    G stacks, per hypothesis k and agent n, an interest feature (attention
    pooled over the agent's history, with a separate attention column per
    hypothesis) and a global interaction feature (transformer over agent
    tokens, shared across hypotheses): shape [K, N, 2 * width].
    """

    def __init__(
        self,
        width: int = 128,
        heads: int = 8,
        num_layers: int = 4,
        ff_dim: int = 512,
        num_hypotheses: int = 20,
    ):
        super().__init__()
        if num_hypotheses < 1:
            raise ConfigError("need at least one hypothesis")
        self.width = width
        self.num_hypotheses = num_hypotheses
        self.embed = nn.Linear(4, width)
        self.register_buffer("positional", sinusoidal_table(MAX_HISTORY, width))
        self.interest_in = nn.Linear(width, 4 * width)
        self.interest_out = nn.Linear(4 * width, num_hypotheses)
        self.anchor_embed = nn.Linear(2, width)
        self.blocks = nn.ModuleList(
            TransformerBlock(width, heads, ff_dim) for _ in range(num_layers)
        )
        self.double()

    @property
    def guidance_dim(self) -> int:
        return 2 * self.width

    # ------------------------------------------------------------------
    # history embedding
    # ------------------------------------------------------------------

    def embed_history(self, obs) -> torch.Tensor:
        """Embed per-step (shifted position, velocity) features, [N, T_h, width].

        Velocity is the forward difference with the first step repeated;
        positions are shifted so each agent's last observed point is the
        origin.
        """
        x = _history_tensor(obs)
        if x.shape[1] < 2:
            raise DataError("need at least two observed steps")
        if x.shape[1] > MAX_HISTORY:
            raise DataError(f"history longer than supported {MAX_HISTORY}")
        shifted = x - x[:, -1:, :]
        vel = x[:, 1:, :] - x[:, :-1, :]
        vel = torch.cat([vel[:, :1, :], vel], dim=1)
        return self.embed(torch.cat([shifted, vel], dim=-1))

    def positional_table(self, t_h: int) -> torch.Tensor:
        """Deterministic sinusoidal table for a t_h-step history, [t_h, width]."""
        return self.positional[:t_h]

    # ------------------------------------------------------------------
    # interest features (per-hypothesis attention over time)
    # ------------------------------------------------------------------

    def _interest_logits(self, H: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
        return self.interest_out(torch.tanh(self.interest_in(H + P)))

    def interest_attention(self, H: torch.Tensor, P: torch.Tensor | None = None) -> torch.Tensor:
        """Attention over time per agent and hypothesis, [N, T_h, K]; columns
        sum to one along the time axis."""
        if P is None:
            P = self.positional_table(H.shape[1])
        return torch.softmax(self._interest_logits(H, P), dim=1)

    def agent_context(self, H: torch.Tensor, P: torch.Tensor | None = None) -> torch.Tensor:
        """Attention-pool each agent's history into one feature per hypothesis.

        Returns [K, N, width] where row (k, n) is a convex combination of
        agent n's history embedding under hypothesis k's attention column.
        """
        scores = self.interest_attention(H, P)
        return torch.einsum("ntk,ntd->knd", scores, H)

    # ------------------------------------------------------------------
    # global interaction features (transformer across agents)
    # ------------------------------------------------------------------

    def global_context(self, H: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
        """Mix agent tokens through the block stack, [1, N, width].

        Tokens are time-pooled history embeddings plus an embedding of each
        agent's last observed position relative to the scene centroid — the
        per-agent shift in :meth:`embed_history` erases where agents sit
        relative to one another, and interaction needs exactly that.
        """
        if anchors.ndim != 2 or anchors.shape != (H.shape[0], 2):
            raise DataError(
                f"anchors must be [N, 2] matching H, got {tuple(anchors.shape)}"
            )
        offsets = anchors - anchors.mean(dim=0, keepdim=True)
        tokens = (H.mean(dim=1) + self.anchor_embed(offsets)).unsqueeze(0)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    # ------------------------------------------------------------------
    # guidance assembly
    # ------------------------------------------------------------------

    def build_guidance(
        self,
        G1: torch.Tensor,
        G2: torch.Tensor,
        K: int | None = None,
    ) -> torch.Tensor:
        """Tile G2 across hypotheses and concatenate features: [K, N, 2*width]."""
        if G1.ndim != 3 or G2.ndim != 3 or G2.shape[0] != 1:
            raise DataError(
                f"expected G1 [K, N, d] and G2 [1, N, d], got {tuple(G1.shape)} "
                f"and {tuple(G2.shape)}"
            )
        if K is None:
            K = G1.shape[0]
        if K != G1.shape[0]:
            raise DataError(f"K={K} does not match G1 hypothesis axis {G1.shape[0]}")
        if G1.shape[1:] != G2.shape[1:]:
            raise DataError("G1/G2 agent or feature axes disagree")
        return torch.cat([G1, G2.expand(K, -1, -1)], dim=-1)

    def forward(self, obs) -> torch.Tensor:
        """Full guidance condition for one window, [K, N, 2*width]."""
        x = _history_tensor(obs)
        H = self.embed_history(x)
        G1 = self.agent_context(H)
        G2 = self.global_context(H, x[:, -1, :])
        return self.build_guidance(G1, G2)
