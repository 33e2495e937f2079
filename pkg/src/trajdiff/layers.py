"""Hand-rolled attention and transformer blocks with batch-extent-stable math.

The deterministic sampler promises that hypothesis k of a batched forward is
bit-identical to the same hypothesis run alone. CPU GEMM kernels do not honor
that: the low bits of a matmul row change with the number of rows in the
call (measured in this environment for every shape tried, float32 and
float64). Reductions driven per output element — elementwise multiply
followed by ``sum`` over a trailing axis — are stable, as are layer norm,
softmax, and all elementwise ops.

Consequently attention here always uses multiply+sum contractions (token
counts are small), and ``BatchStableLinear`` switches from GEMM to the
multiply+sum path inside :func:`batch_stable_mode`, which the sampler enters
for its whole denoising loop. Training stays on the fast GEMM path, where
cross-batch bit identity is not part of any contract.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import torch
from torch import nn

_BATCH_STABLE = False


@contextmanager
def batch_stable_mode():
    """Route all BatchStableLinear calls through batch-extent-stable math."""
    global _BATCH_STABLE
    previous = _BATCH_STABLE
    _BATCH_STABLE = True
    try:
        yield
    finally:
        _BATCH_STABLE = previous


def batch_stable_enabled() -> bool:
    return _BATCH_STABLE


class BatchStableLinear(nn.Linear):
    """nn.Linear whose batch-stable path computes each output element by a
    fixed-order reduction over the input axis, independent of batch extent."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not _BATCH_STABLE:
            return super().forward(x)
        y = (x.unsqueeze(-1) * self.weight.transpose(0, 1)).sum(dim=-2)
        if self.bias is not None:
            y = y + self.bias
        return y


def sinusoidal_table(length: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Fixed sin/cos positional table, [length, dim]; dim must be even."""
    if dim % 2 != 0:
        raise ValueError(f"positional table width must be even, got {dim}")
    pos = torch.arange(length, dtype=dtype).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=dtype)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), idx / dim)
    table = torch.zeros(length, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table


def attention_mix(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention via multiply+sum contractions.

    q, k, v: [..., n_tokens, head_dim]; attention is over the token axis.
    """
    head_dim = q.shape[-1]
    scores = (q.unsqueeze(-2) * k.unsqueeze(-3)).sum(dim=-1) / math.sqrt(head_dim)
    weights = torch.softmax(scores, dim=-1)
    return (weights.unsqueeze(-1) * v.unsqueeze(-3)).sum(dim=-2)


class MultiHeadSelfAttention(nn.Module):
    """Self-attention over the token axis of [B, n, dim]."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.proj_q = BatchStableLinear(dim, dim)
        self.proj_k = BatchStableLinear(dim, dim)
        self.proj_v = BatchStableLinear(dim, dim)
        self.proj_out = BatchStableLinear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        shape = (b, n, self.heads, self.head_dim)
        q = self.proj_q(x).view(shape).transpose(1, 2)
        k = self.proj_k(x).view(shape).transpose(1, 2)
        v = self.proj_v(x).view(shape).transpose(1, 2)
        mixed = attention_mix(q, k, v).transpose(1, 2).reshape(b, n, self.dim)
        return self.proj_out(mixed)


class TransformerBlock(nn.Module):
    """Post-norm residual block: self-attention then a two-layer feed-forward."""

    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm_attn = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            BatchStableLinear(dim, ff_dim),
            nn.ReLU(),
            BatchStableLinear(ff_dim, dim),
        )
        self.norm_ff = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm_attn(x + self.attn(x))
        return self.norm_ff(x + self.ff(x))
