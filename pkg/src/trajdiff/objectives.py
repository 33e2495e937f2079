"""Training losses: target regression with best-of-K, temperature-softmax
KL diversity, the contrastive energy objective, and their weighted total.

All losses are element-mean based so the weights stay scale-free across
agent counts and horizons, and every loss returns a 0-dim tensor that
gradients can flow through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from trajdiff.core import ConfigError, DataError
from trajdiff.refinement import joint_energy

DEFAULT_EBM_ALPHA = 1e-3


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights for the total objective plus the diversity temperature."""

    lambda_reg: float = 1.0
    lambda_div: float = 1.0
    lambda_ebm: float = 0.1
    tau: float = 0.1

    def __post_init__(self) -> None:
        for name in ("lambda_reg", "lambda_div", "lambda_ebm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


def _to_tensor(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(torch.float64)
    # copy: frozen window arrays are read-only and torch cannot alias them
    return torch.from_numpy(np.array(value, dtype=np.float64))


def regression_loss(Y, Y_hat_t, Y_hat_set) -> torch.Tensor:
    """Squared error of the current denoised estimate plus the best-of-K term.

    Y: [N, T_f, 2] ground truth. Y_hat_t: the denoised estimate at the
    sampled diffusion step, [N, T_f, 2] or [K, N, T_f, 2] (per-hypothesis
    estimates are averaged via broadcasting). Y_hat_set: [K, N, T_f, 2]
    full sampled hypotheses for the best-of-K term.
    """
    y = _to_tensor(Y)
    est = _to_tensor(Y_hat_t)
    hyp = _to_tensor(Y_hat_set)
    if y.ndim != 3 or y.shape[-1] != 2:
        raise DataError(f"ground truth must be [N, T_f, 2], got {tuple(y.shape)}")
    if not (est.shape == y.shape
            or (est.ndim == 4 and est.shape[1:] == y.shape)):
        raise DataError(
            f"denoised estimate {tuple(est.shape)} does not match ground truth "
            f"{tuple(y.shape)} (with or without a leading hypothesis axis)"
        )
    if hyp.ndim != 4 or hyp.shape[1:] != y.shape:
        raise DataError(
            f"hypothesis set must be [K, {tuple(y.shape)}], got {tuple(hyp.shape)}"
        )
    fit_term = ((est - y) ** 2).mean()
    per_k = ((hyp - y) ** 2).mean(dim=(1, 2, 3))
    return fit_term + per_k.min()


def diversity_loss(Y_hat_set, Y, tau: float) -> torch.Tensor:
    """KL between softmax-normalized consecutive-step differences.

    Both the predicted set and the (K-broadcast) ground truth are reduced to
    their per-step differences along time, flattened across every axis, and
    turned into distributions with a temperature-tau softmax; the loss is
    KL(predicted || ground truth), which is zero exactly when the two
    normalized difference profiles agree.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    hyp = _to_tensor(Y_hat_set)
    y = _to_tensor(Y)
    if hyp.ndim != 4 or y.ndim != 3 or hyp.shape[1:] != y.shape:
        raise DataError(
            f"need hypotheses [K, N, T_f, 2] with matching ground truth, got "
            f"{tuple(hyp.shape)} and {tuple(y.shape)}"
        )
    if y.shape[1] < 2:
        raise DataError("diversity loss needs at least two future steps")
    d_hyp = hyp[:, :, 1:] - hyp[:, :, :-1]
    d_gt = (y[:, 1:] - y[:, :-1]).unsqueeze(0).expand_as(d_hyp)
    log_p_hyp = torch.log_softmax(d_hyp.reshape(-1) / tau, dim=0)
    log_p_gt = torch.log_softmax(d_gt.reshape(-1) / tau, dim=0)
    return (log_p_hyp.exp() * (log_p_hyp - log_p_gt)).sum()


def ebm_phases(E_net, Y, Y_hat_set, G, anchors=None):
    """Positive-phase, negative-phase, and regularizer pieces of ebm_loss.

    Returns (positive, negative, mean_squared_energy), each a 0-dim tensor.
    The positive phase scores the ground truth against each hypothesis's
    context slice; the negative phase scores the detached samples. Averaging
    both phases over the K context slices keeps them on the same footing, so
    samples equal to the ground truth cancel exactly.
    """
    y = _to_tensor(Y)
    hyp = _to_tensor(Y_hat_set).detach()
    g = _to_tensor(G)
    if hyp.ndim != 4 or hyp.shape[1:] != y.shape:
        raise DataError(
            f"hypothesis set {tuple(hyp.shape)} does not extend ground truth "
            f"{tuple(y.shape)}"
        )
    k_hyp = hyp.shape[0]
    if g.ndim != 3 or g.shape[0] != k_hyp or g.shape[1] != y.shape[0]:
        raise DataError(
            f"context must be [K={k_hyp}, N={y.shape[0]}, cond_dim], "
            f"got {tuple(g.shape)}"
        )
    pos = torch.stack([
        joint_energy(E_net, y, g[k], anchors=anchors) for k in range(k_hyp)
    ])
    neg = torch.stack([
        joint_energy(E_net, hyp[k], g[k], anchors=anchors) for k in range(k_hyp)
    ])
    reg = torch.cat([pos, neg]).pow(2).mean()
    return pos.mean(), neg.mean(), reg


def ebm_loss(E_net, Y, Y_hat_set, G, anchors=None,
             alpha: float = DEFAULT_EBM_ALPHA) -> torch.Tensor:
    """Contrastive energy objective: push ground-truth energy below the
    average sample energy, with an L2 regularizer keeping energies bounded.

    Gradients flow through the energies only; the samples are detached.
    """
    pos, neg, reg = ebm_phases(E_net, Y, Y_hat_set, G, anchors=anchors)
    return pos - neg + alpha * reg


def total_loss(components, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the (regression, diversity, energy) loss components."""
    reg, div, ebm = components
    return (weights.lambda_reg * reg
            + weights.lambda_div * div
            + weights.lambda_ebm * ebm)
