"""Joint refinement: a learned energy over a whole hypothesis (all agents'
futures together) reweights the K diffusion hypotheses at inference.

The energy decomposes into per-agent terms and symmetrized pair terms. A
fresh network has zero-initialized output layers, so refinement starts as
the identity (uniform weights) and training moves it away from that.
Refinement never touches trajectory values — only the weight vector.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from trajdiff.core import DataError, PredictionSet

DEFAULT_EBM_HIDDEN = 64


def _to_tensor(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(torch.float64)
    # copy: frozen window/prediction arrays are read-only and torch cannot alias them
    return torch.from_numpy(np.array(value, dtype=np.float64))


class EnergyNetwork(nn.Module):
    """Scores one joint hypothesis: low energy = plausible joint motion.

    The unary head reads an agent's flattened future plus its context vector.
    The pair head reads both agents' futures, their per-step displacement,
    both context vectors, and the relative displacement of their last
    observed positions (the pairwise context).
    """

    def __init__(self, horizon: int = 12, cond_dim: int = 256,
                 hidden: int = DEFAULT_EBM_HIDDEN):
        super().__init__()
        self.horizon = horizon
        self.cond_dim = cond_dim
        feat = 2 * horizon
        self.unary = nn.Sequential(
            nn.Linear(feat + cond_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )
        self.pair = nn.Sequential(
            nn.Linear(3 * feat + 2 * cond_dim + 2, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )
        nn.init.zeros_(self.unary[-1].weight)
        nn.init.zeros_(self.unary[-1].bias)
        nn.init.zeros_(self.pair[-1].weight)
        nn.init.zeros_(self.pair[-1].bias)
        self.double()

    def forward(self, Y_set_k, G, anchors=None) -> torch.Tensor:
        return joint_energy(self, Y_set_k, G, anchors=anchors)


def joint_energy(E_net: EnergyNetwork, Y_set_k, G, anchors=None) -> torch.Tensor:
    """Energy of one joint hypothesis, as a 0-dim tensor (gradable).

    Y_set_k: [N, T_f, 2] futures for every agent of one hypothesis.
    G: [N, cond_dim] per-agent context for that hypothesis.
    anchors: [N, 2] last observed positions, used only for the relative
    displacement inside the pairwise context; defaults to zeros when the
    caller has no observation frame at hand.
    """
    y = _to_tensor(Y_set_k)
    g = _to_tensor(G)
    if y.ndim != 3 or y.shape[-1] != 2:
        raise DataError(f"hypothesis must be [N, T_f, 2], got {tuple(y.shape)}")
    n = y.shape[0]
    if g.shape != (n, E_net.cond_dim):
        raise DataError(
            f"context must be [{n}, {E_net.cond_dim}], got {tuple(g.shape)}"
        )
    if y.shape[1] != E_net.horizon:
        raise DataError(
            f"horizon mismatch: network expects {E_net.horizon}, got {y.shape[1]}"
        )
    if anchors is None:
        anchor = torch.zeros(n, 2, dtype=torch.float64)
    else:
        anchor = _to_tensor(anchors)
        if anchor.shape != (n, 2):
            raise DataError(f"anchors must be [{n}, 2], got {tuple(anchor.shape)}")

    flat = y.reshape(n, -1)
    energy = E_net.unary(torch.cat([flat, g], dim=-1)).sum()

    if n >= 2:
        idx_i, idx_j = torch.triu_indices(n, n, offset=1)
        step_disp = (y[idx_i] - y[idx_j]).reshape(len(idx_i), -1)
        rel = anchor[idx_i] - anchor[idx_j]
        fwd = torch.cat([flat[idx_i], flat[idx_j], step_disp,
                         g[idx_i], g[idx_j], rel], dim=-1)
        rev = torch.cat([flat[idx_j], flat[idx_i], -step_disp,
                         g[idx_j], g[idx_i], -rel], dim=-1)
        energy = energy + 0.5 * (E_net.pair(fwd).sum() + E_net.pair(rev).sum())
    return energy


def hypothesis_energies(E_net, preds: PredictionSet, G=None,
                        anchors=None) -> np.ndarray:
    """Joint energy of each of the K hypotheses, [K] float64.

    E_net is either an EnergyNetwork (needs per-hypothesis context G,
    [K, N, cond_dim]) or any callable mapping one hypothesis [N, T_f, 2] to a
    scalar, e.g. a hand-crafted collision energy.
    """
    k_hyp = preds.trajectories.shape[0]
    if isinstance(E_net, EnergyNetwork):
        if G is None:
            raise DataError("an EnergyNetwork needs the per-hypothesis context G")
        g = _to_tensor(G)
        if g.ndim != 3 or g.shape[0] != k_hyp:
            raise DataError(
                f"context must be [K={k_hyp}, N, cond_dim], got {tuple(g.shape)}"
            )
        with torch.no_grad():
            energies = np.array([
                joint_energy(E_net, preds.trajectories[k], g[k],
                             anchors=anchors).item()
                for k in range(k_hyp)
            ])
    elif callable(E_net):
        energies = np.array([
            float(E_net(preds.trajectories[k])) for k in range(k_hyp)
        ])
    else:
        raise DataError("energy must be an EnergyNetwork or a callable")
    if not np.all(np.isfinite(energies)):
        raise DataError("energy network produced non-finite energies")
    return energies


def energy_weights(energies: np.ndarray) -> np.ndarray:
    """Self-normalized weights exp(-E) / sum, shift-stabilized so the largest
    exponent is zero. Adding any constant to all energies leaves them unchanged."""
    energies = np.asarray(energies, dtype=np.float64)
    shifted = energies - energies.min()
    unnorm = np.exp(-shifted)
    return unnorm / unnorm.sum()


def refine(E_net, preds: PredictionSet, G=None, anchors=None,
           rerank: bool = False) -> PredictionSet:
    """Attach energy-based weights to a uniformly weighted hypothesis set.

    E_net is an EnergyNetwork (with context G) or a per-hypothesis callable.
    Trajectory values pass through bit-exact. With ``rerank`` the hypotheses
    (and their weights) are reordered by descending weight; otherwise order
    is preserved. Expects uniform incoming weights: refining twice would
    double-count the energy.
    """
    k_hyp = preds.trajectories.shape[0]
    if not np.allclose(preds.weights, 1.0 / k_hyp, rtol=0, atol=1e-9):
        raise DataError("refine expects a uniformly weighted hypothesis set")
    weights = energy_weights(hypothesis_energies(E_net, preds, G, anchors=anchors))
    trajectories = preds.trajectories
    if rerank:
        order = np.argsort(-weights, kind="stable")
        trajectories = trajectories[order]
        weights = weights[order]
    return PredictionSet(trajectories=trajectories, weights=weights)


def collision_energy_baseline(Y_set_k, radius: float) -> float:
    """Hand-crafted collision energy: sum over agent pairs and time steps of
    max(0, radius - distance)^2. Zero when everyone keeps their distance."""
    y = np.asarray(Y_set_k, dtype=np.float64)
    if y.ndim != 3 or y.shape[-1] != 2:
        raise DataError(f"hypothesis must be [N, T_f, 2], got {y.shape}")
    if radius < 0:
        raise DataError("radius must be nonnegative")
    n = y.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dist = np.linalg.norm(y[i] - y[j], axis=-1)
            total += float(np.sum(np.maximum(0.0, radius - dist) ** 2))
    return total
