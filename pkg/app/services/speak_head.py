"""
Speak head and training objectives.

The head mixes the last K layers' hidden states at a unit's closing token with
softmax-normalized weights and maps the mix through a two-layer MLP to one
speak logit. It runs parallel to the LM head: timing gradients never reach the
LM head and LM gradients never reach the head's MLP.
"""

import logging
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from app.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100


class SpeakHead(nn.Module):
    """Aggregation logits over the last K layers plus a two-layer GELU MLP."""

    def __init__(self, d_model: int, d_hidden: int, k_layers: int):
        super().__init__()
        self.k_layers = k_layers
        self.alpha = nn.Parameter(torch.zeros(k_layers))
        self.mlp = nn.Sequential(
            nn.Linear(d_model, d_hidden),
            nn.GELU(),
            nn.Linear(d_hidden, 1),
        )

    def forward(self, layer_states: torch.Tensor) -> torch.Tensor:
        """(..., K, d_model) -> speak logits (...)."""
        return self.mlp(aggregate_layers(layer_states, self.alpha)).squeeze(-1)


def aggregate_layers(layer_states: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Convex combination sum_k softmax(alpha)_k * h_k over the K axis (-2)."""
    if layer_states.shape[-2] != alpha.shape[-1]:
        raise DataError(
            f"expected {alpha.shape[-1]} layer states, got {layer_states.shape[-2]}"
        )
    weights = torch.softmax(alpha, dim=-1)
    return torch.einsum("k,...kd->...d", weights, layer_states)


def speak_prob(aggregated: torch.Tensor, head: SpeakHead) -> torch.Tensor:
    """sigmoid(MLP(aggregated))."""
    return torch.sigmoid(head.mlp(aggregated).squeeze(-1))


def speak_logits_at(hiddens: torch.Tensor, positions: torch.Tensor, head: SpeakHead) -> torch.Tensor:
    """
    Speak logits read at token `positions` from per-layer hiddens (n_layers, N, d).
    """
    states = hiddens[-head.k_layers:, positions]  # (K, M, d)
    return head(states.transpose(0, 1))


def _check_timing_inputs(p: torch.Tensor, z: torch.Tensor, w_pos: float):
    if p.shape != z.shape:
        raise DataError(f"timing loss needs equal lengths, got {tuple(p.shape)} and {tuple(z.shape)}")
    if p.numel() == 0:
        raise DataError("timing loss over an empty sequence")
    if w_pos < 0:
        raise ConfigError(f"w_pos must be >= 0, got {w_pos}")


def timing_loss(p: torch.Tensor, z: torch.Tensor, w_pos: float) -> torch.Tensor:
    """Weighted BCE: -(1/T) sum_t [w_pos z_t log p_t + (1 - z_t) log(1 - p_t)]."""
    _check_timing_inputs(p, z, w_pos)
    if bool(((p <= 0) | (p >= 1)).any()):
        raise DataError("speak probabilities must lie strictly inside (0, 1)")
    z = z.to(p.dtype)
    weight = torch.where(z > 0.5, torch.full_like(p, w_pos), torch.ones_like(p))
    return F.binary_cross_entropy(p, z, weight=weight)


def timing_loss_with_logits(logits: torch.Tensor, z: torch.Tensor, w_pos: float) -> torch.Tensor:
    """Same objective as `timing_loss` on sigmoid(logits), computed stably."""
    _check_timing_inputs(logits, z, w_pos)
    pos_weight = torch.tensor(w_pos, dtype=logits.dtype, device=logits.device)
    return F.binary_cross_entropy_with_logits(logits, z.to(logits.dtype), pos_weight=pos_weight)


def lm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """
    Autoregressive LM loss summed over response positions of one sample.

    `targets[i]` is the token predicted from position i, IGNORE_INDEX elsewhere.
    """
    if not bool((targets != IGNORE_INDEX).any()):
        raise DataError("LM loss needs at least one response target")
    return F.cross_entropy(logits, targets, ignore_index=IGNORE_INDEX, reduction="sum")


def total_loss(l_time: torch.Tensor, l_lm: Optional[torch.Tensor], lam: float) -> torch.Tensor:
    """L_total = L_time + lambda * L_LM; the LM term is absent without QA samples."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if l_lm is None or lam == 0:
        return l_time
    return l_time + lam * l_lm
