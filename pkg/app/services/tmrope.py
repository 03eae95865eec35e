"""
Chunked time-aligned 3D rotary positions.

Each unit continues the global timeline from the previous unit's maximum ID:
bos markers share the base, fused video tokens share base+1 with (h, w) from
their grid cell, audio token k sits at base+1+k (40 ms ticks) and the eos
markers close the unit one tick after the latest ID.
"""

import logging
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import torch

from app.errors import ConfigError, DataError
from app.models import Marker, Modality, MultimodalUnit, PositionAssignment, PositionTriple

logger = logging.getLogger(__name__)

_OPENING = (Marker.VISION_BOS, Marker.AUDIO_BOS)
_CLOSING = (Marker.AUDIO_EOS, Marker.VISION_EOS)


def _check_layout(unit: MultimodalUnit):
    layout = unit.layout
    if len(layout) < 5:
        raise DataError(f"unit {unit.unit_index}: layout too short ({len(layout)} tokens)")
    if tuple(tok.marker for tok in layout[:2]) != _OPENING:
        raise DataError(f"unit {unit.unit_index}: layout must open with vision_bos, audio_bos")
    if tuple(tok.marker for tok in layout[-2:]) != _CLOSING:
        raise DataError(f"unit {unit.unit_index}: layout must close with audio_eos, vision_eos")

    body = [tok.modality for tok in layout[2:-2]]
    if Modality.MARKER in body:
        raise DataError(f"unit {unit.unit_index}: markers inside the unit body")
    if Modality.AUDIO in body and Modality.VIDEO in body[body.index(Modality.AUDIO):]:
        raise DataError(f"unit {unit.unit_index}: video tokens after audio tokens")


def assign_positions(unit: MultimodalUnit, base: int) -> PositionAssignment:
    """Assign (t, h, w) to every token of a unit starting at `base`."""
    if base < 0:
        raise DataError(f"base must be >= 0, got {base}")
    _check_layout(unit)

    triples: List[PositionTriple] = []
    max_t = base
    for tok in unit.layout[:-2]:
        if tok.modality == Modality.MARKER:
            triple = PositionTriple(t=base)
        elif tok.modality == Modality.VIDEO:
            triple = PositionTriple(t=base + 1, h=tok.row, w=tok.col)
        else:
            triple = PositionTriple(t=base + 1 + tok.audio_index)
        max_t = max(max_t, triple.t)
        triples.append(triple)

    eos = PositionTriple(t=max_t + 1)
    triples.extend([eos, eos])

    base_out = max(max(p.t, p.h, p.w) for p in triples)
    return PositionAssignment(triples=triples, base_in=base, base_out=base_out)


def assign_text_positions(n_tokens: int, base: int) -> PositionAssignment:
    """Text tokens continue the timeline one tick apart with h = w = 0."""
    triples = [PositionTriple(t=base + 1 + i) for i in range(n_tokens)]
    return PositionAssignment(triples=triples, base_in=base, base_out=base + n_tokens)


def positions_tensor(assignments: Iterable[PositionAssignment]) -> torch.Tensor:
    """Stack assignments into an (N, 3) long tensor."""
    rows = [(p.t, p.h, p.w) for a in assignments for p in a.triples]
    return torch.tensor(rows, dtype=torch.long).reshape(-1, 3)


def _frequency_plan(head_dim: int, partition: Sequence[int], theta_base: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per angle slot: which component (0=t, 1=h, 2=w) it reads and its inverse frequency."""
    if head_dim % 2 != 0:
        raise ConfigError(f"head_dim must be even, got {head_dim}")
    if len(partition) != 3 or any(n < 0 for n in partition) or sum(partition) != head_dim // 2:
        raise ConfigError(
            f"partition {tuple(partition)} must be three non-negative counts summing to {head_dim // 2}"
        )

    components = np.concatenate([np.full(n, c, dtype=np.int64) for c, n in enumerate(partition)])
    slots = np.concatenate([np.arange(n, dtype=np.float64) for n in partition])
    inv_freq = theta_base ** (-2.0 * slots / head_dim)
    return components, inv_freq


def rotary_angles(
    triple: PositionTriple,
    head_dim: int,
    partition: Sequence[int],
    theta_base: float = 10000.0,
) -> np.ndarray:
    """Angle vector of length head_dim/2: t drives the first n_t slots, then h, then w."""
    components, inv_freq = _frequency_plan(head_dim, partition, theta_base)
    values = np.array([triple.t, triple.h, triple.w], dtype=np.float64)
    return values[components] * inv_freq


def rotary_angle_table(
    positions: torch.Tensor,
    head_dim: int,
    partition: Sequence[int],
    theta_base: float = 10000.0,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Vectorized `rotary_angles` over an (N, 3) position tensor -> (N, head_dim/2)."""
    components, inv_freq = _frequency_plan(head_dim, partition, theta_base)
    picked = positions[:, torch.from_numpy(components)].to(torch.float64)
    return (picked * torch.from_numpy(inv_freq)).to(dtype)


def apply_rotary(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """
    Rotate interleaved channel pairs of x (..., N, head_dim) by angles (N, head_dim/2).
    """
    cos = torch.cos(angles)
    sin = torch.sin(angles)
    x_even = x[..., ::2]
    x_odd = x[..., 1::2]
    rotated = torch.stack((x_even * cos - x_odd * sin, x_even * sin + x_odd * cos), dim=-1)
    return rotated.flatten(-2)
