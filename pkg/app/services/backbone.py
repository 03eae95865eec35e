"""
Tiny causal transformer over unit streams.

Pre-norm residual blocks with GELU feed-forward and 3D rotary attention. The
same attention kernel serves single-pass encoding (`forward_full`) and
incremental encoding against a persistent KV cache (`forward_step`).
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from app.errors import DataError, NumericalError
from app.models import (
    TOKEN_TABLE_SIZE,
    FeatureDims,
    Marker,
    Modality,
    ModelConfig,
    MultimodalUnit,
    SegmentKind,
    SequenceSegment,
)
from app.services.speak_head import IGNORE_INDEX, SpeakHead
from app.services.tmrope import (
    apply_rotary,
    assign_positions,
    assign_text_positions,
    positions_tensor,
    rotary_angle_table,
)

logger = logging.getLogger(__name__)

_MARKER_IDS = {int(m) for m in Marker}


class KVCache:
    """
    Per-layer keys/values of the encoded stream prefix with their positions.

    Append-only within a session; every layer holds the same number of entries.
    """

    def __init__(self, n_layers: int):
        self.n_layers = n_layers
        self.keys: List[Optional[torch.Tensor]] = [None] * n_layers
        self.values: List[Optional[torch.Tensor]] = [None] * n_layers
        self.positions = torch.zeros((0, 3), dtype=torch.long)
        self.length = 0

    def update(self, layer_idx: int, key: torch.Tensor, value: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Append (n_heads, n, head_dim) keys/values to a layer and return the full layer cache."""
        if self.keys[layer_idx] is None:
            self.keys[layer_idx] = key
            self.values[layer_idx] = value
        else:
            self.keys[layer_idx] = torch.cat((self.keys[layer_idx], key), dim=-2)
            self.values[layer_idx] = torch.cat((self.values[layer_idx], value), dim=-2)
        return self.keys[layer_idx], self.values[layer_idx]

    def commit(self, positions: torch.Tensor):
        """Record the positions of the chunk every layer has just appended."""
        self.positions = torch.cat((self.positions, positions), dim=0)
        self.length += positions.shape[0]
        for k in self.keys:
            if k is not None and k.shape[-2] != self.length:
                raise DataError(f"cache layers out of sync: {k.shape[-2]} != {self.length}")

    @property
    def max_temporal(self) -> int:
        return int(self.positions[:, 0].max()) if self.length else -1

    def detach(self) -> "KVCache":
        """Drop autograd history so a long session does not retain graphs."""
        self.keys = [None if k is None else k.detach() for k in self.keys]
        self.values = [None if v is None else v.detach() for v in self.values]
        return self

    def state_dict(self) -> Dict[str, object]:
        return {
            "n_layers": self.n_layers,
            "keys": [None if k is None else k.detach().clone() for k in self.keys],
            "values": [None if v is None else v.detach().clone() for v in self.values],
            "positions": self.positions.clone(),
            "length": self.length,
        }

    @classmethod
    def from_state_dict(cls, state: Dict[str, object]) -> "KVCache":
        cache = cls(int(state["n_layers"]))
        cache.keys = list(state["keys"])
        cache.values = list(state["values"])
        cache.positions = state["positions"]
        cache.length = int(state["length"])
        return cache


class Block(nn.Module):
    """Pre-norm attention + GELU feed-forward residual block."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.attn_norm = nn.LayerNorm(d)
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.o_proj = nn.Linear(d, d)
        self.ff_norm = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, config.ff_dim), nn.GELU(), nn.Linear(config.ff_dim, d))

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        return x.view(x.shape[0], self.n_heads, self.head_dim).transpose(0, 1)

    def forward(self, x, angles, cache: KVCache, layer_idx: int) -> torch.Tensor:
        n = x.shape[0]
        past = cache.length
        h = self.attn_norm(x)
        q = apply_rotary(self._heads(self.q_proj(h)), angles)
        k = apply_rotary(self._heads(self.k_proj(h)), angles)
        v = self._heads(self.v_proj(h))
        keys, values = cache.update(layer_idx, k, v)

        scores = torch.matmul(q, keys.transpose(-2, -1)) / math.sqrt(self.head_dim)
        allowed = torch.arange(past + n).unsqueeze(0) <= (past + torch.arange(n)).unsqueeze(1)
        scores = scores.masked_fill(~allowed, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = torch.matmul(attn, values).transpose(0, 1).reshape(n, -1)

        x = x + self.o_proj(out)
        return x + self.ff(self.ff_norm(x))


class StreamModel(nn.Module):
    """All learnable parameters: embeddings, blocks, LM head and speak head."""

    def __init__(self, config: ModelConfig, features: FeatureDims):
        super().__init__()
        d = config.d_model
        self.config = config
        self.features = features

        self.token_embedding = nn.Embedding(TOKEN_TABLE_SIZE, d)
        self.video_proj = nn.Linear(features.d_v, d)
        self.audio_proj = nn.Linear(features.d_a, d)
        self.query_tag = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList([Block(config) for _ in range(config.n_layers)])
        self.final_norm = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, TOKEN_TABLE_SIZE)
        self.speak_head = SpeakHead(d, config.speak_hidden, config.k_layers)

        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.query_tag, std=0.02)

    @property
    def dtype(self) -> torch.dtype:
        return self.lm_head.weight.dtype

    def encoder_parameters(self) -> List[nn.Parameter]:
        """Modality projections playing the frozen-encoder role."""
        return list(self.video_proj.parameters()) + list(self.audio_proj.parameters())

    def encode(self, x: torch.Tensor, positions: torch.Tensor, cache: KVCache) -> Tuple[torch.Tensor, torch.Tensor]:
        """Run the blocks over a chunk, extending `cache`; returns (hiddens, logits)."""
        cfg = self.config
        angles = rotary_angle_table(positions, cfg.head_dim, cfg.rotary_partition, cfg.theta_base, x.dtype)
        hiddens = []
        for layer_idx, block in enumerate(self.blocks):
            x = block(x, angles, cache, layer_idx)
            hiddens.append(x)
        cache.commit(positions)
        logits = self.lm_head(self.final_norm(x))
        return torch.stack(hiddens), logits


def build_model(config: ModelConfig, features: FeatureDims, seed: int = 0, dtype: torch.dtype = torch.float32) -> StreamModel:
    """Deterministically initialized model; the global RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = StreamModel(config, features)
    return model.to(dtype)


@dataclass
class PreparedSequence:
    """Parameter-independent layout of a segment sequence, reusable across steps."""
    token_ids: torch.Tensor  # (N,), -1 at feature tokens
    video_rows: torch.Tensor
    video_feats: torch.Tensor  # (Nv, d_v)
    audio_rows: torch.Tensor
    audio_feats: torch.Tensor  # (Na, d_a)
    query_mask: torch.Tensor  # (N,) bool
    positions: torch.Tensor  # (N, 3)
    unit_ends: torch.Tensor  # (T,) index of each unit's vision_eos
    targets: torch.Tensor  # (N,) LM targets, IGNORE_INDEX outside responses
    base_out: int

    @property
    def length(self) -> int:
        return self.token_ids.shape[0]

    @property
    def has_response(self) -> bool:
        return bool((self.targets != IGNORE_INDEX).any())


def _unit_rows(unit: MultimodalUnit, features: FeatureDims, offset: int):
    ids, video_rows, audio_rows = [], [], []
    video_feats, audio_feats = [], []
    if unit.video.shape[-1] != features.d_v or unit.audio.shape[-1] != features.d_a:
        raise DataError(
            f"unit {unit.unit_index}: feature dims ({unit.video.shape[-1]}, {unit.audio.shape[-1]}) "
            f"do not match projections ({features.d_v}, {features.d_a})"
        )
    for i, tok in enumerate(unit.layout):
        if tok.modality == Modality.MARKER:
            if tok.marker is None or int(tok.marker) not in _MARKER_IDS:
                raise DataError(f"unit {unit.unit_index}: unknown marker {tok.marker!r}")
            ids.append(int(tok.marker))
        elif tok.modality == Modality.VIDEO:
            ids.append(-1)
            video_rows.append(offset + i)
            video_feats.append(unit.video[tok.row, tok.col])
        else:
            ids.append(-1)
            audio_rows.append(offset + i)
            audio_feats.append(unit.audio[tok.audio_index])
    return ids, video_rows, video_feats, audio_rows, audio_feats


def prepare_segments(segments: Sequence[SequenceSegment], features: FeatureDims, base: int = 0) -> PreparedSequence:
    """Flatten segments into token ids, feature rows, positions and LM targets."""
    ids: List[int] = []
    video_rows, video_feats, audio_rows, audio_feats = [], [], [], []
    query_mask: List[bool] = []
    assignments = []
    unit_ends: List[int] = []
    targets: List[int] = []

    for seg in segments:
        offset = len(ids)
        if seg.kind == SegmentKind.UNIT:
            u_ids, v_rows, v_feats, a_rows, a_feats = _unit_rows(seg.unit, features, offset)
            ids.extend(u_ids)
            video_rows.extend(v_rows)
            video_feats.extend(v_feats)
            audio_rows.extend(a_rows)
            audio_feats.extend(a_feats)
            query_mask.extend([False] * len(u_ids))
            targets.extend([IGNORE_INDEX] * len(u_ids))
            assignment = assign_positions(seg.unit, base)
            unit_ends.append(len(ids) - 1)
        else:
            tokens = list(seg.tokens)
            if seg.kind == SegmentKind.QUERY:
                tokens = [int(Marker.QUERY_BOS)] + tokens + [int(Marker.QUERY_EOS)]
            ids.extend(tokens)
            query_mask.extend([seg.kind == SegmentKind.QUERY] * len(tokens))
            targets.extend([IGNORE_INDEX] * len(tokens))
            if seg.kind == SegmentKind.RESPONSE and offset > 0:
                # Position j-1 predicts response token j.
                for j, token in enumerate(tokens):
                    targets[offset + j - 1] = token
            assignment = assign_text_positions(len(tokens), base)
        assignments.append(assignment)
        base = assignment.base_out

    d_v, d_a = features.d_v, features.d_a
    return PreparedSequence(
        token_ids=torch.tensor(ids, dtype=torch.long),
        video_rows=torch.tensor(video_rows, dtype=torch.long),
        video_feats=torch.from_numpy(np.asarray(video_feats, dtype=np.float64).reshape(-1, d_v)),
        audio_rows=torch.tensor(audio_rows, dtype=torch.long),
        audio_feats=torch.from_numpy(np.asarray(audio_feats, dtype=np.float64).reshape(-1, d_a)),
        query_mask=torch.tensor(query_mask, dtype=torch.bool),
        positions=positions_tensor(assignments),
        unit_ends=torch.tensor(unit_ends, dtype=torch.long),
        targets=torch.tensor(targets, dtype=torch.long),
        base_out=base,
    )


def embed(prepared: PreparedSequence, model: StreamModel) -> torch.Tensor:
    """Markers/text via the token table, features via the modality projections."""
    n = prepared.length
    x = torch.zeros((n, model.config.d_model), dtype=model.dtype)
    text_rows = torch.nonzero(prepared.token_ids >= 0).squeeze(-1)
    x = x.index_copy(0, text_rows, model.token_embedding(prepared.token_ids[text_rows]))
    if prepared.video_rows.numel():
        x = x.index_copy(0, prepared.video_rows, model.video_proj(prepared.video_feats.to(model.dtype)))
    if prepared.audio_rows.numel():
        x = x.index_copy(0, prepared.audio_rows, model.audio_proj(prepared.audio_feats.to(model.dtype)))
    return x + prepared.query_mask.unsqueeze(-1).to(model.dtype) * model.query_tag


def embed_unit(unit: MultimodalUnit, model: StreamModel) -> torch.Tensor:
    """Embed one unit: (token_count, d_model) in layout order."""
    segment = SequenceSegment(kind=SegmentKind.UNIT, timestamp=unit.unit_index, unit=unit)
    return embed(prepare_segments([segment], model.features), model)


def forward_step(
    embedded: torch.Tensor,
    positions: torch.Tensor,
    cache: KVCache,
    model: StreamModel,
) -> Tuple[torch.Tensor, torch.Tensor, KVCache]:
    """
    Encode one chunk against the cached prefix.

    Returns per-layer hiddens (n_layers, n, d), logits (n, V) and the extended cache.
    """
    if embedded.shape[0] != positions.shape[0]:
        raise DataError(f"{embedded.shape[0]} embeddings but {positions.shape[0]} positions")
    if cache.length and int(positions[:, 0].min()) < cache.max_temporal:
        raise DataError(
            f"position regression: chunk starts at t={int(positions[:, 0].min())} "
            f"but the cache reaches t={cache.max_temporal}"
        )
    hiddens, logits = model.encode(embedded, positions, cache)
    return hiddens, logits, cache


def forward_full(prepared: PreparedSequence, model: StreamModel) -> Tuple[torch.Tensor, torch.Tensor]:
    """Single-pass causal encoding of a whole sequence."""
    cache = KVCache(model.config.n_layers)
    hiddens, logits, _ = forward_step(embed(prepared, model), prepared.positions, cache, model)
    return hiddens, logits


def layer_states(hiddens: torch.Tensor, position: int, k_layers: int) -> torch.Tensor:
    """Hidden vectors of the last K layers at one token position: (K, d_model)."""
    if not 1 <= k_layers <= hiddens.shape[0]:
        raise DataError(f"K={k_layers} outside [1, {hiddens.shape[0]}]")
    return hiddens[-k_layers:, position]


def backward(loss: torch.Tensor, model: StreamModel, retain_graph: bool = False) -> Dict[str, torch.Tensor]:
    """Exact reverse-mode gradients of a scalar loss for every trainable parameter."""
    if loss.dim() != 0:
        raise DataError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss: {loss.item()}")

    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(
        loss, [p for _, p in named], allow_unused=True, retain_graph=retain_graph
    )
    return {
        name: torch.zeros_like(p) if g is None else g
        for (name, p), g in zip(named, grads)
    }
