"""Modality Mixer encoders and the self-attention fusion encoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import MLP, MultiHeadAttention, MaskError, masked_mean
from .scene import (AGENT_TYPES, AGENT_WIDTH, LANE_WIDTH, META_WIDTH, STATIC_TYPES, STATIC_WIDTH,
                    TRAFFIC_STATES, SceneBatch)

REFERENCE_WIDTH = 192
REFERENCE_HEADS = 6


@dataclass
class SceneMemory:
    tokens: torch.Tensor  # (B, N, d)
    mask: torch.Tensor  # (B, N) bool
    y: torch.Tensor  # (B, d) scene conditioning, time embedding not yet added


class MixerBlock(nn.Module):
    def __init__(self, seq_len: int, d: int, expansion: int = 2):
        super().__init__()
        self.norm_tok = nn.LayerNorm(d)
        self.token_mlp = MLP(seq_len, seq_len * expansion, seq_len)
        self.norm_ch = nn.LayerNorm(d)
        self.channel_mlp = MLP(d, d * expansion, d)

    def forward(self, x: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        x = x + self.token_mlp(self.norm_tok(x).transpose(-1, -2)).transpose(-1, -2)
        x = x * keep
        x = x + self.channel_mlp(self.norm_ch(x))
        return x * keep


class MixerEncoder(nn.Module):
    """Encode ``(..., S, width)`` feature sequences into one ``d``-vector per token.

    Masked sequence entries are zeroed on entry and after every block, and the
    final mean pool runs over unmasked entries only.
    """

    def __init__(self, width: int, seq_len: int, d: int, depth: int = 2):
        super().__init__()
        self.width, self.seq_len = width, seq_len
        self.channel_pre = nn.Linear(width, d)
        self.token_pre = nn.Linear(seq_len, seq_len)
        self.blocks = nn.ModuleList(MixerBlock(seq_len, d) for _ in range(depth))
        self.norm = nn.LayerNorm(d)

    def forward(self, feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.width or feats.shape[-2] != self.seq_len:
            raise ValueError(f"expected (..., {self.seq_len}, {self.width}) features, got {tuple(feats.shape)}")
        lead = feats.shape[:-2]
        x = feats.reshape(-1, self.seq_len, self.width)
        m = mask.reshape(-1, self.seq_len)
        keep = m.unsqueeze(-1).to(x.dtype)
        x = self.channel_pre(x * keep) * keep
        x = self.token_pre(x.transpose(-1, -2)).transpose(-1, -2) * keep
        for blk in self.blocks:
            x = blk(x, keep)
        pooled = masked_mean(self.norm(x), m, dim=1)
        return pooled.reshape(*lead, -1)


class LaneEncoder(nn.Module):
    def __init__(self, seq_len: int, d: int, depth: int):
        super().__init__()
        self.mixer = MixerEncoder(LANE_WIDTH, seq_len, d, depth)
        self.traffic = nn.Linear(len(TRAFFIC_STATES), d, bias=False)
        self.speed = nn.Linear(1, d)
        self.unknown_speed = nn.Parameter(torch.zeros(d))

    def forward(self, pts, traffic, speed, known, valid) -> torch.Tensor:
        point_mask = valid.unsqueeze(-1).expand(pts.shape[:-1])
        emb = self.mixer(pts, point_mask) + self.traffic(traffic)
        k = known.unsqueeze(-1).to(pts.dtype)
        emb = emb + k * self.speed(speed.unsqueeze(-1)) + (1 - k) * self.unknown_speed
        return emb * valid.unsqueeze(-1).to(pts.dtype)


def positional_semantic_meta(batch: SceneBatch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """7-dim ``(x, y, cos, sin, onehot_modality)`` rows for agents, statics and lanes."""

    def tag(shape, i, ref):
        t = torch.zeros(*shape, 3, dtype=ref.dtype)
        t[..., i] = 1.0
        return t

    ag = batch.agent_feats[:, :, -1, :4]
    st = batch.static_feats[..., :4]
    mid = batch.lane_pts.shape[2] // 2
    ln = batch.lane_pts[:, :, mid, :4]
    return (torch.cat([ag, tag(ag.shape[:-1], 0, ag)], -1),
            torch.cat([st, tag(st.shape[:-1], 1, st)], -1),
            torch.cat([ln, tag(ln.shape[:-1], 2, ln)], -1))


class FusionLayer(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = MLP(d, 4 * d, d)

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), key_mask=mask)
        return x + self.mlp(self.norm2(x))


class SceneEncoder(nn.Module):
    """Tokenize, encode and fuse a :class:`SceneBatch` into :class:`SceneMemory`."""

    def __init__(self, d: int = REFERENCE_WIDTH, n_heads: int = REFERENCE_HEADS, history: int = 21,
                 lane_points: int = 20, mixer_depth: int = 2, fusion_depth: int = 3):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} must be divisible by n_heads={n_heads}")
        self.d, self.n_heads = d, n_heads
        self.agent_mixer = MixerEncoder(AGENT_WIDTH, history, d, mixer_depth)
        self.agent_type = nn.Linear(len(AGENT_TYPES), d, bias=False)
        self.static_mixer = MixerEncoder(STATIC_WIDTH, 1, d, mixer_depth)
        self.static_type = nn.Linear(len(STATIC_TYPES), d, bias=False)
        self.lanes = LaneEncoder(lane_points, d, mixer_depth)
        self.meta = nn.Linear(META_WIDTH, d)
        self.fusion = nn.ModuleList(FusionLayer(d, n_heads) for _ in range(fusion_depth))
        self.norm = nn.LayerNorm(d)
        self.y_proj = nn.Linear(2 * d, d)

    def positional_semantic_embed(self, meta: torch.Tensor) -> torch.Tensor:
        return self.meta(meta)

    def encode_tokens(self, batch: SceneBatch) -> tuple[torch.Tensor, torch.Tensor]:
        agent_meta, static_meta, lane_meta = positional_semantic_meta(batch)
        agents = self.agent_mixer(batch.agent_feats, batch.agent_frame_mask) + self.agent_type(batch.agent_type)
        statics = (self.static_mixer(batch.static_feats.unsqueeze(-2), batch.static_valid.unsqueeze(-1))
                   + self.static_type(batch.static_type))
        lanes = self.lanes(batch.lane_pts, batch.lane_traffic, batch.lane_speed,
                           batch.lane_speed_known, batch.lane_valid)
        tokens = torch.cat([agents + self.meta(agent_meta), statics + self.meta(static_meta),
                            lanes + self.meta(lane_meta)], dim=1)
        mask = torch.cat([batch.agent_valid, batch.static_valid, batch.lane_valid], dim=1)
        return tokens * mask.unsqueeze(-1).to(tokens.dtype), mask

    def fuse(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if not bool(mask.any(dim=-1).all()):
            raise MaskError("fuse_scene needs at least one unmasked token per scene")
        x = tokens
        for layer in self.fusion:
            x = layer(x, mask)
        return self.norm(x) * mask.unsqueeze(-1).to(x.dtype)

    def route_summary(self, batch: SceneBatch) -> torch.Tensor:
        emb = self.lanes(batch.route_pts, batch.route_traffic, batch.route_speed,
                         batch.route_speed_known, batch.route_valid)
        return masked_mean(emb, batch.route_valid, dim=1)

    def forward(self, batch: SceneBatch) -> SceneMemory:
        tokens, mask = self.encode_tokens(batch)
        memory = self.fuse(tokens, mask)
        pooled = masked_mean(memory, mask, dim=1)
        y = self.y_proj(torch.cat([pooled, self.route_summary(batch)], dim=-1))
        return SceneMemory(memory, mask, y)
