"""Attention primitives: multi-head self/cross attention, shifted-window
attention over BEV maps, and deformable attention around reference points.

All modules optionally record their last softmax weights when
``capture_weights`` is set, which the tests use to inspect locality and
normalization directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import bilinear_sample


@dataclass
class AttentionConfig:
    model_dim: int = 32
    num_heads: int = 4

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class WindowSpec:
    window_size: int = 6
    shift: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for s in self.shift:
            if not 0 <= s < self.window_size:
                raise ValueError("shift components must be in [0, window_size)")

    @classmethod
    def shifted(cls, window_size: int = 6) -> "WindowSpec":
        return cls(window_size, (window_size // 2, window_size // 2))


@dataclass
class DeformableSpec:
    num_points: int = 16

    def __post_init__(self):
        if self.num_points < 1:
            raise ValueError("num_points must be >= 1")


def _split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    # (..., S, C) -> (..., heads, S, C/heads)
    *lead, S, C = x.shape
    return x.view(*lead, S, num_heads, C // num_heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, S, d = x.shape
    return x.transpose(-3, -2).reshape(*lead, S, h * d)


class MultiHeadAttention(nn.Module):
    """Shared Q/K/V/O projection machinery for self and cross attention."""

    def __init__(self, cfg: AttentionConfig, bias: bool = True):
        super().__init__()
        self.cfg = cfg
        C = cfg.model_dim
        self.q_proj = nn.Linear(C, C, bias=bias)
        self.k_proj = nn.Linear(C, C, bias=bias)
        self.v_proj = nn.Linear(C, C, bias=bias)
        self.out_proj = nn.Linear(C, C, bias=bias)
        self.capture_weights = False
        self.last_weights = None

    def _attend(self, q, k, v, attn_bias=None, key_mask=None):
        """q: (..., S, C); k, v: (..., T, C); key_mask: (..., T) bool.

        attn_bias is added to the pre-softmax logits, broadcast over
        (..., heads, S, T).
        """
        h = self.cfg.num_heads
        qh = _split_heads(self.q_proj(q), h)
        kh = _split_heads(self.k_proj(k), h)
        vh = _split_heads(self.v_proj(v), h)
        logits = qh @ kh.transpose(-1, -2) / math.sqrt(self.cfg.head_dim)
        if attn_bias is not None:
            logits = logits + attn_bias
        if key_mask is not None:
            # large finite negative: underflows to exactly zero weight while
            # keeping all-masked rows (uniform softmax) free of NaNs
            logits = logits.masked_fill(~key_mask.unsqueeze(-2).unsqueeze(-3), -1e9)
        weights = torch.softmax(logits, dim=-1)
        if self.capture_weights:
            self.last_weights = weights.detach()
        return self.out_proj(_merge_heads(weights @ vh))


class MultiHeadSelfAttention(MultiHeadAttention):
    """Scaled dot-product self-attention over a token sequence.

    Masked-out rows are excluded from keys and their outputs are zeroed.
    """

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-2] < 1:
            raise ValueError("need at least one token")
        if mask is not None:
            if not mask.any(dim=-1).all():
                raise ValueError("attention over an empty key set is undefined")
            out = self._attend(x, x, x, key_mask=mask)
            return out * mask.unsqueeze(-1).to(out.dtype)
        return self._attend(x, x, x)


class MultiHeadCrossAttention(MultiHeadAttention):
    """Each query row attends over all key/value rows."""

    def forward(self, q: torch.Tensor, kv: torch.Tensor,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        if kv.shape[-2] < 1:
            raise ValueError("empty key/value set")
        return self._attend(q, kv, kv, key_mask=key_mask)


class WindowAttention(nn.Module):
    """(Shifted-)window self-attention over a (W, H, C) BEV map.

    The map is padded to a multiple of the window size, optionally rolled by
    the shift, partitioned into windows, attended per window with a mask that
    blocks interaction across the cyclic boundary and with padding, then
    rolled back and cropped.
    """

    def __init__(self, cfg: AttentionConfig, spec: WindowSpec,
                 relative_bias: bool = True):
        super().__init__()
        self.spec = spec
        self.attn = MultiHeadAttention(cfg)
        M = spec.window_size
        self.relative_bias = relative_bias
        if relative_bias:
            self.bias_table = nn.Parameter(
                torch.zeros((2 * M - 1) ** 2, cfg.num_heads))
            coords = torch.stack(torch.meshgrid(
                torch.arange(M), torch.arange(M), indexing="ij"), dim=-1).reshape(-1, 2)
            rel = coords[:, None] - coords[None, :] + (M - 1)
            self.register_buffer("bias_index", rel[..., 0] * (2 * M - 1) + rel[..., 1],
                                 persistent=False)

    @property
    def capture_weights(self):
        return self.attn.capture_weights

    @capture_weights.setter
    def capture_weights(self, value):
        self.attn.capture_weights = value

    @property
    def last_weights(self):
        return self.attn.last_weights

    @staticmethod
    def partition(x: torch.Tensor, M: int) -> torch.Tensor:
        """(W, H, C) with W, H multiples of M -> (num_windows, M*M, C)."""
        W, H, C = x.shape
        x = x.view(W // M, M, H // M, M, C)
        return x.permute(0, 2, 1, 3, 4).reshape(-1, M * M, C)

    @staticmethod
    def reverse(windows: torch.Tensor, M: int, W: int, H: int) -> torch.Tensor:
        C = windows.shape[-1]
        x = windows.view(W // M, H // M, M, M, C)
        return x.permute(0, 2, 1, 3, 4).reshape(W, H, C)

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        W, H, C = feature_map.shape
        M = self.spec.window_size
        if M > min(W, H):
            raise ValueError(f"window size {M} exceeds map size {W}x{H}")
        pad_w = (-W) % M
        pad_h = (-H) % M
        x = F.pad(feature_map.permute(2, 0, 1), (0, pad_h, 0, pad_w)).permute(1, 2, 0)
        valid = torch.zeros(x.shape[:2], dtype=torch.bool)
        valid[:W, :H] = True

        sr, sc = self.spec.shift
        if (sr, sc) != (0, 0):
            x = torch.roll(x, shifts=(-sr, -sc), dims=(0, 1))
            valid = torch.roll(valid, shifts=(-sr, -sc), dims=(0, 1))
            region = self._region_ids(x.shape[0], x.shape[1], M, sr, sc)
        else:
            region = None

        win = self.partition(x, M)                       # (nW, M*M, C)
        win_valid = self.partition(valid.unsqueeze(-1).to(x.dtype), M)[..., 0] > 0.5

        bias = None
        if self.relative_bias:
            bias = self.bias_table[self.bias_index].permute(2, 0, 1)  # (h, M*M, M*M)
        if region is not None:
            reg = self.partition(region.unsqueeze(-1).to(x.dtype), M)[..., 0]
            same = (reg.unsqueeze(-1) == reg.unsqueeze(-2))
            block = torch.where(same, torch.zeros((), dtype=x.dtype),
                                torch.full((), -1e9, dtype=x.dtype))
            bias = block.unsqueeze(1) if bias is None else bias.unsqueeze(0) + block.unsqueeze(1)

        out = self.attn._attend(win, win, win, attn_bias=bias, key_mask=win_valid)
        out = out * win_valid.unsqueeze(-1).to(out.dtype)
        y = self.reverse(out, M, x.shape[0], x.shape[1])
        if (sr, sc) != (0, 0):
            y = torch.roll(y, shifts=(sr, sc), dims=(0, 1))
        return y[:W, :H]

    @staticmethod
    def _region_ids(Wp: int, Hp: int, M: int, sr: int, sc: int) -> torch.Tensor:
        """Swin-style region labels after a cyclic shift of (-sr, -sc)."""
        ids = torch.zeros(Wp, Hp, dtype=torch.long)
        row_bands = (slice(0, Wp - M), slice(Wp - M, Wp - sr), slice(Wp - sr, Wp))
        col_bands = (slice(0, Hp - M), slice(Hp - M, Hp - sc), slice(Hp - sc, Hp))
        n = 0
        for rb in row_bands:
            for cb in col_bands:
                ids[rb, cb] = n
                n += 1
        return ids


def sinusoidal_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of (..., 2) positions into (..., dim)."""
    half = dim // 4
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=positions.dtype) / max(half, 1))
    out = []
    for axis in range(2):
        ang = positions[..., axis:axis + 1] * freq
        out.extend([torch.sin(ang), torch.cos(ang)])
    enc = torch.cat(out, dim=-1)
    if enc.shape[-1] < dim:
        pad = torch.zeros(*enc.shape[:-1], dim - enc.shape[-1], dtype=enc.dtype)
        enc = torch.cat([enc, pad], dim=-1)
    return enc


class DeformableAttention(nn.Module):
    """Samples a (W, H, C) value map at learned offsets around a reference
    point and blends the samples with query-predicted softmax weights.

    The offset head starts at zero and the weight head uniform, so the module
    initially reduces to a single bilinear lookup at the reference point.
    """

    def __init__(self, cfg: AttentionConfig, spec: DeformableSpec):
        super().__init__()
        self.spec = spec
        C, D = cfg.model_dim, spec.num_points
        self.offset_head = nn.Linear(C, 2 * D)
        self.weight_head = nn.Linear(C, D)
        self.v_proj = nn.Linear(C, C)
        self.out_proj = nn.Linear(C, C)
        nn.init.zeros_(self.offset_head.weight)
        nn.init.zeros_(self.offset_head.bias)
        nn.init.zeros_(self.weight_head.weight)
        nn.init.zeros_(self.weight_head.bias)
        self.capture_weights = False
        self.last_weights = None

    def forward(self, query: torch.Tensor, ref_point: torch.Tensor,
                value_map: torch.Tensor) -> torch.Tensor:
        """query (..., C), ref_point (..., 2) in cell units, value_map (W, H, C)."""
        D = self.spec.num_points
        offsets = self.offset_head(query).view(*query.shape[:-1], D, 2)
        weights = torch.softmax(self.weight_head(query), dim=-1)
        if self.capture_weights:
            self.last_weights = weights.detach()
        locs = ref_point.unsqueeze(-2) + offsets            # (..., D, 2)
        values = self.v_proj(value_map)
        samples = bilinear_sample(values, locs)             # (..., D, C)
        blended = (samples * weights.unsqueeze(-1)).sum(dim=-2)
        return self.out_proj(blended)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * dim
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


class ResidualAttentionBlock(nn.Module):
    """Pre-norm residual wrapper: x + attn(norm(x)), then x + ffn(norm(x)).

    ``identity`` is a debug switch that bypasses the attention pass entirely,
    leaving only the plumbing around it.
    """

    def __init__(self, cfg: AttentionConfig, attention: nn.Module,
                 use_ffn: bool = True):
        super().__init__()
        self.attention = attention
        self.norm1 = nn.LayerNorm(cfg.model_dim)
        self.use_ffn = use_ffn
        if use_ffn:
            self.norm2 = nn.LayerNorm(cfg.model_dim)
            self.ffn = FeedForward(cfg.model_dim)
        self.identity = False

    def forward(self, x, *args, **kwargs):
        if not self.identity:
            x = x + self.attention(self.norm1(x), *args, **kwargs)
            if self.use_ffn:
                x = x + self.ffn(self.norm2(x))
        return x
