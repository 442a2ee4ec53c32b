"""Instance-guided fusion: select top-K centerness candidates from the
scene feature, relate them with self-attention, aggregate local context
via deformable attention, and write the result back into every BEV cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import (AttentionConfig, DeformableAttention, DeformableSpec,
                        MultiHeadCrossAttention, MultiHeadSelfAttention,
                        ResidualAttentionBlock, sinusoidal_encoding)
from .hsf import SceneBEVFeature


@dataclass
class Heatmap:
    """Per-class BEV grid of centerness logits."""

    logits: torch.Tensor  # (num_classes, W, H)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0]


@dataclass
class InstanceSet:
    features: torch.Tensor   # (K, C)
    positions: torch.Tensor  # (K, 2) BEV (row, col), fractional allowed
    scores: torch.Tensor     # (K,) in [0, 1], non-increasing
    class_ids: torch.Tensor  # (K,) long

    def replace_features(self, features: torch.Tensor) -> "InstanceSet":
        return InstanceSet(features, self.positions, self.scores, self.class_ids)


def topk_heatmap(scores: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Top-k over a (num_classes, W, H) score map, flattened in
    (class, row, col) order; ties broken lexicographically by that order.

    Returns (values (k,), flat indices (k,)).
    """
    flat = scores.reshape(-1)
    order = torch.argsort(flat, descending=True, stable=True)[:k]
    return flat[order], order


class SelectInstances(nn.Module):
    """Centerness heatmap head (two 3x3 convs) plus top-K candidate
    extraction with a linear instance embedding."""

    def __init__(self, cfg: AttentionConfig, num_classes: int):
        super().__init__()
        C = cfg.model_dim
        self.head = nn.Sequential(
            nn.Conv2d(C, C, 3, padding=1), nn.GELU(),
            nn.Conv2d(C, num_classes, 3, padding=1))
        # start near-zero centerness so the focal loss is not swamped by
        # the (overwhelmingly background) negatives
        nn.init.constant_(self.head[-1].bias, -4.6)
        self.embed = nn.Linear(C, C)
        self.num_classes = num_classes

    def heatmap(self, scene: SceneBEVFeature) -> Heatmap:
        logits = self.head(scene.grid.permute(2, 0, 1).unsqueeze(0)).squeeze(0)
        return Heatmap(logits=logits)

    def forward(self, scene: SceneBEVFeature, k: int,
                flat_indices: torch.Tensor | None = None) -> tuple[InstanceSet, Heatmap]:
        """``flat_indices`` pins the selection to precomputed (class, row,
        col) triples, e.g. for finite-difference checks where the top-K
        choice (piecewise constant in the input) must not flip."""
        W, H = scene.spec.W, scene.spec.H
        if k > W * H * self.num_classes:
            raise ValueError("k exceeds number of (class, row, col) triples")
        hm = self.heatmap(scene)
        if flat_indices is None:
            scores, flat = topk_heatmap(torch.sigmoid(hm.logits), k)
        else:
            flat = flat_indices
            scores = torch.sigmoid(hm.logits).reshape(-1)[flat]
        cls = flat // (W * H)
        rem = flat % (W * H)
        rows, cols = rem // H, rem % H
        feats = self.embed(scene.grid[rows, cols])
        positions = torch.stack([rows, cols], dim=1).to(scene.grid.dtype)
        return InstanceSet(feats, positions, scores, cls), hm


class InstanceSelfAttention(nn.Module):
    """Residual self-attention over the instance tokens; positions and
    scores pass through untouched."""

    def __init__(self, cfg: AttentionConfig, positional: bool = True):
        super().__init__()
        self.block = ResidualAttentionBlock(cfg, MultiHeadSelfAttention(cfg))
        self.positional = positional
        self.dim = cfg.model_dim

    def forward(self, instances: InstanceSet) -> InstanceSet:
        x = instances.features
        if self.positional:
            x = x + sinusoidal_encoding(instances.positions, self.dim)
        return instances.replace_features(self.block(x))


class AggregateContext(nn.Module):
    """Align the scene feature with a 3x3 conv, then let each instance pull
    D deformable samples around its own BEV position."""

    def __init__(self, cfg: AttentionConfig, spec: DeformableSpec):
        super().__init__()
        C = cfg.model_dim
        self.align = nn.Conv2d(C, C, 3, padding=1)
        self.deform = DeformableAttention(cfg, spec)

    def forward(self, instances: InstanceSet, scene: SceneBEVFeature) -> InstanceSet:
        aligned = self.align(scene.grid.permute(2, 0, 1).unsqueeze(0)
                             ).squeeze(0).permute(1, 2, 0)
        ctx = self.deform(instances.features, instances.positions, aligned)
        return instances.replace_features(instances.features + ctx)


class InstanceToScene(nn.Module):
    """Every BEV cell queries the instance set through cross-attention and
    the update is added residually."""

    def __init__(self, cfg: AttentionConfig, positional: bool = True):
        super().__init__()
        self.mca = MultiHeadCrossAttention(cfg)
        self.norm_q = nn.LayerNorm(cfg.model_dim)
        self.norm_kv = nn.LayerNorm(cfg.model_dim)
        self.positional = positional
        self.dim = cfg.model_dim
        self.identity = False

    def forward(self, scene: SceneBEVFeature, instances: InstanceSet) -> SceneBEVFeature:
        if instances.features.shape[0] < 1:
            raise ValueError("empty instance set")
        if self.identity:
            return scene
        W, H, C = scene.grid.shape
        q = self.norm_q(scene.grid.reshape(W * H, C))
        if self.positional:
            rows = torch.arange(W).repeat_interleave(H)
            cols = torch.arange(H).repeat(W)
            pos = torch.stack([rows, cols], dim=1).to(scene.grid.dtype)
            q = q + sinusoidal_encoding(pos, self.dim)
        kv = self.norm_kv(instances.features)
        upd = self.mca(q, kv).reshape(W, H, C)
        return SceneBEVFeature(grid=scene.grid + upd, spec=scene.spec)


class IGF(nn.Module):
    """Full instance-guided fusion pass over the scene feature."""

    def __init__(self, cfg: AttentionConfig, num_classes: int,
                 num_instances: int = 200, deform_spec: DeformableSpec | None = None,
                 positional: bool = True):
        super().__init__()
        self.num_instances = num_instances
        self.select = SelectInstances(cfg, num_classes)
        self.relate = InstanceSelfAttention(cfg, positional)
        self.aggregate = AggregateContext(cfg, deform_spec or DeformableSpec())
        self.to_scene = InstanceToScene(cfg, positional)

    def forward(self, scene: SceneBEVFeature,
                flat_indices: torch.Tensor | None = None
                ) -> tuple[SceneBEVFeature, Heatmap, InstanceSet]:
        instances, hm = self.select(scene, self.num_instances, flat_indices)
        instances = self.relate(instances)
        instances = self.aggregate(instances, scene)
        out = self.to_scene(scene, instances)
        return out, hm, instances
