"""Hierarchical scene fusion: lift point-wise image features into BEV,
fuse with the point-cloud BEV map, then enrich with window attention at
grid and region granularity.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import (AttentionConfig, MultiHeadSelfAttention,
                        ResidualAttentionBlock, WindowAttention, WindowSpec)
from .geometry import (BEVGridSpec, CameraCalibration, PillarAssignment,
                       PointCloud, bilinear_sample, project_points)


@dataclass
class ImageFeatureMap:
    """Per-camera dense feature grids sharing one shape and pixel stride."""

    maps: torch.Tensor  # (num_cameras, H_f, W_f, C)
    stride: float       # image pixels per feature cell

    def __post_init__(self):
        if self.maps.ndim != 4:
            raise ValueError("maps must be (num_cameras, H_f, W_f, C)")


@dataclass
class SceneBEVFeature:
    grid: torch.Tensor  # (W, H, C)
    spec: BEVGridSpec

    def __post_init__(self):
        if self.grid.shape[:2] != (self.spec.W, self.spec.H):
            raise ValueError(
                f"grid {tuple(self.grid.shape[:2])} does not match spec "
                f"{(self.spec.W, self.spec.H)}")


def gather_point_image_features(cloud: PointCloud, images: ImageFeatureMap,
                                calibs: list[CameraCalibration]) -> tuple[torch.Tensor, torch.Tensor]:
    """Project all points and sample their image features.

    Returns (features (N, C), visible (N,) bool). Invisible points get a
    zero feature. Pixel coordinates are rescaled by the feature stride
    before sampling; sampling coordinates are (row, col) = (v, u) / stride.
    """
    proj = project_points(cloud, calibs)
    N = len(cloud)
    C = images.maps.shape[-1]
    feats = torch.zeros(N, C, dtype=images.maps.dtype)
    for ci in range(images.maps.shape[0]):
        sel = proj.camera_index == ci
        if not sel.any():
            continue
        uv = proj.uv[sel] / images.stride
        rc = torch.stack([uv[:, 1], uv[:, 0]], dim=1)  # (v, u) -> (row, col)
        feats[sel] = bilinear_sample(images.maps[ci], rc.to(images.maps.dtype))
    return feats, proj.valid


class PointToGrid(nn.Module):
    """Per-pillar self-attention over point image features, max-pooled into
    a dense BEV map. With ``use_attention=False`` the points are sum-pooled
    instead (the plain fused baseline).
    """

    def __init__(self, cfg: AttentionConfig, use_attention: bool = True,
                 point_encoding: bool = True):
        super().__init__()
        self.use_attention = use_attention
        self.point_encoding = point_encoding
        if use_attention:
            self.attn = MultiHeadSelfAttention(cfg)
            if point_encoding:
                # offset-from-pillar-center (x, y, z) + intensity
                self.point_embed = nn.Linear(4, cfg.model_dim)

    def forward(self, assignment: PillarAssignment, cloud: PointCloud,
                images: ImageFeatureMap, calibs: list[CameraCalibration],
                spec: BEVGridSpec) -> SceneBEVFeature:
        feats, visible = gather_point_image_features(cloud, images, calibs)
        C = feats.shape[-1]
        idx = assignment.indices.clamp(min=0)
        tok = feats[idx] * assignment.mask.unsqueeze(-1).to(feats.dtype)  # (P, L, C)
        vis = visible[idx] & assignment.mask

        if self.use_attention:
            if self.point_encoding:
                centers = spec.cell_center(assignment.cells).to(feats.dtype)
                rel = cloud.points[idx].to(feats.dtype).clone()
                rel[..., :2] -= centers.unsqueeze(1)
                extra = torch.cat([rel, cloud.intensity[idx].to(feats.dtype).unsqueeze(-1)], dim=-1)
                tok = tok + self.point_embed(extra) * assignment.mask.unsqueeze(-1).to(feats.dtype)
            has_vis = vis.any(dim=1)
            pooled = torch.zeros(assignment.num_pillars, C, dtype=feats.dtype)
            if has_vis.any():
                attended = self.attn(tok[has_vis], mask=vis[has_vis])
                # max over valid points only
                neg = torch.finfo(feats.dtype).min
                masked = attended.masked_fill(~vis[has_vis].unsqueeze(-1), neg)
                pooled[has_vis] = masked.max(dim=1).values
        else:
            pooled = (tok * vis.unsqueeze(-1).to(tok.dtype)).sum(dim=1)

        grid = torch.zeros(spec.W, spec.H, C, dtype=feats.dtype)
        grid[assignment.cells[:, 0], assignment.cells[:, 1]] = pooled
        return SceneBEVFeature(grid=grid, spec=spec)


class BEVFuse(nn.Module):
    """Concatenate two BEV maps and fuse with one 3x3 conv, then an optional
    layer norm and GELU."""

    def __init__(self, channels: int, normalize: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.normalize = normalize
        if normalize:
            self.norm = nn.LayerNorm(channels)

    def forward(self, b_img: SceneBEVFeature, b_pts: SceneBEVFeature) -> SceneBEVFeature:
        if b_img.spec != b_pts.spec:
            raise ValueError("BEV specs differ")
        x = torch.cat([b_img.grid, b_pts.grid], dim=-1)
        y = self.conv(x.permute(2, 0, 1).unsqueeze(0)).squeeze(0).permute(1, 2, 0)
        if self.normalize:
            y = F.gelu(self.norm(y))
        return SceneBEVFeature(grid=y, spec=b_img.spec)


class GridToRegion(nn.Module):
    """One unshifted window-attention pass (inter-grid) followed by one
    shifted pass (inter-region), each as a pre-norm residual block."""

    def __init__(self, cfg: AttentionConfig, window_size: int = 6,
                 relative_bias: bool = True):
        super().__init__()
        self.inter_grid = ResidualAttentionBlock(
            cfg, WindowAttention(cfg, WindowSpec(window_size), relative_bias))
        self.inter_region = ResidualAttentionBlock(
            cfg, WindowAttention(cfg, WindowSpec.shifted(window_size), relative_bias))

    def forward(self, b_fused: SceneBEVFeature) -> SceneBEVFeature:
        x = self.inter_grid(b_fused.grid)
        x = self.inter_region(x)
        return SceneBEVFeature(grid=x, spec=b_fused.spec)


class PillarBEVEncoder(nn.Module):
    """Stand-in point-cloud BEV encoder: per-pillar occupancy statistics
    followed by two 3x3 convs."""

    STATS = 5  # occupancy, normalized count, mean z, max z, mean intensity

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(self.STATS, channels, 3, padding=1), nn.GELU(),
            nn.Conv2d(channels, channels, 3, padding=1))

    @staticmethod
    def pillar_stats(assignment: PillarAssignment, cloud: PointCloud,
                     spec: BEVGridSpec, dtype=torch.float32) -> torch.Tensor:
        idx = assignment.indices.clamp(min=0)
        m = assignment.mask
        z = cloud.points[idx][..., 2].to(dtype)
        inten = cloud.intensity[idx].to(dtype)
        cnt = m.sum(dim=1).to(dtype)
        mean_z = (z * m).sum(dim=1) / cnt
        max_z = z.masked_fill(~m, torch.finfo(dtype).min).max(dim=1).values
        mean_i = (inten * m).sum(dim=1) / cnt
        stats = torch.stack([torch.ones_like(cnt), cnt / assignment.L,
                             mean_z, max_z, mean_i], dim=1)
        grid = torch.zeros(spec.W, spec.H, PillarBEVEncoder.STATS, dtype=dtype)
        grid[assignment.cells[:, 0], assignment.cells[:, 1]] = stats
        return grid

    def forward(self, assignment: PillarAssignment, cloud: PointCloud,
                spec: BEVGridSpec) -> SceneBEVFeature:
        dtype = next(self.parameters()).dtype
        stats = self.pillar_stats(assignment, cloud, spec, dtype)
        y = self.net(stats.permute(2, 0, 1).unsqueeze(0)).squeeze(0).permute(1, 2, 0)
        return SceneBEVFeature(grid=y, spec=spec)


class ImageEncoder(nn.Module):
    """Stand-in perspective-view encoder: three convs with total stride 4."""

    def __init__(self, channels: int):
        super().__init__()
        self.stride = 4.0
        self.net = nn.Sequential(
            nn.Conv2d(3, channels // 2, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(channels // 2, channels, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(channels, channels, 3, padding=1))

    def forward(self, images: torch.Tensor) -> ImageFeatureMap:
        """images: (num_cameras, H, W, 3) -> feature maps at stride 4."""
        x = images.permute(0, 3, 1, 2)
        y = self.net(x).permute(0, 2, 3, 1)
        return ImageFeatureMap(maps=y, stride=self.stride)


class HSF(nn.Module):
    """Full hierarchical scene fusion over one scene.

    ``use_attention=False`` degrades point-to-grid to sum pooling and skips
    grid-to-region entirely (the plain LC baseline).
    """

    def __init__(self, cfg: AttentionConfig, window_size: int = 6,
                 use_attention: bool = True, relative_bias: bool = True,
                 point_encoding: bool = True, fuse_norm: bool = True):
        super().__init__()
        self.use_attention = use_attention
        self.point_to_grid = PointToGrid(cfg, use_attention, point_encoding)
        self.fuse = BEVFuse(cfg.model_dim, normalize=fuse_norm)
        if use_attention:
            self.grid_to_region = GridToRegion(cfg, window_size, relative_bias)

    def forward(self, assignment, cloud, images, calibs, b_points: SceneBEVFeature) -> SceneBEVFeature:
        b_img = self.point_to_grid(assignment, cloud, images, calibs, b_points.spec)
        b_fused = self.fuse(b_img, b_points)
        if self.use_attention:
            b_fused = self.grid_to_region(b_fused)
        return b_fused
