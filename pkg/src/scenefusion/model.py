"""End-to-end detector: modality encoders, hierarchical scene fusion,
instance-guided fusion, and the set-prediction decoder, with ablation
switches that add or remove whole parameter groups.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import AttentionConfig, DeformableSpec
from .detection import DetectionDecoder, DetectionSet
from .geometry import BEVGridSpec, voxelize_pillars
from .hsf import HSF, ImageEncoder, PillarBEVEncoder, SceneBEVFeature
from .igf import IGF, Heatmap, InstanceSet
from .synthscene import CLASSES, Scene


@dataclass
class ModelOutput:
    detections: DetectionSet
    aux_heatmap: Heatmap
    igf_heatmap: Heatmap | None
    instances: InstanceSet | None
    b_conv: SceneBEVFeature       # after the concat + conv fuse
    b_fused: SceneBEVFeature      # after grid-to-region (== b_conv without HSF)
    b_final: SceneBEVFeature      # decoder input

    @property
    def heatmaps(self) -> list[Heatmap]:
        maps = [self.aux_heatmap]
        if self.igf_heatmap is not None:
            maps.append(self.igf_heatmap)
        return maps


class FusionDetector(nn.Module):
    def __init__(self, bev_spec: BEVGridSpec, model_dim: int = 32,
                 num_heads: int = 4, num_classes: int = len(CLASSES),
                 window_size: int = 6, num_instances: int = 200,
                 deform_points: int = 16, num_queries: int = 200,
                 decoder_layers: int = 1, max_points_per_pillar: int = 20,
                 use_hsf: bool = True, use_igf: bool = True,
                 use_image_branch: bool = True, relative_bias: bool = True,
                 point_encoding: bool = True, positional: bool = True):
        super().__init__()
        cfg = AttentionConfig(model_dim, num_heads)
        self.bev_spec = bev_spec
        self.num_classes = num_classes
        self.max_points_per_pillar = max_points_per_pillar
        self.use_hsf = use_hsf
        self.use_igf = use_igf
        self.use_image_branch = use_image_branch

        self.point_encoder = PillarBEVEncoder(model_dim)
        if use_image_branch:
            self.image_encoder = ImageEncoder(model_dim)
        self.hsf = HSF(cfg, window_size, use_attention=use_hsf,
                       relative_bias=relative_bias, point_encoding=point_encoding)
        if use_igf:
            self.igf = IGF(cfg, num_classes, num_instances,
                           DeformableSpec(deform_points), positional)
        self.decoder = DetectionDecoder(cfg, num_classes, num_queries,
                                        decoder_layers)

    def forward(self, scene: Scene) -> ModelOutput:
        assignment = voxelize_pillars(scene.cloud, self.bev_spec,
                                      self.max_points_per_pillar)
        b_points = self.point_encoder(assignment, scene.cloud, self.bev_spec)
        if self.use_image_branch:
            images = self.image_encoder(
                scene.images.to(next(self.parameters()).dtype))
            b_img = self.hsf.point_to_grid(assignment, scene.cloud, images,
                                           scene.calibs, self.bev_spec)
        else:
            b_img = SceneBEVFeature(torch.zeros_like(b_points.grid),
                                    self.bev_spec)
        b_conv = self.hsf.fuse(b_img, b_points)
        b_fused = self.hsf.grid_to_region(b_conv) if self.use_hsf else b_conv

        igf_heatmap = None
        instances = None
        b_final = b_fused
        if self.use_igf:
            b_final, igf_heatmap, instances = self.igf(b_fused)

        detections, aux_heatmap = self.decoder(b_final)
        return ModelOutput(detections=detections, aux_heatmap=aux_heatmap,
                           igf_heatmap=igf_heatmap, instances=instances,
                           b_conv=b_conv, b_fused=b_fused, b_final=b_final)
