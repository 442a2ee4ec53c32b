"""Checkpoints reuse the dataset container: a named-parameter table of
float32 arrays plus the embedded run configuration."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .dataio import read_container, write_container
from .model import FusionDetector


def build_model(config: RunConfig) -> FusionDetector:
    torch.manual_seed(config.seed)
    return FusionDetector(
        bev_spec=config.bev_spec(), model_dim=config.model_dim,
        num_heads=config.num_heads, num_classes=config.num_classes,
        window_size=config.window_size, num_instances=config.num_instances,
        deform_points=config.deform_points, num_queries=config.num_queries,
        decoder_layers=config.decoder_layers,
        max_points_per_pillar=config.max_points_per_pillar,
        use_hsf=config.use_hsf, use_igf=config.use_igf,
        use_image_branch=config.use_image_branch,
        relative_bias=config.relative_bias,
        point_encoding=config.point_encoding, positional=config.positional)


def save_checkpoint(path: str | Path, model: FusionDetector,
                    config: RunConfig, step: int = 0) -> None:
    arrays = {f"param.{name}": p.detach().cpu().numpy()
              for name, p in model.named_parameters()}
    meta = {"step": str(step)}
    for f in fields(config):
        meta[f"config.{f.name}"] = str(getattr(config, f.name))
    write_container(path, "checkpoint", arrays, meta)


def load_checkpoint(path: str | Path) -> tuple[FusionDetector, RunConfig, int]:
    kind, arrays, meta = read_container(path)
    if kind != "checkpoint":
        raise ValueError(f"expected a checkpoint container, got kind={kind!r}")
    text = "\n".join(f"{k[len('config.'):]} = {v}" for k, v in meta.items()
                     if k.startswith("config."))
    config = RunConfig.from_text(text)
    model = build_model(config)
    state = {k[len("param."):]: torch.from_numpy(np.ascontiguousarray(v))
             for k, v in arrays.items() if k.startswith("param.")}
    model.load_state_dict(state)
    return model, config, int(meta.get("step", "0"))
