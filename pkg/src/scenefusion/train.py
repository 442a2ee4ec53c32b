"""Deterministic single-process training loop with decoupled weight decay
and a one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

import torch

from .checkpoint import build_model, save_checkpoint
from .config import RunConfig
from .detection import detection_loss, gaussian_targets, hungarian_match
from .model import FusionDetector
from .synthscene import Scene, read_index, read_scene


def one_cycle_lr(step: int, total_steps: int, max_lr: float,
                 pct_start: float = 0.3, div_factor: float = 25.0,
                 final_div_factor: float = 1e3) -> float:
    """Cosine one-cycle: ramp to max_lr over pct_start, anneal to
    max_lr / final_div_factor."""
    if total_steps <= 1:
        return max_lr
    start_lr = max_lr / div_factor
    final_lr = max_lr / final_div_factor
    up = max(int(round(pct_start * total_steps)), 1)
    if step < up:
        t = step / up
        return start_lr + (max_lr - start_lr) * 0.5 * (1 - math.cos(math.pi * t))
    t = (step - up) / max(total_steps - up, 1)
    return final_lr + (max_lr - final_lr) * 0.5 * (1 + math.cos(math.pi * t))


def compute_scene_loss(model: FusionDetector, scene: Scene, config: RunConfig):
    """Forward one scene and assemble the full training loss."""
    out = model(scene)
    spec = model.bev_spec
    target = gaussian_targets(scene.gt, spec, model.num_classes,
                              config.gaussian_min_overlap)
    match = hungarian_match(out.detections, scene.gt, spec,
                            config.w_cls, config.w_reg)
    parts = detection_loss(out.detections, scene.gt, match, out.heatmaps,
                           target, spec, config.w_cls, config.w_reg,
                           config.w_heatmap, config.focal_gamma,
                           config.focal_alpha)
    return parts, out


def train(config: RunConfig, data_dir: str | Path,
          out_path: str | Path | None = None,
          log_path: str | Path | None = None,
          log_fn=None) -> FusionDetector:
    """Train from scratch on the train split; deterministic given the seed."""
    scene_dirs = read_index(data_dir, "train")
    if not scene_dirs:
        raise ValueError(f"no training scenes in {data_dir}")
    scenes = [read_scene(p) for p in scene_dirs]

    torch.set_num_threads(max(torch.get_num_threads(), 1))
    torch.manual_seed(config.seed)
    model = build_model(config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)

    log_lines = ["step total cls reg heatmap"]
    accum = max(config.grad_accumulation, 1)
    for step in range(config.steps):
        lr = one_cycle_lr(step, config.steps, config.learning_rate)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        totals = {"total": 0.0, "cls": 0.0, "reg": 0.0, "heatmap": 0.0}
        for micro in range(accum):
            scene = scenes[(step * accum + micro) % len(scenes)]
            parts, _ = compute_scene_loss(model, scene, config)
            (parts["total"] / accum).backward()
            for key in totals:
                totals[key] += float(parts[key]) / accum
        opt.step()
        line = (f"{step} {totals['total']:.6f} {totals['cls']:.6f} "
                f"{totals['reg']:.6f} {totals['heatmap']:.6f}")
        log_lines.append(line)
        if log_fn is not None:
            log_fn(step, totals)

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("\n".join(log_lines) + "\n")
    if out_path is not None:
        save_checkpoint(out_path, model, config, step=config.steps)
    return model


# --- Architecture ablations ---------------------------------------------------

ABLATION_CONFIGS = {
    "baseline-LC": {"use_hsf": False, "use_igf": False},
    "+HSF": {"use_hsf": True, "use_igf": False},
    "+IGF": {"use_hsf": False, "use_igf": True},
    "full": {"use_hsf": True, "use_igf": True},
}


def ablation_table(base_config: RunConfig, data_dir: str | Path,
                   steps: int | None = None
                   ) -> tuple[str, dict[str, FusionDetector]]:
    """Train the four architecture variants on the same data and emit one
    comparison row per config: name, parameter count, final total loss."""
    lines = ["config num_params final_total finite"]
    models = {}
    for name, flags in ABLATION_CONFIGS.items():
        config = replace(base_config, **flags)
        if steps is not None:
            config = replace(config, steps=steps)
        last: dict[str, float] = {}
        model = train(config, data_dir, log_fn=lambda _s, t: last.update(t))
        n_params = sum(p.numel() for p in model.parameters())
        finite = math.isfinite(last["total"])
        lines.append(f"{name} {n_params} {last['total']:.6f} {str(finite).lower()}")
        models[name] = model
    return "\n".join(lines) + "\n", models
