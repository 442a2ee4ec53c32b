"""Run configuration: every hyper-parameter of the model, losses, data and
training loop, serialized losslessly as flat ``key = value`` text."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class RunConfig:
    seed: int = 0

    # model
    model_dim: int = 32
    num_heads: int = 4
    num_classes: int = 3
    window_size: int = 6
    num_instances: int = 200
    deform_points: int = 16
    num_queries: int = 200
    decoder_layers: int = 1
    max_points_per_pillar: int = 20

    # BEV grid
    bev_cells: int = 180
    cell_size: float = 0.6

    # ablation / architecture flags
    use_hsf: bool = True
    use_igf: bool = True
    use_image_branch: bool = True
    relative_bias: bool = True
    point_encoding: bool = True
    positional: bool = True

    # losses
    w_cls: float = 1.0
    w_reg: float = 0.25
    w_heatmap: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    gaussian_min_overlap: float = 0.1

    # optimizer (decoupled weight decay + one-cycle learning-rate schedule)
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    steps: int = 500
    batch_size: int = 1
    grad_accumulation: int = 1

    # dataset generation
    num_scenes: int = 20
    scene_min_boxes: int = 3
    scene_max_boxes: int = 8
    num_cameras: int = 6

    # evaluation
    score_threshold: float = 0.05

    @property
    def half_range(self) -> float:
        return self.bev_cells * self.cell_size / 2

    def bev_spec(self):
        from .geometry import BEVGridSpec
        r = self.half_range
        return BEVGridSpec((-r, r), (-r, r), self.cell_size)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not sep:
                raise ValueError(f"line {ln}: expected 'key = value', got {line!r}")
            if key not in known:
                raise ValueError(f"line {ln}: unknown config key {key!r}")
            kwargs[key] = _parse_value(key, value, known[key])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _parse_value(key: str, value: str, typ) -> object:
    name = typ if isinstance(typ, str) else typ.__name__
    value = value.strip("'\"")
    if name == "bool":
        if value in ("True", "true", "1"):
            return True
        if value in ("False", "false", "0"):
            return False
        raise ValueError(f"config key {key!r}: invalid bool {value!r}")
    if name == "int":
        return int(value)
    if name == "float":
        return float(value)
    return value
