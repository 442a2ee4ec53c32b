"""Set-prediction detection head: Gaussian centerness targets, a small
transformer decoder over heatmap-peak queries, Hungarian matching, and the
focal + L1 training losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .attention import (AttentionConfig, MultiHeadCrossAttention,
                        MultiHeadSelfAttention, FeedForward,
                        sinusoidal_encoding)
from .geometry import BEVGridSpec
from .hsf import SceneBEVFeature
from .igf import Heatmap, topk_heatmap


def wrap_angle(yaw: float) -> float:
    """Wrap into [-pi, pi); +pi maps to -pi."""
    return (yaw + math.pi) % (2 * math.pi) - math.pi


@dataclass
class Box3D:
    center: torch.Tensor  # (3,) meters
    size: torch.Tensor    # (3,) l, w, h, positive
    yaw: float            # [-pi, pi)
    class_id: int
    score: float | None = None

    def __post_init__(self):
        if (self.size <= 0).any():
            raise ValueError("box sizes must be positive")
        self.yaw = wrap_angle(float(self.yaw))

    def bev_corners(self) -> torch.Tensor:
        """(4, 2) xy corners of the rotated BEV footprint."""
        l, w = float(self.size[0]), float(self.size[1])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = torch.tensor([[l, w], [l, -w], [-l, -w], [-l, w]],
                             dtype=torch.float64) / 2
        rot = torch.tensor([[c, -s], [s, c]], dtype=torch.float64)
        return local @ rot.T + self.center[:2].double()


@dataclass
class DetectionSet:
    boxes: list[Box3D]
    regressions: torch.Tensor   # (Q, 8)
    class_logits: torch.Tensor  # (Q, num_classes + 1), background last
    query_cells: torch.Tensor   # (Q, 2) long (row, col)

    def __len__(self):
        return len(self.boxes)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]          # (prediction index, gt index)
    unmatched_predictions: list[int] = field(default_factory=list)


# --- Gaussian centerness targets -------------------------------------------

def gaussian_radius(size_cells: tuple[float, float], min_overlap: float = 0.1) -> float:
    """Largest corner displacement keeping the worst-case axis-aligned IoU of
    a (h x w)-cell box at or above min_overlap. Three displacement cases:
    both boxes shifted apart, the shifted box shrunk inside, and the shifted
    box grown outside."""
    h, w = size_cells
    o = min_overlap

    # both shifted by r relative: inter (w-r)(h-r), union 2wh - inter
    r1 = ((h + w) - math.sqrt((h + w) ** 2 - 4 * w * h * (1 - o) / (1 + o))) / 2
    # shrunk inside: (w-2r)(h-2r) / (wh) = o
    r2 = ((h + w) - math.sqrt((h + w) ** 2 - 4 * w * h * (1 - o))) / 4
    # grown outside: wh / ((w+2r)(h+2r)) = o
    r3 = (-(h + w) + math.sqrt((h + w) ** 2 - 4 * w * h * (1 - 1 / o))) / 4
    return min(r1, r2, r3)


def gaussian_targets(gt: list[Box3D], spec: BEVGridSpec, num_classes: int,
                     min_overlap: float = 0.1) -> torch.Tensor:
    """Render one max-combined 2D Gaussian per ground truth into a
    (num_classes, W, H) map; every peak cell is exactly 1."""
    target = torch.zeros(num_classes, spec.W, spec.H)
    for box in gt:
        rc = spec.cell_index(box.center[:2].unsqueeze(0))[0]
        r, c = int(rc[0]), int(rc[1])
        if not (0 <= r < spec.W and 0 <= c < spec.H):
            raise ValueError("ground-truth center outside the BEV range")
        radius = max(gaussian_radius((float(box.size[0]) / spec.cell_size,
                                      float(box.size[1]) / spec.cell_size),
                                     min_overlap), 1.0)
        sigma = (2 * radius + 1) / 6
        rad = int(math.ceil(radius))
        r0, r1 = max(r - rad, 0), min(r + rad + 1, spec.W)
        c0, c1 = max(c - rad, 0), min(c + rad + 1, spec.H)
        dr = torch.arange(r0, r1) - r
        dc = torch.arange(c0, c1) - c
        g = torch.exp(-(dr[:, None] ** 2 + dc[None, :] ** 2) / (2 * sigma ** 2))
        cls = box.class_id
        target[cls, r0:r1, c0:c1] = torch.maximum(target[cls, r0:r1, c0:c1], g)
    return target


# --- Box regression parameterization ---------------------------------------

def encode_box(box: Box3D, query_cell: torch.Tensor, spec: BEVGridSpec) -> torch.Tensor:
    """Box -> (dx, dy, z, log l, log w, log h, sin yaw, cos yaw) relative to
    the query cell's metric center."""
    center = spec.cell_center(query_cell.unsqueeze(0))[0].to(box.center.dtype)
    return torch.cat([
        box.center[:2] - center,
        box.center[2:3],
        torch.log(box.size),
        torch.tensor([math.sin(box.yaw), math.cos(box.yaw)], dtype=box.center.dtype),
    ])


def decode_box(reg: torch.Tensor, query_cell: torch.Tensor, spec: BEVGridSpec,
               class_id: int, score: float | None = None) -> Box3D:
    center_xy = spec.cell_center(query_cell.unsqueeze(0))[0].to(reg.dtype) + reg[:2]
    sin_y, cos_y = float(reg[6]), float(reg[7])
    yaw = 0.0 if sin_y == 0.0 and cos_y == 0.0 else math.atan2(sin_y, cos_y)
    return Box3D(center=torch.cat([center_xy, reg[2:3]]),
                 size=torch.exp(reg[3:6]), yaw=wrap_angle(yaw),
                 class_id=class_id, score=score)


# --- Decoder ----------------------------------------------------------------

class DetectionDecoder(nn.Module):
    """Queries initialized from the peaks of an auxiliary centerness head,
    refined by cross-attention layers against the flattened scene feature."""

    def __init__(self, cfg: AttentionConfig, num_classes: int,
                 num_queries: int = 200, num_layers: int = 1):
        super().__init__()
        C = cfg.model_dim
        self.num_classes = num_classes
        self.num_queries = num_queries
        self.aux_head = nn.Sequential(
            nn.Conv2d(C, C, 3, padding=1), nn.GELU(),
            nn.Conv2d(C, num_classes, 3, padding=1))
        nn.init.constant_(self.aux_head[-1].bias, -4.6)  # near-zero centerness
        self.query_embed = nn.Linear(C, C)
        self.layers = nn.ModuleList()
        for _ in range(num_layers):
            self.layers.append(nn.ModuleDict({
                # self-attention between queries lets near-duplicate
                # candidates suppress each other
                "norm_sa": nn.LayerNorm(C),
                "msa": MultiHeadSelfAttention(cfg),
                "norm_q": nn.LayerNorm(C),
                "norm_kv": nn.LayerNorm(C),
                "mca": MultiHeadCrossAttention(cfg),
                "norm_ffn": nn.LayerNorm(C),
                "ffn": FeedForward(C),
            }))
        self.class_head = nn.Linear(C, num_classes + 1)
        self.reg_head = nn.Linear(C, 8)
        self.dim = C

    def aux_heatmap(self, scene: SceneBEVFeature) -> Heatmap:
        return Heatmap(self.aux_head(scene.grid.permute(2, 0, 1).unsqueeze(0)).squeeze(0))

    def forward(self, scene: SceneBEVFeature, num_queries: int | None = None,
                flat_indices: torch.Tensor | None = None
                ) -> tuple[DetectionSet, Heatmap]:
        """``flat_indices`` pins the query cells (see the matching argument in
        the instance-selection module): the top-K choice is piecewise
        constant, so gradient checks must hold it fixed."""
        nq = self.num_queries if num_queries is None else num_queries
        if nq < 1:
            raise ValueError("need at least one query")
        W, H, C = scene.grid.shape
        hm = self.aux_heatmap(scene)
        if flat_indices is None:
            _, flat = topk_heatmap(torch.sigmoid(hm.logits), nq)
        else:
            flat = flat_indices
        rem = flat % (W * H)
        rows, cols = rem // H, rem % H
        cells = torch.stack([rows, cols], dim=1)

        q = self.query_embed(scene.grid[rows, cols])
        q = q + sinusoidal_encoding(cells.to(q.dtype), self.dim)
        kv = scene.grid.reshape(W * H, C)
        for layer in self.layers:
            q = q + layer["msa"](layer["norm_sa"](q))
            q = q + layer["mca"](layer["norm_q"](q), layer["norm_kv"](kv))
            q = q + layer["ffn"](layer["norm_ffn"](q))

        logits = self.class_head(q)
        regs = self.reg_head(q)
        boxes = []
        fg_prob = torch.softmax(logits, dim=-1)[:, :self.num_classes].detach()
        for i in range(nq):
            cls = int(fg_prob[i].argmax())
            boxes.append(decode_box(regs[i].detach(), cells[i], scene.spec,
                                    cls, float(fg_prob[i, cls])))
        return DetectionSet(boxes, regs, logits, cells), hm


# --- Matching ---------------------------------------------------------------

def solve_assignment(cost: torch.Tensor) -> list[tuple[int, int]]:
    """Globally optimal assignment of rows to columns; returns (row, col)
    pairs. Requires rows <= cols."""
    rows, cols = linear_sum_assignment(cost.detach().cpu().numpy())
    return list(zip(rows.tolist(), cols.tolist()))


def hungarian_match(preds: DetectionSet, gt: list[Box3D], spec: BEVGridSpec,
                    w_cls: float = 1.0, w_reg: float = 0.25) -> MatchResult:
    """Match ground truths to predictions minimizing the summed
    classification + regression cost."""
    if len(gt) > len(preds):
        raise ValueError(f"{len(gt)} ground truths but only {len(preds)} predictions")
    if not gt:
        return MatchResult(pairs=[], unmatched_predictions=list(range(len(preds))))
    prob = torch.softmax(preds.class_logits, dim=-1)
    cost = torch.zeros(len(gt), len(preds), dtype=torch.float64)
    for gi, box in enumerate(gt):
        cls_cost = 1.0 - prob[:, box.class_id]
        targets = torch.stack([encode_box(box, preds.query_cells[qi], spec)
                               for qi in range(len(preds))])
        reg_cost = (preds.regressions - targets).abs().mean(dim=1)
        cost[gi] = (w_cls * cls_cost + w_reg * reg_cost).double()
    pairs = [(qi, gi) for gi, qi in solve_assignment(cost)]
    matched = {qi for qi, _ in pairs}
    unmatched = [qi for qi in range(len(preds)) if qi not in matched]
    return MatchResult(pairs=sorted(pairs), unmatched_predictions=unmatched)


# --- Losses -----------------------------------------------------------------

def focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0,
               alpha: float | None = 0.25, background_class: int | None = None) -> torch.Tensor:
    """Multi-class focal loss, mean over rows. With gamma=0 and alpha=None
    this is exactly cross-entropy."""
    logp = F.log_softmax(logits, dim=-1)
    logp_t = logp.gather(1, targets.unsqueeze(1)).squeeze(1)
    p_t = logp_t.exp()
    loss = -((1 - p_t) ** gamma) * logp_t
    if alpha is not None:
        if background_class is None:
            background_class = logits.shape[-1] - 1
        w = torch.where(targets == background_class, 1 - alpha, alpha)
        loss = loss * w.to(loss.dtype)
    return loss.mean()


def penalty_reduced_focal(logits: torch.Tensor, target: torch.Tensor,
                          alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Centerness heatmap focal loss with down-weighted near-peak negatives,
    normalized by the number of peaks."""
    pos = target == 1.0
    log_p = F.logsigmoid(logits)
    log_np = F.logsigmoid(-logits)
    p = torch.sigmoid(logits)
    pos_loss = -((1 - p) ** alpha) * log_p
    neg_loss = -((1 - target) ** beta) * (p ** alpha) * log_np
    loss = torch.where(pos, pos_loss, neg_loss).sum()
    return loss / max(int(pos.sum()), 1)


class NonFiniteLossError(RuntimeError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component '{component}' is non-finite: {value}")
        self.component = component


def detection_loss(preds: DetectionSet, gt: list[Box3D], match: MatchResult,
                   heatmaps: list[Heatmap], heatmap_target: torch.Tensor,
                   spec: BEVGridSpec, w_cls: float = 1.0, w_reg: float = 0.25,
                   w_heatmap: float = 1.0, gamma: float = 2.0,
                   alpha: float | None = 0.25) -> dict[str, torch.Tensor]:
    """Total training loss: query-classification focal, L1 over matched
    regressions, and penalty-reduced focal over every centerness heatmap."""
    num_classes = preds.class_logits.shape[-1] - 1
    targets = torch.full((len(preds),), num_classes, dtype=torch.long)
    for qi, gi in match.pairs:
        targets[qi] = gt[gi].class_id
    cls = focal_loss(preds.class_logits, targets, gamma, alpha)

    if match.pairs:
        reg_t = torch.stack([encode_box(gt[gi], preds.query_cells[qi], spec)
                             for qi, gi in match.pairs])
        reg_p = preds.regressions[[qi for qi, _ in match.pairs]]
        reg = (reg_p - reg_t.to(reg_p.dtype)).abs().mean()
    else:
        reg = torch.zeros((), dtype=preds.regressions.dtype)

    hm = torch.zeros((), dtype=preds.regressions.dtype)
    for heat in heatmaps:
        hm = hm + penalty_reduced_focal(heat.logits, heatmap_target.to(heat.logits.dtype))

    total = w_cls * cls + w_reg * reg + w_heatmap * hm
    parts = {"total": total, "cls": cls, "reg": reg, "heatmap": hm}
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(name, float(value))
    return parts
