"""Pillarization, multi-camera projection and bilinear sampling.

Everything here is a pure function of its inputs. Feature maps are
channel-last ``(W, H, C)`` tensors; grid index 0 runs along the x axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


class EmptySceneError(ValueError):
    """Raised when a point cloud has no points left after range filtering."""


@dataclass
class PointCloud:
    """N LiDAR points in the ego frame plus per-point intensity."""

    points: torch.Tensor      # (N, 3) float
    intensity: torch.Tensor   # (N,) float in [0, 1]

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {tuple(self.points.shape)}")
        if self.intensity.shape != (self.points.shape[0],):
            raise ValueError("intensity must be (N,)")
        if not torch.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class CameraCalibration:
    """Pinhole camera: ego -> camera rotation/translation plus intrinsics."""

    intrinsic: torch.Tensor   # (3, 3)
    rotation: torch.Tensor    # (3, 3), ego -> camera
    translation: torch.Tensor # (3,), meters
    image_size: tuple[int, int]  # (width_px, height_px)

    def __post_init__(self):
        R = self.rotation
        err = (R @ R.T - torch.eye(3, dtype=R.dtype)).abs().max()
        if err > 1e-6 or abs(torch.det(R.double()).item() - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det 1")
        K = self.intrinsic
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsic focal entries must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("intrinsic must have zero lower triangle")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image_size must be positive")

    def ego_to_camera(self, pts: torch.Tensor) -> torch.Tensor:
        return pts @ self.rotation.T.to(pts.dtype) + self.translation.to(pts.dtype)

    def camera_to_ego(self, pts: torch.Tensor) -> torch.Tensor:
        return (pts - self.translation.to(pts.dtype)) @ self.rotation.to(pts.dtype)


@dataclass
class BEVGridSpec:
    """Regular BEV grid over a closed metric range.

    Cells are lower-inclusive / upper-exclusive; index 0 along x (rows),
    index 1 along y (cols).
    """

    x_range: tuple[float, float] = (-54.0, 54.0)
    y_range: tuple[float, float] = (-54.0, 54.0)
    cell_size: float = 0.6
    W: int = field(init=False)
    H: int = field(init=False)

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range):
            n = (hi - lo) / self.cell_size
            if abs(n - round(n)) > 1e-9:
                raise ValueError("range must be an exact multiple of cell_size")
        self.W = round((self.x_range[1] - self.x_range[0]) / self.cell_size)
        self.H = round((self.y_range[1] - self.y_range[0]) / self.cell_size)

    def cell_index(self, xy: torch.Tensor) -> torch.Tensor:
        """(N, 2) metric xy -> (N, 2) long (row, col); may be out of bounds."""
        lo = torch.tensor([self.x_range[0], self.y_range[0]], dtype=xy.dtype)
        return torch.floor((xy - lo) / self.cell_size).long()

    def cell_center(self, rc: torch.Tensor) -> torch.Tensor:
        """(N, 2) (row, col) indices -> (N, 2) metric centers."""
        lo = torch.tensor([self.x_range[0], self.y_range[0]], dtype=torch.float64)
        return ((rc.double() + 0.5) * self.cell_size + lo).to(
            rc.dtype if rc.is_floating_point() else torch.get_default_dtype())

    def in_range(self, points: torch.Tensor,
                 z_range: tuple[float, float] = (-5.0, 3.0)) -> torch.Tensor:
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        return ((x >= self.x_range[0]) & (x < self.x_range[1])
                & (y >= self.y_range[0]) & (y < self.y_range[1])
                & (z >= z_range[0]) & (z <= z_range[1]))


@dataclass
class PillarAssignment:
    """Occupied pillars with up to L point indices each."""

    indices: torch.Tensor  # (P, L) long, -1 where padded
    mask: torch.Tensor     # (P, L) bool
    cells: torch.Tensor    # (P, 2) long (row, col)
    L: int

    @property
    def num_pillars(self) -> int:
        return self.cells.shape[0]


@dataclass
class ProjectionResult:
    """Per-point projection outcome over a camera rig."""

    camera_index: torch.Tensor  # (N,) long, -1 if invisible
    uv: torch.Tensor            # (N, 2) float image pixels (u=x, v=y)
    valid: torch.Tensor         # (N,) bool


def voxelize_pillars(cloud: PointCloud, spec: BEVGridSpec, L: int = 20,
                     z_range: tuple[float, float] = (-5.0, 3.0)) -> PillarAssignment:
    """Assign every in-range point to its pillar, keeping at most L per pillar.

    Overflowing pillars keep the L points closest to the pillar center in xy
    (ties broken by point index). Out-of-range points are dropped.
    """
    if len(cloud) == 0:
        raise EmptySceneError("point cloud is empty")
    if L < 1:
        raise ValueError("L must be >= 1")
    keep = spec.in_range(cloud.points, z_range)
    idx_all = torch.nonzero(keep, as_tuple=False).squeeze(1)
    if idx_all.numel() == 0:
        raise EmptySceneError("no points remain after range filtering")

    pts = cloud.points[idx_all]
    rc = spec.cell_index(pts[:, :2])
    flat = rc[:, 0] * spec.H + rc[:, 1]
    centers = spec.cell_center(rc).to(pts.dtype)
    dist2 = ((pts[:, :2] - centers) ** 2).sum(dim=1)

    # sort by (pillar, distance-to-center, point index); stable on ties
    order = torch.argsort(dist2, stable=True)
    order = order[torch.argsort(flat[order], stable=True)]
    flat_s = flat[order]
    idx_s = idx_all[order]

    uniq, counts = torch.unique_consecutive(flat_s, return_counts=True)
    P = uniq.shape[0]
    starts = torch.cumsum(counts, 0) - counts
    slot = torch.arange(flat_s.shape[0]) - starts.repeat_interleave(counts)
    within = slot < L

    indices = torch.full((P, L), -1, dtype=torch.long)
    pillar_of = torch.arange(P).repeat_interleave(counts)
    indices[pillar_of[within], slot[within]] = idx_s[within]
    mask = indices >= 0
    cells = torch.stack([uniq // spec.H, uniq % spec.H], dim=1)
    return PillarAssignment(indices=indices, mask=mask, cells=cells, L=L)


def project_points(cloud: PointCloud,
                   calibs: list[CameraCalibration]) -> ProjectionResult:
    """Project each point into the first camera (lowest index) that sees it.

    A camera sees a point when its camera-frame depth is positive and the
    pixel lands inside the image. Invisible points get valid=False and
    camera_index=-1; nothing is raised.
    """
    if not calibs:
        raise ValueError("need at least one camera")
    N = len(cloud)
    cam_idx = torch.full((N,), -1, dtype=torch.long)
    uv = torch.zeros((N, 2), dtype=cloud.points.dtype)
    unresolved = torch.ones(N, dtype=torch.bool)
    for ci, calib in enumerate(calibs):
        cam_pts = calib.ego_to_camera(cloud.points)
        z = cam_pts[:, 2]
        safe_z = torch.where(z > 0, z, torch.ones_like(z))
        proj = cam_pts @ calib.intrinsic.T.to(cam_pts.dtype)
        u = proj[:, 0] / safe_z
        v = proj[:, 1] / safe_z
        w, h = calib.image_size
        vis = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        take = unresolved & vis
        cam_idx[take] = ci
        uv[take] = torch.stack([u, v], dim=1)[take]
        unresolved &= ~take
    return ProjectionResult(camera_index=cam_idx, uv=uv, valid=cam_idx >= 0)


def bilinear_sample(feature_map: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample a (H0, W0, C) map at fractional (axis0, axis1) coords.

    ``uv`` is (..., 2); out-of-bounds neighbours contribute zero. At integer
    coordinates (i, j) the result is exactly ``feature_map[i, j]``. The blend
    is differentiable in both the map and the coordinates.
    """
    H0, W0, C = feature_map.shape
    a = uv[..., 0]
    b = uv[..., 1]
    a0 = torch.floor(a)
    b0 = torch.floor(b)
    wa = a - a0
    wb = b - b0

    out = None
    for da, wgt_a in ((0, 1 - wa), (1, wa)):
        for db, wgt_b in ((0, 1 - wb), (1, wb)):
            ia = (a0 + da).long()
            ib = (b0 + db).long()
            inside = (ia >= 0) & (ia < H0) & (ib >= 0) & (ib < W0)
            ia_c = ia.clamp(0, H0 - 1)
            ib_c = ib.clamp(0, W0 - 1)
            vals = feature_map[ia_c, ib_c] * inside.unsqueeze(-1).to(feature_map.dtype)
            term = vals * (wgt_a * wgt_b).unsqueeze(-1)
            out = term if out is None else out + term
    return out
