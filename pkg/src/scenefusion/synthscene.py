"""Procedural multimodal scenes: a checkered ground plane and colored boxes
sampled as LiDAR surface points and rendered into a ring of pinhole cameras.
The images carry the class-discriminative signal (flat per-class colors);
the point cloud carries geometry only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .dataio import read_container, write_container
from .detection import Box3D, wrap_angle
from .geometry import CameraCalibration, PointCloud


@dataclass(frozen=True)
class ClassSpec:
    name: str
    size: tuple[float, float, float]       # l, w, h meters
    color: tuple[float, float, float]      # RGB in [0, 1]


CLASSES = (
    ClassSpec("car", (4.0, 2.0, 1.6), (0.85, 0.2, 0.15)),
    ClassSpec("pedestrian", (0.6, 0.6, 1.7), (0.2, 0.75, 0.25)),
    ClassSpec("barrier", (2.0, 0.4, 1.0), (0.2, 0.3, 0.85)),
)


@dataclass
class SceneSpec:
    seed: int = 0
    num_boxes: tuple[int, int] = (3, 8)
    class_mix: tuple[float, ...] = (0.4, 0.3, 0.3)
    ground_density: float = 2.0            # points per m^2
    surface_density: float = 12.0          # points per m^2 of box surface
    num_cameras: int = 6
    image_size: tuple[int, int] = (160, 120)  # width, height
    half_range: float = 18.0
    point_jitter: float = 0.01
    calibration_jitter: float = 0.0
    min_center_radius: float = 3.0          # keep boxes off the ego

    def __post_init__(self):
        if self.ground_density <= 0 or self.surface_density <= 0:
            raise ValueError("densities must be positive")


@dataclass
class Scene:
    cloud: PointCloud
    images: torch.Tensor  # (num_cameras, H, W, 3) float in [0, 1]
    calibs: list[CameraCalibration]
    gt: list[Box3D]


class PlacementError(RuntimeError):
    pass


def camera_ring(spec: SceneSpec, rng: np.random.Generator | None = None) -> list[CameraCalibration]:
    """num_cameras pinhole cameras at ego height 1.6 m looking outward in a
    yaw ring, pitched down 15 degrees."""
    w, h = spec.image_size
    focal = 0.8 * w
    calibs = []
    for i in range(spec.num_cameras):
        yaw = 2 * math.pi * i / spec.num_cameras
        pitch = math.radians(15.0)
        if spec.calibration_jitter > 0 and rng is not None:
            yaw += rng.normal(0, spec.calibration_jitter)
            pitch += rng.normal(0, spec.calibration_jitter)
        # camera axes in ego frame: z forward (outward), x right, y down-ish
        fwd = np.array([math.cos(yaw) * math.cos(pitch),
                        math.sin(yaw) * math.cos(pitch),
                        -math.sin(pitch)])
        right = np.array([-math.sin(yaw), math.cos(yaw), 0.0])
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # ego -> camera rows
        pos = np.array([0.0, 0.0, 1.6])
        t = -R @ pos
        K = torch.tensor([[focal, 0.0, w / 2], [0.0, focal, h / 2], [0.0, 0.0, 1.0]],
                         dtype=torch.float64)
        calibs.append(CameraCalibration(
            intrinsic=K, rotation=torch.from_numpy(R),
            translation=torch.from_numpy(t), image_size=(w, h)))
    return calibs


def box_corners(center: np.ndarray, size: np.ndarray, yaw: float) -> np.ndarray:
    """(8, 3) corners; bottom face first, counter-clockwise."""
    l, w, h = size
    x = np.array([1, 1, -1, -1]) * l / 2
    y = np.array([1, -1, -1, 1]) * w / 2
    c, s = math.cos(yaw), math.sin(yaw)
    xy = np.stack([c * x - s * y, s * x + c * y], axis=1)
    bottom = np.concatenate([xy, np.full((4, 1), -h / 2)], axis=1)
    top = np.concatenate([xy, np.full((4, 1), h / 2)], axis=1)
    return np.concatenate([bottom, top]) + center


BOX_FACES = (
    (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7),  # sides
    (4, 5, 6, 7),                                            # top
)


def _sample_faces(rng, center, size, yaw, density):
    """Sample points on the side and top faces proportionally to face area."""
    corners = box_corners(center, size, yaw)
    pts = []
    for face in BOX_FACES:
        a, b, c = corners[face[0]], corners[face[1]], corners[face[3]]
        e1, e2 = b - a, c - a
        area = np.linalg.norm(np.cross(e1, e2))
        n = max(int(round(area * density)), 2)
        u = rng.random((n, 1))
        v = rng.random((n, 1))
        pts.append(a + u * e1 + v * e2)
    return np.concatenate(pts)


def _bev_overlap(c1, s1, y1, c2, s2, y2) -> bool:
    """Conservative separating check via enclosing circles."""
    r1 = math.hypot(s1[0], s1[1]) / 2
    r2 = math.hypot(s2[0], s2[1]) / 2
    return math.hypot(c1[0] - c2[0], c1[1] - c2[1]) < r1 + r2


def generate(spec: SceneSpec) -> Scene:
    """Deterministically generate one scene from its spec."""
    rng = np.random.default_rng(spec.seed)
    calibs = camera_ring(spec, rng if spec.calibration_jitter > 0 else None)

    n_boxes = int(rng.integers(spec.num_boxes[0], spec.num_boxes[1] + 1))
    mix = np.asarray(spec.class_mix, dtype=np.float64)
    mix = mix / mix.sum()

    placed: list[tuple[np.ndarray, np.ndarray, float, int]] = []
    attempts = 0
    while len(placed) < n_boxes:
        attempts += 1
        if attempts > 1000:
            raise PlacementError(
                f"failed to place {n_boxes} non-overlapping boxes after 1000 "
                "attempts; lower num_boxes or enlarge the range")
        cls = int(rng.choice(len(CLASSES), p=mix))
        size = np.asarray(CLASSES[cls].size)
        margin = math.hypot(size[0], size[1]) / 2 + 0.5
        r = rng.uniform(spec.min_center_radius, spec.half_range - margin)
        theta = rng.uniform(0, 2 * math.pi)
        center = np.array([r * math.cos(theta), r * math.sin(theta), size[2] / 2])
        yaw = wrap_angle(rng.uniform(-math.pi, math.pi))
        if any(_bev_overlap(center, size, yaw, c2, s2, y2)
               for c2, s2, y2, _ in placed):
            continue
        placed.append((center, size, yaw, cls))

    # ground points over the square range
    area = (2 * spec.half_range) ** 2
    n_ground = max(int(round(area * spec.ground_density)), 1)
    gxy = rng.uniform(-spec.half_range, spec.half_range, size=(n_ground, 2))
    ground = np.concatenate([gxy, np.zeros((n_ground, 1))], axis=1)

    chunks = [ground]
    for center, size, yaw, _ in placed:
        pts = _sample_faces(rng, center, size, yaw, spec.surface_density)
        chunks.append(pts)
    points = np.concatenate(chunks)
    if spec.point_jitter > 0:
        points = points + rng.normal(0, spec.point_jitter, size=points.shape)
    intensity = rng.random(points.shape[0])

    gt = [Box3D(center=torch.tensor(center, dtype=torch.float32),
                size=torch.tensor(size, dtype=torch.float32),
                yaw=yaw, class_id=cls)
          for center, size, yaw, cls in placed]

    images = render_images(calibs, placed, spec)
    cloud = PointCloud(points=torch.tensor(points, dtype=torch.float32),
                       intensity=torch.tensor(intensity, dtype=torch.float32))
    return Scene(cloud=cloud, images=images, calibs=calibs, gt=gt)


# --- Rendering ---------------------------------------------------------------

def _ground_image(calib: CameraCalibration, checker: float = 2.0) -> np.ndarray:
    """Per-pixel ray cast onto the z=0 plane with a checker pattern."""
    w, h = calib.image_size
    K = calib.intrinsic.numpy()
    R = calib.rotation.numpy()
    t = calib.translation.numpy()
    origin = -R.T @ t
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    ones = np.ones_like(uu)
    rays = np.stack([uu, vv, ones], axis=-1) @ np.linalg.inv(K).T @ R
    img = np.full((h, w, 3), 0.55, dtype=np.float32)
    dz = rays[..., 2]
    hit = dz < -1e-6
    s = np.where(hit, -origin[2] / np.where(hit, dz, 1.0), 0.0)
    gx = origin[0] + s * rays[..., 0]
    gy = origin[1] + s * rays[..., 1]
    parity = ((np.floor(gx / checker) + np.floor(gy / checker)) % 2).astype(bool)
    shade = np.where(parity, 0.35, 0.25).astype(np.float32)
    img[hit] = shade[hit, None].repeat(3, axis=1)
    return img


def project_box_faces(calib: CameraCalibration, center: np.ndarray,
                      size: np.ndarray, yaw: float,
                      min_depth: float = 0.1) -> list[tuple[np.ndarray, float]]:
    """Visible faces of a box as (pixel polygon (4, 2), mean depth). Faces
    with any corner closer than min_depth are skipped."""
    corners = box_corners(center, size, yaw)
    cam = corners @ calib.rotation.numpy().T + calib.translation.numpy()
    K = calib.intrinsic.numpy()
    out = []
    for face in BOX_FACES:
        pts = cam[list(face)]
        if (pts[:, 2] <= min_depth).any():
            continue
        proj = pts @ K.T
        poly = proj[:, :2] / proj[:, 2:3]
        out.append((poly, float(pts[:, 2].mean())))
    return out


def render_images(calibs: list[CameraCalibration],
                  placed: list[tuple[np.ndarray, np.ndarray, float, int]],
                  spec: SceneSpec) -> torch.Tensor:
    w, h = spec.image_size
    frames = []
    for calib in calibs:
        img = _ground_image(calib)
        faces = []
        for center, size, yaw, cls in placed:
            for poly, depth in project_box_faces(calib, center, size, yaw):
                faces.append((depth, poly, CLASSES[cls].color))
        for depth, poly, color in sorted(faces, key=lambda f: -f[0]):
            cv2.fillPoly(img, [np.round(poly).astype(np.int32)], color)
        frames.append(img)
    return torch.from_numpy(np.stack(frames))


# --- Dataset I/O -------------------------------------------------------------

def write_scene(scene: Scene, path: str | Path) -> None:
    n_cam = scene.images.shape[0]
    arrays = {
        "points": np.concatenate(
            [scene.cloud.points.numpy(), scene.cloud.intensity.numpy()[:, None]], axis=1),
        "boxes": np.array(
            [[*b.center.tolist(), *b.size.tolist(), b.yaw, float(b.class_id)]
             for b in scene.gt], dtype=np.float32).reshape(len(scene.gt), 8),
        "images": scene.images.numpy(),
    }
    meta = {"num_points": str(len(scene.cloud)), "num_boxes": str(len(scene.gt)),
            "num_cameras": str(n_cam)}
    for i, name in enumerate(c.name for c in CLASSES):
        meta[f"class.{i}"] = name
    for ci, calib in enumerate(scene.calibs):
        meta[f"camera.{ci}.intrinsic"] = _mat_str(calib.intrinsic)
        meta[f"camera.{ci}.rotation"] = _mat_str(calib.rotation)
        meta[f"camera.{ci}.translation"] = _mat_str(calib.translation)
        meta[f"camera.{ci}.image_size"] = f"{calib.image_size[0]} {calib.image_size[1]}"
    write_container(path, "scene", arrays, meta)


def _mat_str(m: torch.Tensor) -> str:
    return " ".join(repr(float(v)) for v in m.reshape(-1))


def _mat_parse(s: str, shape) -> torch.Tensor:
    return torch.tensor([float(v) for v in s.split()], dtype=torch.float64).reshape(shape)


def read_scene(path: str | Path) -> Scene:
    kind, arrays, meta = read_container(path)
    if kind != "scene":
        raise ValueError(f"expected a scene container, got kind={kind!r}")
    pts = torch.from_numpy(arrays["points"])
    cloud = PointCloud(points=pts[:, :3].contiguous(), intensity=pts[:, 3].contiguous())
    gt = []
    for row in torch.from_numpy(arrays["boxes"]):
        gt.append(Box3D(center=row[:3].clone(), size=row[3:6].clone(),
                        yaw=float(row[6]), class_id=int(row[7])))
    calibs = []
    for ci in range(int(meta["num_cameras"])):
        wh = meta[f"camera.{ci}.image_size"].split()
        calibs.append(CameraCalibration(
            intrinsic=_mat_parse(meta[f"camera.{ci}.intrinsic"], (3, 3)),
            rotation=_mat_parse(meta[f"camera.{ci}.rotation"], (3, 3)),
            translation=_mat_parse(meta[f"camera.{ci}.translation"], (3,)),
            image_size=(int(wh[0]), int(wh[1]))))
    return Scene(cloud=cloud, images=torch.from_numpy(arrays["images"]),
                 calibs=calibs, gt=gt)


def build_dataset(root: str | Path, base_spec: SceneSpec, num_scenes: int,
                  splits: dict[str, float] | None = None) -> list[Path]:
    """Generate num_scenes scenes with per-scene seeds derived from the base
    seed, write them under root, and emit the split index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = splits or {"train": 1.0}
    names = list(splits)
    bounds = np.cumsum([splits[n] for n in names]) / sum(splits.values())
    lines = []
    paths = []
    for i in range(num_scenes):
        scene_spec = SceneSpec(**{**base_spec.__dict__, "seed": base_spec.seed ^ i})
        scene = generate(scene_spec)
        name = f"scene_{i:04d}"
        write_scene(scene, root / name)
        frac = (i + 0.5) / num_scenes
        split = names[int(np.searchsorted(bounds, frac))]
        lines.append(f"{name} {split}")
        paths.append(root / name)
    (root / "index.txt").write_text("\n".join(lines) + "\n")
    return paths


def read_index(root: str | Path, split: str | None = None) -> list[Path]:
    root = Path(root)
    out = []
    for line in (root / "index.txt").read_text().splitlines():
        name, _, sp = line.partition(" ")
        if split is None or sp == split:
            out.append(root / name)
    return out


def dataset_stats(scenes: list[Scene]) -> dict:
    """Class counts and points-per-box histogram, for eyeballing the
    foreground/background imbalance of generated data."""
    counts = {c.name: 0 for c in CLASSES}
    per_box = []
    fg = bg = 0
    for scene in scenes:
        pts = scene.cloud.points
        assigned = torch.zeros(len(scene.cloud), dtype=torch.bool)
        for box in scene.gt:
            counts[CLASSES[box.class_id].name] += 1
            inside = points_in_box(pts, box, inflate=0.05)
            per_box.append(int(inside.sum()))
            assigned |= inside
        fg += int(assigned.sum())
        bg += len(scene.cloud) - int(assigned.sum())
    return {"class_counts": counts, "points_per_box": per_box,
            "foreground_points": fg, "background_points": bg}


def points_in_box(points: torch.Tensor, box: Box3D, inflate: float = 0.0) -> torch.Tensor:
    """Boolean mask of points inside the (optionally inflated) oriented box."""
    rel = points.double() - box.center.double()
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = c * rel[:, 0] + s * rel[:, 1]
    y = -s * rel[:, 0] + c * rel[:, 1]
    half = box.size.double() / 2 + inflate
    return (x.abs() <= half[0]) & (y.abs() <= half[1]) & (rel[:, 2].abs() <= half[2])
