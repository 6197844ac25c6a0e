"""Procedural posed-image data: ray-cast sphere/box scenes and the batch sampler.

Dataset file layout ("CAPEDAT1", all little-endian)::

    magic        8 bytes   b"CAPEDAT1"
    image_side   u32
    views        u32       views per scene
    scenes       u32
    pose_mode    u32       4 (Pose4 stored) or 6 (Pose6 stored)
    r_min        f64
    r_max        f64
    then scenes * views records, scene-major:
    pose         f64 x 4 (azimuth, colatitude, roll, radius) or
                 f64 x 12 (row-major 3x4 world-to-camera [R | t])
    pixels       f32 x side*side*3, row-major (row, column, rgb)
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pose import Pose4, Pose6, RadiusBounds, spherical_to_se3

MAGIC = b"CAPEDAT1"
_HEADER = struct.Struct("<8sIIIIdd")

FOV_DEG = 50.0
AMBIENT = 0.2
DIFFUSE = 0.8


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extent: tuple[float, float, float]
    color: tuple[float, float, float]


@dataclass(frozen=True)
class Scene:
    primitives: tuple = ()
    light_dir: tuple[float, float, float] = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class RenderedView:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    pose: Pose4
    scene_id: int = -1

    @property
    def pose6(self) -> Pose6:
        return spherical_to_se3(self.pose)


@dataclass(frozen=True)
class PoseRanges:
    """Camera sampling ranges; the radius range doubles as the CaPE radius bounds."""

    colatitude: tuple[float, float] = (math.radians(30.0), math.radians(150.0))
    bounds: RadiusBounds = field(default_factory=RadiusBounds)

    def sample(self, rng: np.random.Generator) -> Pose4:
        alpha = rng.uniform(0.0, 2.0 * math.pi)
        # uniform on the sphere band: cos(colatitude) uniform
        c0, c1 = math.cos(self.colatitude[1]), math.cos(self.colatitude[0])
        beta = math.acos(rng.uniform(c0, c1))
        log_r = rng.uniform(math.log(self.bounds.r_min), math.log(self.bounds.r_max))
        return Pose4(alpha, beta, 0.0, math.exp(log_r))


def random_scene(rng: np.random.Generator) -> Scene:
    # worst case |center| + extent = 0.69 + 0.61 stays inside the closest camera (r = 1.5)
    prims = []
    for _ in range(int(rng.integers(2, 6))):
        center = tuple(rng.uniform(-0.4, 0.4, 3))
        color = tuple(rng.uniform(0.15, 1.0, 3))
        if rng.random() < 0.5:
            prims.append(Sphere(center, float(rng.uniform(0.3, 0.5)), color))
        else:
            prims.append(Box(center, tuple(rng.uniform(0.2, 0.35, 3)), color))
    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 0.5
    light /= np.linalg.norm(light)
    return Scene(tuple(prims), tuple(light))


def camera_rays(pose: Pose4, side: int, look_at=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray origin (3,) and unit directions (side*side, 3)."""
    extr = spherical_to_se3(pose, look_at)
    focal = 0.5 * side / math.tan(math.radians(FOV_DEG) / 2.0)
    coords = np.arange(side) + 0.5 - side / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    d_cam = np.stack([xx / focal, yy / focal, np.ones_like(xx)], axis=-1).reshape(-1, 3)
    d_world = d_cam @ extr.rotation  # rows: R^T d
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    return extr.center, d_world


def _hit_sphere(o, d, sph: Sphere):
    c = np.asarray(sph.center)
    oc = o - c
    b = d @ oc
    disc = b * b - (oc @ oc - sph.radius**2)
    t = np.full(len(d), np.inf)
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t_hit = np.where(t0 > 1e-9, t0, t1)
    ok &= t_hit > 1e-9
    t[ok] = t_hit[ok]
    pts = o + t[:, None] * d
    normals = (pts - c) / sph.radius
    return t, normals


def _hit_box(o, d, box: Box):
    c = np.asarray(box.center)
    h = np.asarray(box.half_extent)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_lo = (c - h - o) * inv
        t_hi = (c + h - o) * inv
    t_near_ax = np.minimum(t_lo, t_hi)
    t_far_ax = np.maximum(t_lo, t_hi)
    t_near = np.nanmax(t_near_ax, axis=1)
    t_far = np.nanmin(t_far_ax, axis=1)
    ok = (t_near <= t_far) & (t_near > 1e-9)
    t = np.where(ok, t_near, np.inf)
    axis = np.nanargmax(t_near_ax, axis=1)
    normals = np.zeros_like(d)
    rows = np.arange(len(d))
    normals[rows, axis] = -np.sign(d[rows, axis])
    return t, normals


def render_view(scene: Scene, pose: Pose4, side: int = 32, scene_id: int = -1) -> RenderedView:
    """Nearest-hit ray cast with Lambertian shading; background is black."""
    o, d = camera_rays(pose, side)
    n_pix = len(d)
    best_t = np.full(n_pix, np.inf)
    rgb = np.zeros((n_pix, 3))
    light = np.asarray(scene.light_dir, dtype=np.float64)
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            t, normals = _hit_sphere(o, d, prim)
        else:
            t, normals = _hit_box(o, d, prim)
        closer = t < best_t
        if not closer.any():
            continue
        best_t[closer] = t[closer]
        lambert = np.clip(normals[closer] @ light, 0.0, None)
        rgb[closer] = np.asarray(prim.color) * (AMBIENT + DIFFUSE * lambert)[:, None]
    img = np.clip(rgb, 0.0, 1.0).reshape(side, side, 3).astype(np.float32)
    return RenderedView(img, pose, scene_id)


# -- dataset file --------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (S, V, H, W, 3) float32
    poses: np.ndarray  # (S, V, 4) or (S, V, 12) float64
    pose_mode: int
    bounds: RadiusBounds

    @property
    def scene_count(self) -> int:
        return self.images.shape[0]

    @property
    def views_per_scene(self) -> int:
        return self.images.shape[1]

    @property
    def image_side(self) -> int:
        return self.images.shape[2]

    def pose(self, scene: int, view: int) -> Pose4 | Pose6:
        row = self.poses[scene, view]
        return Pose4.from_array(row) if self.pose_mode == 4 else Pose6.from_array(row)

    def view(self, scene: int, view: int) -> RenderedView:
        row = self.poses[scene, view]
        p4 = Pose4.from_array(row) if self.pose_mode == 4 else None
        return RenderedView(self.images[scene, view], p4, scene)

    def subset(self, scenes) -> Dataset:
        idx = np.asarray(list(scenes))
        return Dataset(self.images[idx], self.poses[idx], self.pose_mode, self.bounds)


def write_dataset(path: str | os.PathLike, ds: Dataset) -> None:
    S, V, H, W, _ = ds.images.shape
    if H != W:
        raise ValueError("images must be square")
    width = 4 if ds.pose_mode == 4 else 12
    if ds.poses.shape != (S, V, width):
        raise ValueError(f"pose array {ds.poses.shape} does not match mode {ds.pose_mode}")
    rec = np.dtype([("pose", "<f8", (width,)), ("pix", "<f4", (H * W * 3,))])
    arr = np.empty(S * V, dtype=rec)
    arr["pose"] = ds.poses.reshape(S * V, width)
    arr["pix"] = ds.images.reshape(S * V, -1)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, H, V, S, ds.pose_mode, ds.bounds.r_min, ds.bounds.r_max))
        f.write(arr.tobytes())


def read_dataset(path: str | os.PathLike) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: file too short for a dataset header")
    magic, side, views, scenes, mode, r_min, r_max = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if mode not in (4, 6):
        raise ValueError(f"{path}: unknown pose mode {mode}")
    width = 4 if mode == 4 else 12
    rec = np.dtype([("pose", "<f8", (width,)), ("pix", "<f4", (side * side * 3,))])
    payload = raw[_HEADER.size :]
    if len(payload) != scenes * views * rec.itemsize:
        raise ValueError(f"{path}: payload length {len(payload)} does not match header counts")
    arr = np.frombuffer(payload, dtype=rec)
    images = arr["pix"].reshape(scenes, views, side, side, 3).astype(np.float32)
    poses = arr["pose"].reshape(scenes, views, width).astype(np.float64)
    return Dataset(images, poses, mode, RadiusBounds(r_min, r_max))


def _num_threads() -> int:
    try:
        return max(1, int(os.environ.get("CAPE_NUM_THREADS", "1")))
    except ValueError:
        return 1


def build_dataset(
    scene_count: int,
    views_per_scene: int = 12,
    *,
    seed: int = 0,
    image_side: int = 32,
    ranges: PoseRanges | None = None,
    pose_mode: int = 4,
) -> Dataset:
    """Render ``scene_count`` random scenes, each from ``views_per_scene`` cameras."""
    if scene_count < 1 or views_per_scene < 1:
        raise ValueError("scene_count and views_per_scene must be >= 1")
    if pose_mode not in (4, 6):
        raise ValueError(f"pose_mode must be 4 or 6, got {pose_mode}")
    ranges = ranges or PoseRanges()
    rng = np.random.default_rng(seed)
    jobs = []
    for s in range(scene_count):
        scene = random_scene(rng)
        for _ in range(views_per_scene):
            jobs.append((scene, ranges.sample(rng), s))

    def work(job):
        scene, pose, s = job
        return render_view(scene, pose, image_side, s)

    n_threads = _num_threads()
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            views = list(pool.map(work, jobs))
    else:
        views = [work(j) for j in jobs]

    images = np.stack([v.image for v in views]).reshape(scene_count, views_per_scene, image_side, image_side, 3)
    if pose_mode == 4:
        poses = np.stack([v.pose.as_array() for v in views])
    else:
        poses = np.stack([v.pose6.as_array() for v in views])
    return Dataset(images, poses.reshape(scene_count, views_per_scene, -1), pose_mode, ranges.bounds)


def generate_dataset(path: str | os.PathLike, scene_count: int, views_per_scene: int = 12, **kwargs) -> Dataset:
    ds = build_dataset(scene_count, views_per_scene, **kwargs)
    write_dataset(path, ds)
    return ds


# -- batch sampling ------------------------------------------------------------


@dataclass
class Batch:
    ref_images: np.ndarray  # (B, N, H, W, 3)
    ref_poses: list  # B lists of N poses
    tgt_images: np.ndarray  # (B, M, H, W, 3)
    tgt_poses: list
    scenes: np.ndarray  # (B,)
    view_index: np.ndarray  # (B, N + M)


def sample_view_indices(views: int, n_refs: int, n_targets: int, rng: np.random.Generator) -> np.ndarray:
    """N + M view indices drawn uniformly with replacement."""
    if views < 1:
        raise ValueError("scene has no views")
    if n_refs < 1 or n_targets < 1:
        raise ValueError("need at least one reference and one target view")
    return rng.integers(0, views, size=n_refs + n_targets)


def sample_batch(
    ds: Dataset,
    n_refs: int = 3,
    n_targets: int = 3,
    rng: np.random.Generator | int | None = None,
    batch_size: int = 1,
) -> Batch:
    if ds.scene_count == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(rng)
    scenes = rng.integers(0, ds.scene_count, size=batch_size)
    idx = np.stack([sample_view_indices(ds.views_per_scene, n_refs, n_targets, rng) for _ in scenes])
    imgs = ds.images[scenes[:, None], idx]
    poses = [[ds.pose(s, v) for v in row] for s, row in zip(scenes, idx)]
    return Batch(
        imgs[:, :n_refs],
        [p[:n_refs] for p in poses],
        imgs[:, n_refs:],
        [p[n_refs:] for p in poses],
        scenes,
        idx,
    )


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w, _ = img.shape
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float32) / maxval
