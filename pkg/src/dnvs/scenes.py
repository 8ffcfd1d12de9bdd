"""Deterministic synthetic multi-view scenes: Lambertian spheres and boxes
over a checkered ground plane, rendered by an analytic raycaster that also
emits oracle depth. Includes the on-disk dataset layout.

Shading is ambient 0.2 plus diffuse 0.8 * max(0, n.l) with one fixed
directional light; no shadows, no interreflection. Background pixels are
black with depth 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (CameraView, build_correspondences, camera_center,
                       look_at_extrinsic, make_intrinsics, pixel_ray_dirs)
from .nvst_io import read_nvst, write_nvst

__all__ = [
    "Sphere", "Box", "GroundPlane", "SceneSpec", "Dataset",
    "orbit_eye", "render_scene", "random_scene",
    "write_dataset", "load_dataset", "LIGHT_DIR",
]

AMBIENT = 0.2
DIFFUSE = 0.8
_light = np.array([0.35, -0.25, 0.9])
LIGHT_DIR = _light / np.linalg.norm(_light)  # unit, points toward the light
_EPS = 1e-9


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError("box needs hi > lo on every axis")


@dataclass
class GroundPlane:
    """Checker at z=0, colors alternating per `cell`, cut off at `extent`."""

    color_a: np.ndarray = field(default_factory=lambda: np.array([0.85, 0.85, 0.85]))
    color_b: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.35, 0.40]))
    cell: float = 1.0
    extent: float = 12.0


@dataclass
class SceneSpec:
    seed: int
    spheres: list[Sphere] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    ground: GroundPlane | None = field(default_factory=GroundPlane)
    look_at: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.5]))
    orbit_radius: float = 3.0
    elevation_deg: float = 30.0
    azimuth_start_deg: float = 0.0
    azimuth_span_deg: float = 360.0
    H: int = 32
    W: int = 32
    n_views: int = 8
    fov_deg: float = 50.0

    def __post_init__(self):
        self.look_at = np.asarray(self.look_at, dtype=np.float64)


def orbit_eye(spec: SceneSpec, k: int) -> np.ndarray:
    """Camera position of view k on the orbit (views spaced evenly, end
    azimuth exclusive so a full span wraps without duplication)."""
    az = np.deg2rad(spec.azimuth_start_deg + spec.azimuth_span_deg * k / spec.n_views)
    el = np.deg2rad(spec.elevation_deg)
    offset = spec.orbit_radius * np.array(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return spec.look_at + offset


def _intersect_spheres(o, d, spheres):
    """Nearest sphere hit per ray: (t, normal, color); t=inf where missed."""
    n_rays = d.shape[0]
    best_t = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    color = np.zeros((n_rays, 3))
    for s in spheres:
        oc = o - s.center
        b = d @ oc
        disc = b * b - (oc @ oc - s.radius * s.radius)
        ok = disc >= 0
        t = np.where(ok, -b - np.sqrt(np.where(ok, disc, 0.0)), np.inf)
        t = np.where(t > _EPS, t, np.inf)
        closer = t < best_t
        if closer.any():
            pts = o + t[closer, None] * d[closer]
            normal[closer] = (pts - s.center) / s.radius
            color[closer] = s.color
            best_t[closer] = t[closer]
    return best_t, normal, color


def _intersect_boxes(o, d, boxes):
    n_rays = d.shape[0]
    best_t = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    color = np.zeros((n_rays, 3))
    for bx in boxes:
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (bx.lo - o) * inv
            t2 = (bx.hi - o) * inv
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        # rays parallel to a slab: inside iff origin between the planes
        parallel = np.abs(d) < 1e-12
        inside = (o >= bx.lo) & (o <= bx.hi)
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        tnear = lo.max(axis=1)
        tfar = hi.min(axis=1)
        t = np.where((tnear <= tfar) & (tnear > _EPS), tnear, np.inf)
        closer = t < best_t
        if closer.any():
            axis = lo[closer].argmax(axis=1)
            sign = -np.sign(d[closer, axis])
            n = np.zeros((closer.sum(), 3))
            n[np.arange(len(axis)), axis] = sign
            normal[closer] = n
            color[closer] = bx.color
            best_t[closer] = t[closer]
    return best_t, normal, color


def _intersect_ground(o, d, g: GroundPlane):
    n_rays = d.shape[0]
    best_t = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    color = np.zeros((n_rays, 3))
    dz = d[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[2] / dz
    ok = (np.abs(dz) > 1e-12) & (t > _EPS)
    pts = o + t[:, None] * d
    ok &= (np.abs(pts[:, 0]) <= g.extent) & (np.abs(pts[:, 1]) <= g.extent)
    if ok.any():
        parity = (np.floor(pts[ok, 0] / g.cell) + np.floor(pts[ok, 1] / g.cell)) % 2
        color[ok] = np.where(parity[:, None] == 0, g.color_a, g.color_b)
        normal[ok] = [0.0, 0.0, 1.0]
        best_t[ok] = t[ok]
    return best_t, normal, color


def render_scene(spec: SceneSpec) -> list[CameraView]:
    """Raycast every view of the spec; deterministic for a fixed spec."""
    if not spec.spheres and not spec.boxes:
        raise ValueError("scene has no primitives")
    K = make_intrinsics(spec.H, spec.W, spec.fov_deg)
    views = []
    for k in range(spec.n_views):
        E = look_at_extrinsic(orbit_eye(spec, k), spec.look_at)
        d = pixel_ray_dirs(E, K, spec.H, spec.W).reshape(-1, 3)
        o = camera_center(E)
        layers = [_intersect_spheres(o, d, spec.spheres),
                  _intersect_boxes(o, d, spec.boxes)]
        if spec.ground is not None:
            layers.append(_intersect_ground(o, d, spec.ground))
        t = np.full(d.shape[0], np.inf)
        normal = np.zeros_like(d)
        color = np.zeros_like(d)
        for lt, ln, lc in layers:
            closer = lt < t
            t[closer] = lt[closer]
            normal[closer] = ln[closer]
            color[closer] = lc[closer]
        hit = np.isfinite(t)
        shade = np.zeros_like(color)
        lam = np.clip(normal[hit] @ LIGHT_DIR, 0.0, None)
        shade[hit] = color[hit] * (AMBIENT + DIFFUSE * lam[:, None])
        pts = o + np.where(hit, t, 0.0)[:, None] * d
        z = pts @ E[2, :3] + E[2, 3]
        depth = np.where(hit, z, 0.0)
        views.append(CameraView(
            image=np.clip(shade, 0.0, 1.0).reshape(spec.H, spec.W, 3),
            depth=depth.reshape(spec.H, spec.W),
            extrinsic=E, intrinsic=K))
    return views


def easy_scene(seed, H: int = 32, W: int = 32, n_views: int = 10) -> SceneSpec:
    """One bright sphere, offset from the orbit axis, black background.
    The easy set for training smoke runs: pose still matters (the sphere
    moves across the frame), but there is no clutter to fit."""
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0.0, 2 * np.pi)
    off = 0.35 * np.array([np.cos(ang), np.sin(ang)])
    return SceneSpec(
        seed=int(np.asarray(seed).reshape(-1)[-1]),
        spheres=[Sphere(center=[off[0], off[1], 0.5], radius=0.5,
                        color=rng.uniform(0.55, 1.0, 3))],
        boxes=[], ground=None,
        look_at=np.array([0.0, 0.0, 0.5]),
        orbit_radius=3.0, elevation_deg=30.0,
        azimuth_start_deg=float(rng.uniform(0.0, 360.0)),
        H=H, W=W, n_views=n_views)


def random_scene(seed, H: int = 32, W: int = 32, n_views: int = 8,
                 min_primitives: int = 2, max_primitives: int = 4) -> SceneSpec:
    """Sample a scene: a few bright primitives resting on the checker."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(min_primitives, max_primitives + 1))
    spheres: list[Sphere] = []
    boxes: list[Box] = []
    for _ in range(n):
        cx, cy = rng.uniform(-0.9, 0.9, 2)
        col = rng.uniform(0.3, 1.0, 3)
        if rng.uniform() < 0.6:
            r = rng.uniform(0.25, 0.55)
            spheres.append(Sphere(center=[cx, cy, r], radius=r, color=col))
        else:
            half = rng.uniform(0.2, 0.45, 2)
            h = rng.uniform(0.3, 0.8)
            boxes.append(Box(lo=[cx - half[0], cy - half[1], 0.0],
                             hi=[cx + half[0], cy + half[1], h], color=col))
    if not spheres and not boxes:
        spheres.append(Sphere(center=[0.0, 0.0, 0.4], radius=0.4,
                              color=rng.uniform(0.3, 1.0, 3)))
    return SceneSpec(
        seed=int(np.asarray(seed).reshape(-1)[-1]),
        spheres=spheres, boxes=boxes,
        look_at=np.array([0.0, 0.0, 0.45]),
        orbit_radius=float(rng.uniform(2.6, 3.2)),
        elevation_deg=float(rng.uniform(22.0, 38.0)),
        azimuth_start_deg=float(rng.uniform(0.0, 360.0)),
        H=H, W=W, n_views=n_views)


# ---------------------------------------------------------------------------
# dataset directory layout


@dataclass
class Dataset:
    """In-memory dataset: scenes[s] is the view list of scene s; corrs[s][j]
    holds the cached all-source matches with view j as target."""

    scenes: list[list[CameraView]]
    corrs: list[dict[int, np.ndarray]]
    patch_size: int
    seed: int

    @property
    def n_views(self) -> int:
        return len(self.scenes[0])

    @property
    def resolution(self) -> tuple[int, int]:
        return self.scenes[0][0].resolution


def _write_manifest(path: Path, pairs: dict) -> None:
    lines = [f"{k} = {v}" for k, v in pairs.items()]
    path.write_text("# generated manifest\n" + "\n".join(lines) + "\n")


def _read_manifest(path: Path) -> dict[str, str]:
    pairs = {}
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed manifest line {raw!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def write_dataset(root, specs: list[SceneSpec], patch_size: int,
                  seed: int, depth_tol: float = 0.02) -> None:
    """Render every spec and write the directory layout:

        root/manifest.txt
        root/scene_###/manifest.txt
        root/scene_###/{image,depth,pose}_###.nvst
        root/scene_###/corr_###.nvst   (view ### as target, all other views
                                        as sources, threshold-free cache)
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not specs:
        raise ValueError("no scenes to write")
    H, W = specs[0].H, specs[0].W
    _write_manifest(root / "manifest.txt", {
        "scene_count": len(specs), "resolution": f"{H}x{W}",
        "view_count": specs[0].n_views, "seed": seed,
        "patch_size": patch_size})
    for s, spec in enumerate(specs):
        views = render_scene(spec)
        sdir = root / f"scene_{s:03d}"
        sdir.mkdir(exist_ok=True)
        _write_manifest(sdir / "manifest.txt", {
            "resolution": f"{spec.H}x{spec.W}", "view_count": spec.n_views,
            "seed": spec.seed, "patch_size": patch_size})
        for k, v in enumerate(views):
            write_nvst(sdir / f"image_{k:03d}.nvst", v.image)
            write_nvst(sdir / f"depth_{k:03d}.nvst", v.depth)
            pose = np.concatenate([v.extrinsic.reshape(-1), v.intrinsic.reshape(-1)])
            write_nvst(sdir / f"pose_{k:03d}.nvst", pose)
        for k in range(len(views)):
            corr = build_correspondences(views, [k], patch_size,
                                         depth_tol=depth_tol, threshold=1)
            write_nvst(sdir / f"corr_{k:03d}.nvst", corr.matches[k].astype(np.float64))


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta = _read_manifest(root / "manifest.txt")
    n_scenes = int(meta["scene_count"])
    H, W = (int(x) for x in meta["resolution"].split("x"))
    n_views = int(meta["view_count"])
    patch_size = int(meta["patch_size"])
    scenes = []
    corrs = []
    for s in range(n_scenes):
        sdir = root / f"scene_{s:03d}"
        views = []
        cmap = {}
        for k in range(n_views):
            image = read_nvst(sdir / f"image_{k:03d}.nvst").astype(np.float64)
            depth = read_nvst(sdir / f"depth_{k:03d}.nvst").astype(np.float64)
            pose = read_nvst(sdir / f"pose_{k:03d}.nvst")
            if pose.shape != (25,):
                raise ValueError(f"{sdir}: pose_{k:03d} must be a 25-vector, got {pose.shape}")
            if image.shape != (H, W, 3) or depth.shape != (H, W):
                raise ValueError(f"{sdir}: view {k} does not match manifest resolution")
            views.append(CameraView(image, depth, pose[:16].reshape(4, 4),
                                    pose[16:].reshape(3, 3)))
            cpath = sdir / f"corr_{k:03d}.nvst"
            if cpath.exists():
                cmap[k] = read_nvst(cpath).astype(np.int64).reshape(-1, 3)
        scenes.append(views)
        corrs.append(cmap)
    return Dataset(scenes=scenes, corrs=corrs, patch_size=patch_size,
                   seed=int(meta["seed"]))
