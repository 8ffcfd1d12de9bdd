"""Camera math shared by the renderer, the model, and the losses.

Conventions, used everywhere and tested here once:
  - world frame is z-up; extrinsics E are 4x4 world-to-camera
  - camera frame: x right, y down, z forward (right-handed)
  - pixel (px, py) covers [px, px+1) x [py, py+1); its center ray passes
    through (px + 0.5, py + 0.5); image arrays index as [py, px]
  - patch grid is raster ordered: patch index v = gy * (W/p) + gx
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .linalg import svd_3x3

__all__ = [
    "CameraView", "UmeyamaResult", "CorrespondenceSet",
    "make_intrinsics", "look_at_extrinsic", "camera_center",
    "pixel_ray_dirs", "plucker_map", "patchify", "unpatchify",
    "patch_center_pixels", "back_project_pixels", "project_points",
    "umeyama_align", "build_correspondences",
]

_ROT_TOL = 1e-8


@dataclass
class CameraView:
    """One posed view: RGB in [0,1], oracle depth (camera z, 0 = background),
    world-to-camera extrinsic E, pinhole intrinsic K."""

    image: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W
    extrinsic: np.ndarray  # 4 x 4
    intrinsic: np.ndarray  # 3 x 3

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        self.intrinsic = np.asarray(self.intrinsic, dtype=np.float64)
        H, W = self.depth.shape
        if self.image.shape != (H, W, 3):
            raise ValueError(f"image {self.image.shape} does not match depth {self.depth.shape}")
        if self.extrinsic.shape != (4, 4) or self.intrinsic.shape != (3, 3):
            raise ValueError("extrinsic must be 4x4 and intrinsic 3x3")
        R = self.extrinsic[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > _ROT_TOL or np.linalg.det(R) < 0:
            raise ValueError("extrinsic rotation block is not a proper rotation")
        if self.intrinsic[0, 0] <= 0 or self.intrinsic[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if np.any(self.depth < 0):
            raise ValueError("depth must be >= 0 (0 marks background)")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.depth.shape


def make_intrinsics(H: int, W: int, fov_deg: float = 50.0) -> np.ndarray:
    """Square-pixel pinhole K with the given horizontal field of view."""
    f = 0.5 * W / np.tan(0.5 * np.deg2rad(fov_deg))
    return np.array([[f, 0.0, W / 2.0], [0.0, f, H / 2.0], [0.0, 0.0, 1.0]])


def look_at_extrinsic(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera E for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    forward = forward / norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ValueError("view direction parallel to up vector")
    right /= rnorm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])  # rows: camera axes in world coords
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ eye
    return E


def camera_center(E: np.ndarray) -> np.ndarray:
    R, t = E[:3, :3], E[:3, 3]
    return -R.T @ t


def pixel_ray_dirs(E: np.ndarray, K: np.ndarray, H: int, W: int) -> np.ndarray:
    """Unit world-frame ray directions through every pixel center, (H, W, 3)."""
    if abs(np.linalg.det(K)) < 1e-12:
        raise ValueError("intrinsic matrix is singular")
    px, py = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    homog = np.stack([px, py, np.ones_like(px)], axis=-1)
    cam_dirs = homog @ np.linalg.inv(K).T
    world = cam_dirs @ E[:3, :3]  # rows of R are camera axes, so this is R^T d
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def plucker_map(E: np.ndarray, K: np.ndarray, H: int, W: int) -> np.ndarray:
    """Per-pixel ray encoding (6, H, W): unit direction d then moment o x d."""
    d = pixel_ray_dirs(E, K, H, W)
    o = camera_center(E)
    m = np.cross(np.broadcast_to(o, d.shape), d)
    return np.moveaxis(np.concatenate([d, m], axis=-1), -1, 0)


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """(C, H, W) -> (HW/p^2, C*p*p); each row is one p x p patch flattened
    with channel slowest, raster order over the patch grid."""
    C, H, W = x.shape
    if H % p or W % p:
        raise ValueError(f"patch size {p} does not divide resolution {H}x{W}")
    gh, gw = H // p, W // p
    return (x.reshape(C, gh, p, gw, p)
             .transpose(1, 3, 0, 2, 4)
             .reshape(gh * gw, C * p * p))


def unpatchify(rows: np.ndarray, C: int, H: int, W: int, p: int) -> np.ndarray:
    if H % p or W % p:
        raise ValueError(f"patch size {p} does not divide resolution {H}x{W}")
    gh, gw = H // p, W // p
    if rows.shape != (gh * gw, C * p * p):
        raise ValueError(f"expected {(gh * gw, C * p * p)}, got {rows.shape}")
    return (rows.reshape(gh, gw, C, p, p)
                .transpose(2, 0, 3, 1, 4)
                .reshape(C, H, W))


def patch_center_pixels(H: int, W: int, p: int) -> np.ndarray:
    """Integer (py, px) of each patch's center pixel, raster order, (N_p, 2)."""
    if H % p or W % p:
        raise ValueError(f"patch size {p} does not divide resolution {H}x{W}")
    gy, gx = np.meshgrid(np.arange(H // p), np.arange(W // p), indexing="ij")
    py = gy * p + p // 2
    px = gx * p + p // 2
    return np.stack([py.reshape(-1), px.reshape(-1)], axis=1)


def back_project_pixels(view: CameraView, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World points for integer (py, px) pixels using the view's oracle depth.

    Returns (points (N,3), hit mask); rows with depth 0 are left at the
    camera center and masked out.
    """
    py, px = pixels[:, 0], pixels[:, 1]
    z = view.depth[py, px]
    hit = z > 0
    K_inv = np.linalg.inv(view.intrinsic)
    homog = np.stack([px + 0.5, py + 0.5, np.ones_like(px, dtype=np.float64)], axis=1)
    cam = (homog @ K_inv.T) * z[:, None]
    R, t = view.extrinsic[:3, :3], view.extrinsic[:3, 3]
    world = (cam - t) @ R
    world[~hit] = camera_center(view.extrinsic)
    return world, hit


def project_points(view: CameraView, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points; returns continuous (x, y) pixel coords and camera z."""
    R, t = view.extrinsic[:3, :3], view.extrinsic[:3, 3]
    cam = points @ R.T + t
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = (cam @ view.intrinsic.T)[:, :2] / z[:, None]
    return uv, z


class UmeyamaResult(NamedTuple):
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    rms: float


def umeyama_align(src: np.ndarray, dst: np.ndarray) -> UmeyamaResult:
    """Least-squares similarity aligning src onto dst: dst ~ s * R @ src + t.

    Rotation is proper (det +1, reflections corrected through the smallest
    singular direction); rms is the residual after alignment.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"need matching N x 3 point sets, got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise ValueError("need at least 3 point pairs")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    cov = dc.T @ sc / n
    U, S, Vt = svd_3x3(cov)
    var_s = float((sc * sc).sum()) / n
    if var_s < 1e-24 or S[1] <= 1e-9 * max(S[0], 1e-30):
        raise ValueError("degenerate point configuration (collinear or coincident)")
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = U @ np.diag(d) @ Vt
    s = float(S @ d) / var_s
    t = mu_d - s * (R @ mu_s)
    resid = dst - (s * (src @ R.T) + t)
    rms = float(np.sqrt((resid * resid).sum() / n))
    return UmeyamaResult(s, R, t, rms)


@dataclass
class CorrespondenceSet:
    """Z-buffered patch matches per target view.

    matches[j] is an int array of (source view i, source patch u, target
    patch v) rows, at most one row per v; valid[j] says whether the count
    reached the threshold used at construction.
    """

    targets: list[int]
    matches: dict[int, np.ndarray] = field(default_factory=dict)
    valid: dict[int, bool] = field(default_factory=dict)
    threshold: int = 100

    def count(self, j: int) -> int:
        return 0 if j not in self.matches else len(self.matches[j])


def build_correspondences(views: Sequence[CameraView], targets: Sequence[int],
                          p: int, depth_tol: float = 0.02,
                          threshold: int = 100) -> CorrespondenceSet:
    """Match source patch centers into target patch grids with occlusion
    rejection and per-target-patch z-buffering.

    Sources are every view not listed in `targets`. A source patch-center
    pixel with surface depth back-projects to a world point; the point must
    land inside the target image, in front of the camera, and within
    depth_tol (relative) of the target's depth at the landing patch center.
    Per target patch, only the match with the smallest target-view depth
    survives.
    """
    targets = list(targets)
    out = CorrespondenceSet(targets=targets, threshold=threshold)
    source_ids = [i for i in range(len(views)) if i not in targets]
    for j in targets:
        tgt = views[j]
        H, W = tgt.resolution
        gw = W // p
        centers_t = patch_center_pixels(H, W, p)
        depth_at_center = tgt.depth[centers_t[:, 0], centers_t[:, 1]]
        rows = []  # (i, u, v, z)
        for i in source_ids:
            src = views[i]
            centers_s = patch_center_pixels(*src.resolution, p)
            world, hit = back_project_pixels(src, centers_s)
            uv, z = project_points(tgt, world)
            inside = (hit & (z > 0)
                      & (uv[:, 0] >= 0) & (uv[:, 0] < W)
                      & (uv[:, 1] >= 0) & (uv[:, 1] < H))
            u_ids = np.nonzero(inside)[0]
            if not u_ids.size:
                continue
            gx = np.floor(uv[u_ids, 0]).astype(np.int64) // p
            gy = np.floor(uv[u_ids, 1]).astype(np.int64) // p
            v_ids = gy * gw + gx
            d_ref = depth_at_center[v_ids]
            ok = (d_ref > 0) & (np.abs(z[u_ids] - d_ref) <= depth_tol * d_ref)
            for u, v, zz in zip(u_ids[ok], v_ids[ok], z[u_ids][ok]):
                rows.append((i, u, v, zz))
        best: dict[int, tuple] = {}
        for i, u, v, zz in rows:
            cur = best.get(v)
            if cur is None or zz < cur[3]:
                best[v] = (i, u, v, zz)
        kept = sorted(best.values(), key=lambda r: r[2])
        arr = (np.array([(i, u, v) for i, u, v, _ in kept], dtype=np.int64)
               if kept else np.zeros((0, 3), dtype=np.int64))
        out.matches[j] = arr
        out.valid[j] = len(arr) >= threshold
    return out
