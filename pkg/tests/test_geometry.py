import numpy as np
import pytest

from dnvs.geometry import (
    CameraView,
    back_project_pixels,
    build_correspondences,
    camera_center,
    look_at_extrinsic,
    make_intrinsics,
    patch_center_pixels,
    patchify,
    pixel_ray_dirs,
    plucker_map,
    project_points,
    umeyama_align,
    unpatchify,
)


def _random_extrinsic(rng):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, np.pi)
    K_cross = np.array([[0, -axis[2], axis[1]],
                        [axis[2], 0, -axis[0]],
                        [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(angle) * K_cross + (1 - np.cos(angle)) * K_cross @ K_cross
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = rng.standard_normal(3)
    return E


# -- plucker ------------------------------------------------------------------

def _principal_point_setup():
    # cx=cy=1.5 puts the principal point exactly on the center of pixel (1,1)
    K = np.array([[10.0, 0, 1.5], [0, 10.0, 1.5], [0, 0, 1]])
    return K, 3, 3


def test_plucker_identity_camera_principal_pixel():
    K, H, W = _principal_point_setup()
    rays = plucker_map(np.eye(4), K, H, W)
    assert np.allclose(rays[:3, 1, 1], [0, 0, 1], atol=1e-12)
    assert np.allclose(rays[3:, 1, 1], [0, 0, 0], atol=1e-12)


def test_plucker_camera_at_origin_zero_moment():
    K, H, W = _principal_point_setup()
    E = np.eye(4)
    E[:3, :3] = look_at_extrinsic((0, 0, 0), (1, 2, 3))[:3, :3]
    rays = plucker_map(E, K, H, W)
    assert np.abs(rays[3:]).max() < 1e-12


def test_plucker_translated_camera_hand_oracle():
    K, H, W = _principal_point_setup()
    E = np.eye(4)
    E[:3, 3] = [-1.0, 0.0, 0.0]  # camera center at world (1,0,0)
    rays = plucker_map(E, K, H, W)
    assert np.allclose(rays[:3, 1, 1], [0, 0, 1], atol=1e-12)
    assert np.allclose(rays[3:, 1, 1], np.cross([1, 0, 0], [0, 0, 1]), atol=1e-12)
    assert np.allclose(rays[3:, 1, 1], [0, -1, 0], atol=1e-12)


def test_plucker_invariants_random_poses():
    rng = np.random.default_rng(0)
    K = make_intrinsics(8, 12)
    for _ in range(20):
        E = _random_extrinsic(rng)
        rays = plucker_map(E, K, 8, 12)
        d = rays[:3].reshape(3, -1)
        m = rays[3:].reshape(3, -1)
        assert np.abs(np.linalg.norm(d, axis=0) - 1).max() < 1e-9
        assert np.abs((d * m).sum(axis=0)).max() < 1e-9


def test_plucker_rejects_singular_K():
    K = np.zeros((3, 3))
    with pytest.raises(ValueError):
        plucker_map(np.eye(4), K, 4, 4)


def test_ray_dirs_orientation():
    # pixel right of the principal point must have positive camera-x, which
    # for an identity extrinsic is positive world-x
    K, H, W = _principal_point_setup()
    d = pixel_ray_dirs(np.eye(4), K, H, W)
    assert d[1, 2, 0] > 0  # (py=1, px=2): right of center
    assert d[2, 1, 1] > 0  # below center: y down


# -- patch grid ---------------------------------------------------------------

def test_patchify_single_patch():
    x = np.arange(2 * 3 * 3, dtype=np.float64).reshape(2, 3, 3)
    rows = patchify(x, 3)
    assert rows.shape == (1, 18)
    assert np.array_equal(rows[0], x.reshape(-1))


def test_patchify_hand_enumeration():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    rows = patchify(x, 2)
    assert rows.shape == (4, 4)
    assert rows[0].tolist() == [0, 1, 4, 5]
    assert rows[1].tolist() == [2, 3, 6, 7]
    assert rows[2].tolist() == [8, 9, 12, 13]
    assert rows[3].tolist() == [10, 11, 14, 15]


def test_patchify_roundtrip_bit_exact():
    rng = np.random.default_rng(1)
    for C, H, W, p in [(3, 8, 8, 4), (6, 12, 16, 4), (1, 6, 6, 2)]:
        x = rng.standard_normal((C, H, W))
        back = unpatchify(patchify(x, p), C, H, W, p)
        assert np.array_equal(back, x)


def test_patchify_rejects_nondivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 5, 4)), 2)
    with pytest.raises(ValueError):
        unpatchify(np.zeros((4, 4)), 1, 5, 4, 2)


def test_patch_center_pixels_layout():
    centers = patch_center_pixels(8, 8, 4)
    assert centers.tolist() == [[2, 2], [2, 6], [6, 2], [6, 6]]


# -- projection round trips ---------------------------------------------------

def _plane_view(E, K, H, W, z_cam=2.0):
    """View whose depth claims a fronto-parallel plane at camera depth z_cam."""
    return CameraView(np.zeros((H, W, 3)), np.full((H, W), z_cam), E, K)


def test_back_project_then_project_identity():
    rng = np.random.default_rng(2)
    K = make_intrinsics(16, 16)
    for _ in range(5):
        E = _random_extrinsic(rng)
        view = CameraView(np.zeros((16, 16, 3)),
                          rng.uniform(1.0, 5.0, (16, 16)), E, K)
        pix = patch_center_pixels(16, 16, 4)
        world, hit = back_project_pixels(view, pix)
        assert hit.all()
        uv, z = project_points(view, world)
        assert np.allclose(uv[:, 0], pix[:, 1] + 0.5, atol=1e-9)
        assert np.allclose(uv[:, 1], pix[:, 0] + 0.5, atol=1e-9)
        assert np.allclose(z, view.depth[pix[:, 0], pix[:, 1]], atol=1e-9)


def test_background_pixels_masked():
    K = make_intrinsics(8, 8)
    depth = np.full((8, 8), 3.0)
    depth[0:4] = 0.0
    view = CameraView(np.zeros((8, 8, 3)), depth, np.eye(4), K)
    pix = patch_center_pixels(8, 8, 4)
    _, hit = back_project_pixels(view, pix)
    assert hit.tolist() == [False, False, True, True]


# -- umeyama ------------------------------------------------------------------

def test_umeyama_identity():
    rng = np.random.default_rng(3)
    pts = rng.standard_normal((20, 3))
    s, R, t, rms = umeyama_align(pts, pts)
    assert abs(s - 1) < 1e-9
    assert np.allclose(R, np.eye(3), atol=1e-9)
    assert np.allclose(t, 0, atol=1e-9)
    assert rms < 1e-9


def test_umeyama_pure_translation():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((20, 3))
    s, R, t, rms = umeyama_align(pts, pts + np.array([0.0, 0.0, 5.0]))
    assert abs(s - 1) < 1e-9
    assert np.allclose(R, np.eye(3), atol=1e-9)
    assert np.allclose(t, [0, 0, 5], atol=1e-9)


def test_umeyama_recovers_random_similarity():
    rng = np.random.default_rng(5)
    for _ in range(100):
        pts = rng.standard_normal((12, 3))
        E = _random_extrinsic(rng)
        R0, t0 = E[:3, :3], E[:3, 3]
        s0 = rng.uniform(0.3, 3.0)
        dst = s0 * pts @ R0.T + t0
        s, R, t, rms = umeyama_align(pts, dst)
        assert abs(s - s0) < 1e-6
        assert np.abs(R - R0).max() < 1e-6
        assert np.abs(t - t0).max() < 1e-6
        assert rms < 1e-9


def test_umeyama_corrects_reflection():
    rng = np.random.default_rng(6)
    pts = rng.standard_normal((30, 3))
    dst = pts.copy()
    dst[:, 2] *= -1  # mirror: best proper rotation cannot be a reflection
    s, R, t, rms = umeyama_align(pts, dst)
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_umeyama_rejects_degenerate():
    line = np.outer(np.arange(10.0), np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        umeyama_align(line, line * 2)
    with pytest.raises(ValueError):
        umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))


# -- correspondences ----------------------------------------------------------

def test_identical_cameras_plane_identity_matches():
    K = make_intrinsics(16, 16)
    v = _plane_view(np.eye(4), K, 16, 16)
    w = _plane_view(np.eye(4), K, 16, 16)
    corr = build_correspondences([v, w], targets=[1], p=4, threshold=10)
    m = corr.matches[1]
    assert len(m) == 16
    assert np.array_equal(m[:, 1], m[:, 2])  # every patch maps to itself
    assert (m[:, 0] == 0).all()
    assert corr.valid[1]


def test_threshold_flags():
    # 8x8 patch grid gives 64 self-matches: below 100, at or above 50
    K = make_intrinsics(32, 32)
    v = _plane_view(np.eye(4), K, 32, 32)
    w = _plane_view(np.eye(4), K, 32, 32)
    strict = build_correspondences([v, w], targets=[1], p=4, threshold=100)
    relaxed = build_correspondences([v, w], targets=[1], p=4, threshold=50)
    assert strict.count(1) == 64
    assert not strict.valid[1]
    assert relaxed.valid[1]


def test_occluded_target_invalid():
    # source surface at depth 2, but the target sees an occluder at depth 1
    # everywhere, so the occlusion filter rejects every projected point
    K = make_intrinsics(16, 16)
    src = _plane_view(np.eye(4), K, 16, 16, z_cam=2.0)
    tgt = _plane_view(np.eye(4), K, 16, 16, z_cam=1.0)
    corr = build_correspondences([src, tgt], targets=[1], p=4, threshold=100)
    assert corr.count(1) == 0
    assert not corr.valid[1]


def test_points_behind_target_rejected():
    K = make_intrinsics(16, 16)
    src = _plane_view(np.eye(4), K, 16, 16, z_cam=1.0)
    E_front = np.eye(4)
    E_front[2, 3] = -2.0  # target camera at z=2, surface is behind it
    tgt = _plane_view(E_front, K, 16, 16, z_cam=3.0)
    corr = build_correspondences([src, tgt], targets=[1], p=4, threshold=1)
    assert corr.count(1) == 0


def _sphere_view(eye, center, radius, H, W, K):
    """Analytic ray-sphere depth for a camera looking at the sphere center."""
    E = look_at_extrinsic(eye, center)
    d = pixel_ray_dirs(E, K, H, W).reshape(-1, 3)
    o = camera_center(E)
    oc = o - np.asarray(center, dtype=np.float64)
    b = d @ oc
    disc = b * b - (oc @ oc - radius * radius)
    t_hit = np.where(disc >= 0, -b - np.sqrt(np.maximum(disc, 0)), -1.0)
    pts = o + t_hit[:, None] * d
    z = pts @ E[2, :3] + E[2, 3]
    depth = np.where(t_hit > 0, z, 0.0).reshape(H, W)
    return CameraView(np.zeros((H, W, 3)), depth, E, K)


def _brute_force_matches(views, j, source_ids, p, depth_tol):
    """Scalar per-patch reimplementation used as an independent oracle."""
    tgt = views[j]
    H, W = tgt.depth.shape
    gw = W // p
    best = {}
    for i in source_ids:
        src = views[i]
        Hs, Ws = src.depth.shape
        for u, (py, px) in enumerate(patch_center_pixels(Hs, Ws, p)):
            zs = src.depth[py, px]
            if zs <= 0:
                continue
            cam = np.linalg.inv(src.intrinsic) @ np.array([px + 0.5, py + 0.5, 1.0]) * zs
            world = src.extrinsic[:3, :3].T @ (cam - src.extrinsic[:3, 3])
            tc = tgt.extrinsic[:3, :3] @ world + tgt.extrinsic[:3, 3]
            if tc[2] <= 0:
                continue
            proj = tgt.intrinsic @ tc
            x, y = proj[0] / tc[2], proj[1] / tc[2]
            if not (0 <= x < W and 0 <= y < H):
                continue
            gx, gy = int(x) // p, int(y) // p
            v = gy * gw + gx
            dc = tgt.depth[gy * p + p // 2, gx * p + p // 2]
            if dc <= 0 or abs(tc[2] - dc) > depth_tol * dc:
                continue
            if v not in best or tc[2] < best[v][3]:
                best[v] = (i, u, v, tc[2])
    return sorted((i, u, v) for i, u, v, _ in best.values())


def test_sphere_scene_matches_brute_force():
    H = W = 32
    K = make_intrinsics(H, W)
    center, radius = np.array([0.0, 0.0, 1.0]), 0.8
    views = [
        _sphere_view((3.0, 0.0, 1.5), center, radius, H, W, K),
        _sphere_view((2.6, 1.5, 1.2), center, radius, H, W, K),
        _sphere_view((2.0, -2.0, 1.8), center, radius, H, W, K),
    ]
    corr = build_correspondences(views, targets=[2], p=4, threshold=1)
    got = sorted(map(tuple, corr.matches[2].tolist()))
    want = _brute_force_matches(views, 2, [0, 1], 4, 0.02)
    assert got == want
    assert len(got) > 0


def test_zbuffer_uniqueness_and_symmetry():
    H = W = 32
    K = make_intrinsics(H, W)
    center, radius = np.array([0.0, 0.0, 1.0]), 0.8
    views = [
        _sphere_view((3.0, 0.3, 1.4), center, radius, H, W, K),
        _sphere_view((2.8, -0.8, 1.6), center, radius, H, W, K),
    ]
    corr = build_correspondences(views, targets=[1], p=4, threshold=1)
    m = corr.matches[1]
    assert len(np.unique(m[:, 2])) == len(m)  # one match per target patch
    # matched target patch centers reproject within one patch of the source
    tgt, src = views[1], views[0]
    centers = patch_center_pixels(H, W, 4)
    for i, u, v in m:
        world, hit = back_project_pixels(tgt, centers[v:v + 1])
        if not hit[0]:
            continue
        uv, z = project_points(src, world)
        assert z[0] > 0
        gx, gy = int(uv[0, 0]) // 4, int(uv[0, 1]) // 4
        assert abs(gx - int(centers[u, 1]) // 4) <= 1
        assert abs(gy - int(centers[u, 0]) // 4) <= 1


def test_multiple_targets_excluded_from_sources():
    K = make_intrinsics(16, 16)
    vs = [_plane_view(np.eye(4), K, 16, 16) for _ in range(4)]
    corr = build_correspondences(vs, targets=[2, 3], p=4, threshold=1)
    for j in (2, 3):
        assert set(corr.matches[j][:, 0].tolist()) <= {0, 1}


# -- CameraView validation ----------------------------------------------------

def test_cameraview_rejects_bad_rotation():
    E = np.eye(4)
    E[0, 0] = 2.0
    with pytest.raises(ValueError):
        CameraView(np.zeros((4, 4, 3)), np.ones((4, 4)), E, make_intrinsics(4, 4))


def test_cameraview_rejects_negative_depth():
    with pytest.raises(ValueError):
        CameraView(np.zeros((4, 4, 3)), -np.ones((4, 4)), np.eye(4), make_intrinsics(4, 4))


def test_cameraview_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        CameraView(np.zeros((4, 5, 3)), np.ones((4, 4)), np.eye(4), make_intrinsics(4, 4))
