import numpy as np
import pytest

from dnvs.geometry import build_correspondences
from dnvs.scenes import (
    AMBIENT,
    DIFFUSE,
    LIGHT_DIR,
    Box,
    Dataset,
    GroundPlane,
    SceneSpec,
    Sphere,
    load_dataset,
    orbit_eye,
    random_scene,
    render_scene,
    write_dataset,
)


def _single_sphere_spec(**kw):
    defaults = dict(
        seed=0,
        spheres=[Sphere(center=[0.0, 0.0, 0.5], radius=0.5, color=[0.9, 0.2, 0.2])],
        ground=None,
        look_at=np.array([0.0, 0.0, 0.5]),
        orbit_radius=3.0,
        elevation_deg=0.0,
        azimuth_start_deg=0.0,
        H=33, W=33, n_views=1)
    defaults.update(kw)
    return SceneSpec(**defaults)


def test_on_axis_sphere_depth():
    # odd resolution puts the center pixel exactly on the optical axis, so
    # the nearest-hit depth there is orbit radius minus sphere radius
    spec = _single_sphere_spec()
    view = render_scene(spec)[0]
    assert abs(view.depth[16, 16] - (3.0 - 0.5)) < 1e-12


def test_on_axis_sphere_shading():
    spec = _single_sphere_spec()
    view = render_scene(spec)[0]
    eye = orbit_eye(spec, 0)
    n = (eye - spec.spheres[0].center)
    n /= np.linalg.norm(n)  # on-axis hit normal points back at the camera
    expect = spec.spheres[0].color * (AMBIENT + DIFFUSE * max(0.0, n @ LIGHT_DIR))
    assert np.allclose(view.image[16, 16], expect, atol=1e-12)


def test_on_axis_box_face():
    spec = SceneSpec(
        seed=0,
        boxes=[Box(lo=[-0.5, -0.5, 0.0], hi=[0.5, 0.5, 1.0], color=[0.2, 0.7, 0.9])],
        ground=None,
        look_at=np.array([0.0, 0.0, 0.5]),
        orbit_radius=3.0, elevation_deg=0.0, azimuth_start_deg=0.0,
        H=33, W=33, n_views=1)
    view = render_scene(spec)[0]
    assert abs(view.depth[16, 16] - 2.5) < 1e-12  # face at x=0.5, eye at x=3
    expect = np.array([0.2, 0.7, 0.9]) * (AMBIENT + DIFFUSE * max(0.0, LIGHT_DIR[0]))
    assert np.allclose(view.image[16, 16], expect, atol=1e-12)


def test_ground_checker_two_colors():
    g = GroundPlane()
    spec = SceneSpec(
        seed=0,
        spheres=[Sphere(center=[5.0, 5.0, 0.3], radius=0.3, color=[1, 1, 1])],
        ground=g,
        look_at=np.array([0.0, 0.0, 0.0]),
        orbit_radius=4.0, elevation_deg=60.0,
        H=32, W=32, n_views=1)
    view = render_scene(spec)[0]
    shade_a = g.color_a * (AMBIENT + DIFFUSE * LIGHT_DIR[2])
    shade_b = g.color_b * (AMBIENT + DIFFUSE * LIGHT_DIR[2])
    flat = view.image.reshape(-1, 3)
    has_a = np.any(np.all(np.abs(flat - shade_a) < 1e-9, axis=1))
    has_b = np.any(np.all(np.abs(flat - shade_b) < 1e-9, axis=1))
    assert has_a and has_b


def test_camera_looking_away_black():
    spec = _single_sphere_spec(
        spheres=[Sphere(center=[0.0, 0.0, -50.0], radius=1.0, color=[1, 0, 0])],
        look_at=np.array([0.0, 0.0, 100.0]),
        elevation_deg=-80.0)
    view = render_scene(spec)[0]
    assert np.all(view.image == 0)
    assert np.all(view.depth == 0)


def test_render_deterministic():
    spec = random_scene(7, n_views=3)
    a = render_scene(spec)
    b = render_scene(spec)
    for va, vb in zip(a, b):
        assert np.array_equal(va.image, vb.image)
        assert np.array_equal(va.depth, vb.depth)
        assert np.array_equal(va.extrinsic, vb.extrinsic)


def test_empty_scene_rejected():
    with pytest.raises(ValueError):
        render_scene(SceneSpec(seed=0, spheres=[], boxes=[], n_views=1))


def test_depth_rgb_consistency():
    for seed in range(4):
        for view in render_scene(random_scene(seed, n_views=2)):
            hit = view.depth > 0
            lum = view.image.max(axis=2)
            assert np.all(lum[hit] > 0)  # sampled colors are never black
            assert np.all(view.image >= 0) and np.all(view.image <= 1)
            assert np.all(view.depth >= 0)


def test_background_strictly_black():
    view = render_scene(_single_sphere_spec())[0]
    miss = view.depth == 0
    assert miss.any()
    assert np.all(view.image[miss] == 0)


def test_orbit_geometry():
    spec = random_scene(3, n_views=8)
    eyes = np.array([orbit_eye(spec, k) for k in range(8)])
    r = np.linalg.norm(eyes - spec.look_at, axis=1)
    assert np.allclose(r, spec.orbit_radius, atol=1e-12)
    assert len(np.unique(np.round(eyes, 9), axis=0)) == 8


def test_random_scene_reproducible_and_varied():
    a = render_scene(random_scene(11, n_views=2))
    b = render_scene(random_scene(11, n_views=2))
    c = render_scene(random_scene(12, n_views=2))
    assert np.array_equal(a[0].image, b[0].image)
    assert not np.array_equal(a[0].image, c[0].image)


def test_random_scene_composite_seed():
    spec = random_scene([99, 1], n_views=2)
    render_scene(spec)  # just has to be a usable scene
    assert spec.spheres or spec.boxes


def test_dataset_roundtrip(tmp_path):
    specs = [random_scene([5, s], H=32, W=32, n_views=4) for s in range(2)]
    write_dataset(tmp_path / "ds", specs, patch_size=4, seed=5)
    ds = load_dataset(tmp_path / "ds")
    assert isinstance(ds, Dataset)
    assert len(ds.scenes) == 2
    assert ds.n_views == 4
    assert ds.resolution == (32, 32)
    assert ds.patch_size == 4
    assert ds.seed == 5
    rendered = render_scene(specs[1])
    for k, view in enumerate(rendered):
        assert np.array_equal(ds.scenes[1][k].image, view.image)
        assert np.array_equal(ds.scenes[1][k].depth, view.depth)
        assert np.array_equal(ds.scenes[1][k].extrinsic, view.extrinsic)
        assert np.array_equal(ds.scenes[1][k].intrinsic, view.intrinsic)
    # corr cache agrees with direct construction (all other views as sources)
    corr = build_correspondences(rendered, [2], 4, threshold=1)
    assert np.array_equal(ds.corrs[1][2], corr.matches[2])


def test_dataset_rejects_corrupt_pose(tmp_path):
    specs = [random_scene(1, n_views=2)]
    write_dataset(tmp_path / "ds", specs, patch_size=4, seed=1)
    from dnvs.nvst_io import write_nvst
    write_nvst(tmp_path / "ds" / "scene_000" / "pose_000.nvst", np.zeros(10))
    with pytest.raises(ValueError, match="25-vector"):
        load_dataset(tmp_path / "ds")


def test_dataset_rejects_malformed_manifest(tmp_path):
    specs = [random_scene(1, n_views=2)]
    write_dataset(tmp_path / "ds", specs, patch_size=4, seed=1)
    mpath = tmp_path / "ds" / "manifest.txt"
    mpath.write_text("scene_count 1\n")
    with pytest.raises(ValueError, match="malformed|scene_count"):
        load_dataset(tmp_path / "ds")


def test_write_dataset_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        write_dataset(tmp_path / "ds", [], patch_size=4, seed=0)


def test_easy_scene_single_sphere_black_background():
    from dnvs.scenes import easy_scene
    spec = easy_scene(5, H=16, W=16, n_views=4)
    assert len(spec.spheres) == 1 and not spec.boxes and spec.ground is None
    views = render_scene(spec)
    for v in views:
        bg = v.depth == 0
        assert bg.any() and np.all(v.image[bg] == 0.0)
        assert (~bg).any()  # the sphere is visible from every orbit view
    # reproducible per seed, varies across seeds
    again = render_scene(easy_scene(5, H=16, W=16, n_views=4))
    assert np.array_equal(views[0].image, again[0].image)
    other = render_scene(easy_scene(6, H=16, W=16, n_views=4))
    assert not np.array_equal(views[0].image, other[0].image)


def test_easy_scene_sphere_moves_across_views():
    from dnvs.scenes import easy_scene
    views = render_scene(easy_scene(7, H=32, W=32, n_views=6))
    centroids = []
    for v in views:
        ys, xs = np.nonzero(v.depth > 0)
        centroids.append((ys.mean(), xs.mean()))
    spread = np.ptp(np.asarray(centroids), axis=0)
    assert spread.max() > 1.0  # off-axis sphere shifts in the frame
