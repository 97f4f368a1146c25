import json

import numpy as np
import pytest
import torch

from mmrf.modality import assign_output_slices, multispectral, nir, polarization, rgb
from mmrf.renderer import RenderOptions, render_frame
from mmrf.synth import (
    AnalyticField,
    Material,
    Primitive,
    RigSpec,
    Texture,
    analytic_normal,
    analytic_sdf,
    default_nir,
    make_scene_bundle,
    rig_cameras,
    ring_poses,
    scene_from_dict,
    silhouette,
    sphere_scene,
    trace_ground_truth,
    trace_scene,
)


def test_primitive_sdfs():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.9]])
    sphere = Primitive("sphere", size=(0.5,))
    np.testing.assert_allclose(sphere.sdf(pts), [-0.5, 0.5, 0.4])
    box = Primitive("box", size=(0.2, 0.3, 0.4))
    np.testing.assert_allclose(box.sdf(pts), [-0.2, 0.8, 0.5])
    torus = Primitive("torus", size=(0.5, 0.1))
    np.testing.assert_allclose(torus.sdf(np.array([[0.5, 0.0, 0.0], [0.0, 0.0, 0.0]])), [-0.1, np.hypot(0.5, 0) - 0.1])


def test_scene_validation():
    with pytest.raises(ValueError):
        Primitive("cone")
    with pytest.raises(ValueError):
        Material((0.5, 0.5, 1.5))
    with pytest.raises(ValueError):
        Material((0.5, 0.5, 0.5), dolp=1.2)
    with pytest.raises(ValueError):
        scene_from_dict({"primitives": [{"type": "sphere", "radius": 0.5, "center": [0.6, 0, 0]}],
                         "materials": [{"albedo_rgb": [0.5, 0.5, 0.5]}]})


def test_scene_from_dict():
    scene = scene_from_dict({
        "name": "two",
        "primitives": [{"type": "sphere", "radius": 0.3, "center": [0.2, 0, 0]},
                       {"type": "box", "half_extents": [0.1, 0.1, 0.1], "center": [-0.4, 0, 0], "material": 1}],
        "materials": [{"albedo_rgb": [0.9, 0.2, 0.1], "dolp": 0.5},
                      {"albedo_rgb": [0.1, 0.4, 0.8], "texture": {"amplitude": 0.3}}],
    })
    assert scene.name == "two" and len(scene.primitives) == 2
    assert analytic_sdf(scene, np.array([0.2, 0.0, 0.0])) == pytest.approx(-0.3)


def test_correlated_spectra():
    mat = Material((0.8, 0.45, 0.25))
    assert mat.band(850) == pytest.approx(default_nir(mat.albedo_rgb))
    assert mat.band(600) == pytest.approx(0.8) and mat.band(460) == pytest.approx(0.25)
    bands = [mat.band(w) for w in np.linspace(430, 700, 50)]
    assert all(0 <= b <= 1 for b in bands)
    assert np.all(np.abs(np.diff(bands)) < 0.05)  # smooth curve


def test_texture_factor_range():
    pts = np.random.default_rng(0).uniform(-1, 1, size=(1000, 3))
    f = Texture(0.4).factor(pts)
    assert f.min() >= 0.6 - 1e-12 and f.max() <= 1.0
    assert np.all(Texture().factor(pts) == 1.0)


def test_analytic_normals():
    scene = sphere_scene()
    pts = np.array([[0.5, 0, 0], [0, -0.5, 0], [0, 0, 0.5]])
    np.testing.assert_allclose(analytic_normal(scene, pts), pts / 0.5, atol=1e-6)


def test_trace_depth_matches_sphere():
    scene = sphere_scene()
    cam = rig_cameras(scene.rig, assign_output_slices([rgb()])[0], ring_poses(4, scene.rig)[0])
    res = trace_scene(scene, cam, assign_output_slices([rgb()])[0])
    assert res.hit.any() and not res.hit.all()
    o = cam.pose.translation
    hit = res.hit.reshape(-1)
    p = o + res.dirs.reshape(-1, 3)[hit] * res.depth.reshape(-1)[hit][:, None]
    np.testing.assert_allclose(np.linalg.norm(p, axis=-1), 0.5, atol=1e-7)


def test_ground_truth_frames():
    scene = sphere_scene()
    reg = assign_output_slices([rgb(), polarization(), nir(), multispectral()])
    pose = ring_poses(3, scene.rig)[1]
    for m in reg:
        cam = rig_cameras(scene.rig, m, pose)
        raw = trace_ground_truth(scene, cam, m)
        assert raw.dtype == np.uint16 and raw.shape == (64, 64)
        assert raw.max() <= (1 << m.bit_depth) - 1
        full = trace_ground_truth(scene, cam, m, mosaicked=False)
        assert full.shape == (64, 64, m.n_channels)


def test_silhouette_matches_trace():
    scene = sphere_scene()
    m = assign_output_slices([rgb()])[0]
    cam = rig_cameras(scene.rig, m, ring_poses(2, scene.rig)[0])
    assert np.array_equal(silhouette(scene, cam), trace_scene(scene, cam, m).hit.reshape(64, 64))


def test_rig_poses_look_at_object():
    rig = RigSpec()
    poses = ring_poses(20, rig)
    assert len(poses) == 20
    for p in poses:
        assert np.linalg.norm(p.translation) == pytest.approx(rig.distance, rel=0.05)
        assert p.rotation[:, 2] @ (-p.translation / np.linalg.norm(p.translation)) > 0.99


def test_analytic_field_renders_ground_truth():
    scene = sphere_scene(texture=Texture(0.3))
    reg = assign_output_slices([rgb(), polarization()])
    field = AnalyticField(scene, reg)
    for m in reg:
        cam = rig_cameras(scene.rig, m, ring_poses(5, scene.rig)[2])
        gt = trace_ground_truth(scene, cam, m).astype(np.float64) / ((1 << m.bit_depth) - 1)
        out = render_frame(field, cam, m, options=RenderOptions(n_samples=64))["image"]
        assert np.abs(out - gt).max() <= 0.02


def test_bundle_layout(tmp_path):
    make_scene_bundle(sphere_scene(), tmp_path, n_views=6, modalities=("rgb", "pol"), test_views=(5,))
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert [c["reference"] for c in man["cameras"]].count(True) == 1
    assert len(man["views"]) == 6
    assert man["split"]["test"] == [5]
    for v in man["views"]:
        for rel in list(v["frames"].values()) + list(v["masks"].values()):
            assert (tmp_path / rel).exists()


def test_bundle_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        make_scene_bundle(sphere_scene(), out, n_views=3, modalities=("rgb",), test_views=(2,))
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
