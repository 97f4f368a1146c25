"""Numbered acceptance criteria.

Each test records one PASS/FAIL line (see ``conftest.py``) and then asserts.
Training criteria use the desk preset on 64x64 synthetic bundles generated
into a temporary directory; every run is seeded and deterministic.
"""

import copy
import time

import numpy as np
import pytest
import torch

from mmrf import autodiff as ad
from mmrf.dataset import ViewBudget, demosaicked, load_scene, unbalanced_budget
from mmrf.field import HashGrid, HashGridConfig, SceneModel, sphere_pretrain
from mmrf.geometry import DistortionCoefficients, camera_rays, distort, frame_pixels, project, undistort
from mmrf.metrics import EvalReport, evaluate, generate_masks, mask_iou, psnr, ssim
from mmrf.modality import (
    assign_output_slices,
    intensities_to_stokes,
    multispectral,
    polarization,
    rgb,
    stokes_to_intensity,
)
from mmrf.renderer import (
    RenderOptions,
    modality_values,
    render_frame,
    render_rays,
    sdf_to_alpha,
    stokes_from_unit,
    transmittance_weights,
)
from mmrf.synth import (
    AnalyticField,
    Texture,
    make_scene_bundle,
    ring_poses,
    rig_cameras,
    silhouette,
    sphere_scene,
    trace_ground_truth,
    trace_scene,
)
from mmrf.trainer import (
    RayCache,
    TrainConfig,
    build_batch,
    build_model,
    desk_field_config,
    desk_train_config,
    lr_at,
    make_optimizer,
    train,
    train_step,
)
from oracles import naive_psnr, naive_ssim

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
# Equal per-arm budgets for the three-seed comparisons (criteria 6-8).
PAIR_BUDGET = dict(rays_per_modality=256, total_iters=400)
FIVE_MODALITY_BUDGET = dict(rays_per_modality=128, total_iters=400)
FIVE = ("rgb", "mono", "nir", "pol", "ms")


def correlated_scene():
    """Textured sphere; NIR and MS albedos follow the RGB albedo through fixed spectral curves."""
    return sphere_scene(texture=Texture(0.4))


@pytest.fixture(scope="module")
def bundles(tmp_path_factory):
    made = {}

    def get(name, scene_fn, modalities):
        if name not in made:
            out = tmp_path_factory.mktemp(name)
            make_scene_bundle(scene_fn(), out, n_views=50, modalities=modalities)
            made[name] = load_scene(out / "manifest.json")
        return made[name]

    return get


def run_arm(ds, views, seed, budget=None, supervision="mosaicked", out_dir=None):
    """Train one arm and evaluate it on the raw test frames with the analytic masks."""
    cfg = desk_train_config(seed=seed, supervision=supervision, eval_every=0, **(budget or {}))
    data = demosaicked(ds) if supervision == "demosaicked" else ds
    res = train(data, cfg, budget=ViewBudget(views), out_dir=out_dir)
    rep = evaluate(res.model, ds, modalities=list(views), n_samples=cfg.samples_per_ray)
    return res, rep


# --------------------------------------------------------------------------
# 1. gradient correctness


def _p(shape, seed, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(shape, generator=g, dtype=torch.float64) * scale).requires_grad_(True)


def _weighted(out, seed):
    w = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed + 99), dtype=out.dtype)
    return ad.reduce_sum(ad.multiply(out, w))


def kernel_cases():
    """name -> (fn, params, step) for every differentiable kernel, in float64."""
    cases = {}
    for i, (name, k) in enumerate({"relu": ad.relu, "sigmoid": ad.sigmoid, "sin": ad.sin, "cos": ad.cos,
                                   "softplus": lambda x: ad.softplus(x, beta=3.0),
                                   "reduce_sum": lambda x: ad.reduce_sum(x, dim=0)}.items()):
        x = _p((100,), i)
        cases[name] = (lambda k=k, x=x, i=i: _weighted(k(x), i), {"x": x}, 1e-6)
    for i, name in enumerate(("multiply", "add")):
        a, b = _p((100,), 10 + i), _p((100,), 20 + i)
        cases[name] = (lambda f=getattr(ad, name), a=a, b=b: _weighted(f(a, b), 5), {"a": a, "b": b}, 1e-6)
    w, b, x = _p((4, 25), 30), _p((4,), 31), _p((4, 25), 32)
    cases["linear"] = (lambda: _weighted(ad.linear(w, b, x), 6), {"w": w, "b": b, "x": x}, 1e-6)
    g = torch.Generator().manual_seed(33)
    rows = torch.randint(0, 20, (200,), generator=g)
    vals = _p((200, 2), 34)
    cases["sorted_scatter_add"] = (lambda: _weighted(ad.sorted_scatter_add(20, rows, vals), 7), {"values": vals},
                                   1e-6)
    table = _p((30, 2), 35)
    idx = torch.randint(0, 30, (50, 8), generator=g)
    wts = torch.rand((50, 8), generator=g, dtype=torch.float64).requires_grad_(True)
    cases["gather_interpolate"] = (lambda: _weighted(ad.gather_interpolate(table, idx, wts), 8),
                                   {"table": table, "weights": wts}, 1e-6)
    grid = HashGrid(HashGridConfig(levels=4, base_resolution=4, growth=2.0, table_size_log2=8), init_scale=1.0)
    grid.double()
    pos = (torch.rand((100, 3), generator=g, dtype=torch.float64) * 1.8 - 0.9).requires_grad_(True)
    cases["hash_interpolate"] = (lambda: _weighted(grid(pos), 9), {"table": grid.table, "pos": pos}, 1e-7)
    fi, fn_, s = _p((10, 10), 36, 0.05), _p((10, 10), 37, 0.05), torch.tensor(20.0, dtype=torch.float64)
    s.requires_grad_(True)
    cases["sdf_to_alpha"] = (lambda: _weighted(sdf_to_alpha(fi, fn_, s), 10), {"f_i": fi, "f_next": fn_, "s": s},
                             1e-6)
    alpha = torch.rand((10, 10), generator=g, dtype=torch.float64).mul(0.5).requires_grad_(True)
    cases["transmittance_weights"] = (lambda: _weighted(transmittance_weights(alpha)[0], 11), {"alpha": alpha},
                                      1e-6)
    u = torch.rand((34, 3), generator=g, dtype=torch.float64).requires_grad_(True)
    cases["stokes_from_unit"] = (lambda: _weighted(stokes_from_unit(u), 12), {"u": u}, 1e-6)
    return cases


def end_to_end_report(camera):
    torch.manual_seed(0)
    reg = assign_output_slices([rgb(), polarization()])
    model = SceneModel(reg, desk_field_config())
    sphere_pretrain(model, steps=100)
    model = copy.deepcopy(model).double()
    m = model.modality("rgb")
    pix = frame_pixels(64, 64)[np.random.default_rng(0).choice(4096, 64, replace=False)]
    o, d, near, far, hit = camera_rays(camera, pix)
    target = torch.rand(64, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    channel = m.pattern.channel_map(64, 64)[pix[:, 1], pix[:, 0]]

    def loss():
        out = render_rays(model, o, d, near, far, hit, RenderOptions(n_samples=32))
        return (modality_values(out.color, m, channel) - target).abs().mean()

    named = dict(model.named_parameters())
    params = {k: named[k] for k in ("sdf.grid.table", "sdf.layers.0.weight", "sdf.log_sharpness",
                                   "radiance.grid.table", "radiance.heads.rgb.weight", "background.trunk.0.weight")}
    return ad.finite_difference_check(loss, params, tol=1e-2, step=1e-4, n_probes=20, atol=1e-4)


@pytest.mark.criterion(1)
def test_gradient_correctness(camera, criterion):
    t0 = time.perf_counter()
    worst, failed = 0.0, []
    for name, (fn, params, step) in kernel_cases().items():
        rep = ad.finite_difference_check(fn, params, tol=1e-3, step=step, n_probes=100)
        assert all(n == min(100, p.numel()) for n, p in zip(rep.probes.values(), params.values())), name
        worst = max(worst, *rep.max_rel_error.values())
        if not rep.passed:
            failed.extend(f"{name}.{line}" for line in rep.lines())
    e2e = end_to_end_report(camera)
    elapsed = time.perf_counter() - t0
    e2e_worst = max(e2e.max_rel_error.values())
    ok = not failed and e2e.passed and elapsed < 120
    detail = (f"kernel max rel err {worst:.1e} (<=1e-3, 100 probes), end-to-end {e2e_worst:.1e} (<=1e-2, 20 probes), "
              f"{elapsed:.0f}s (<120s)")
    assert criterion(ok, detail), failed + e2e.lines()


# --------------------------------------------------------------------------
# 2. Stokes exactness


@pytest.mark.criterion(2)
def test_stokes_exactness(criterion):
    rng = np.random.default_rng(2)
    n = 10_000
    s0 = rng.uniform(0.01, 1.0, n)
    dolp, phi = rng.uniform(0, 1, n), rng.uniform(0, np.pi, n)
    s = np.stack([s0, s0 * dolp * np.cos(2 * phi), s0 * dolp * np.sin(2 * phi)], axis=-1)
    i0, i45, i90, i135 = (stokes_to_intensity(s, a) for a in (0, 45, 90, 135))
    round_trip = np.abs(intensities_to_stokes(i0, i45, i90, i135) - s).max()
    sums = max(np.abs(i0 + i90 - s0).max(), np.abs(i45 + i135 - s0).max())
    theta, roll, shift = rng.uniform(0, 180, n), rng.uniform(-180, 180, n), rng.uniform(-360, 360, n)
    roll_err = np.abs(stokes_to_intensity(s, theta + shift, roll - shift) - stokes_to_intensity(s, theta, roll)).max()
    ok = round_trip <= 1e-12 and sums <= 1e-12 and roll_err <= 1e-12
    assert criterion(ok, f"round trip {round_trip:.1e}, quarter sums {sums:.1e}, roll invariance {roll_err:.1e} "
                         f"(all <=1e-12, 10k cases)")


# --------------------------------------------------------------------------
# 3. distortion


@pytest.mark.criterion(3)
def test_distortion(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    coefficient_sets = [DistortionCoefficients(-0.05, 0.01, 5e-4, -5e-4)] + [
        DistortionCoefficients(rng.uniform(-0.3, 0.1), rng.uniform(-0.05, 0.05), rng.uniform(-1e-3, 1e-3),
                               rng.uniform(-1e-3, 1e-3), max_radius=0.7) for _ in range(9)]
    for c in coefficient_sets:
        pts = rng.uniform(-0.45, 0.45, size=(1000, 2))
        worst = max(worst, np.abs(undistort(distort(pts, c), c) - pts).max(),
                    np.abs(distort(undistort(pts, c), c) - pts).max())
    scene = sphere_scene()
    reg = assign_output_slices([rgb(), polarization(), multispectral()])
    reproj = 0.0
    for m in reg:
        cam = rig_cameras(scene.rig, m, ring_poses(50, scene.rig)[7])
        pix = rng.uniform(0, 63, size=(1000, 2))
        o, d, _, _, _ = camera_rays(cam, pix, jitter=(0.0, 0.0), roi_radius=10.0)
        pts = o + d * rng.uniform(0.5, 5.0, size=(1000, 1))
        reproj = max(reproj, np.abs(project(cam, pts) - pix).max())
    ok = worst <= 1e-6 and reproj <= 1e-4
    assert criterion(ok, f"round trip {worst:.1e} (<=1e-6, 10 coefficient sets x 1000 points), "
                         f"reprojection {reproj:.1e} px (<=1e-4)")


# --------------------------------------------------------------------------
# 4. renderer against the analytic oracle


@pytest.mark.criterion(4)
def test_renderer_matches_oracle(criterion):
    scene = sphere_scene()
    reg = assign_output_slices([rgb(), polarization(), multispectral()])
    field = AnalyticField(scene, reg, sharpness=1e4)
    n_samples = 64
    pix_err, depth_ratio = 0.0, 0.0
    for m in reg:
        cam = rig_cameras(scene.rig, m, ring_poses(50, scene.rig)[3])
        gt = trace_ground_truth(scene, cam, m).astype(np.float64) / ((1 << m.bit_depth) - 1)
        traced = trace_scene(scene, cam, m)
        out = render_frame(field, cam, m, options=RenderOptions(n_samples=n_samples))
        pix_err = max(pix_err, np.abs(out["image"] - gt).max())
        _, _, near, far, _ = camera_rays(cam, frame_pixels(64, 64))
        interval = ((far - near) / n_samples).reshape(64, 64)
        both = (out["w_fg"] >= 0.5) & traced.hit.reshape(64, 64)
        depth_ratio = max(depth_ratio, (np.abs(out["depth"] - traced.depth.reshape(64, 64)) / interval)[both].max())
    ok = pix_err <= 0.02 and depth_ratio <= 1.0
    assert criterion(ok, f"max pixel error {pix_err:.1e} (<=0.02), max depth error {depth_ratio:.2f} sample "
                         f"intervals (<=1)")


# --------------------------------------------------------------------------
# 5 and 12. single-modality learning and determinism


@pytest.fixture(scope="module")
def rgb_runs(bundles, tmp_path_factory):
    ds = bundles("sphere_rgb", sphere_scene, ("rgb",))
    runs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"rgb_run{k}")
        t0 = time.perf_counter()
        res, rep = run_arm(ds, {"rgb": ds.split.train}, seed=0, out_dir=out)
        runs.append((res, rep, time.perf_counter() - t0))
    return runs


@pytest.mark.slow
@pytest.mark.criterion(5)
def test_single_modality_learning(rgb_runs, criterion):
    res, rep, elapsed = rgb_runs[0]
    value = rep.aggregate("rgb")[0]
    iters = desk_train_config().total_iters
    ok = value >= 28.0 and elapsed < 1800 and iters <= 20000
    assert criterion(ok, f"masked test PSNR {value:.2f} dB (>=28) after {iters} iters in "
                         f"{elapsed / 60:.1f} min (<30)")


@pytest.mark.slow
@pytest.mark.criterion(12)
def test_determinism(rgb_runs, criterion):
    (a, rep_a, _), (b, rep_b, _) = rgb_runs
    same_ckpt = a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    same_report = rep_a.to_csv() == rep_b.to_csv()
    assert criterion(same_ckpt and same_report, f"checkpoints bit-identical: {same_ckpt}, "
                                                f"EvalReports identical: {same_report}")


# --------------------------------------------------------------------------
# 6. cross-modal gain


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_cross_modal_gain(bundles, criterion):
    ds = bundles("rgb_nir", correlated_scene, ("rgb", "nir"))
    alone, joint = [], []
    for seed in SEEDS:
        alone.append(run_arm(ds, {"rgb": ds.split.train}, seed, PAIR_BUDGET)[1].aggregate("rgb")[0])
        joint.append(run_arm(ds, {"rgb": ds.split.train, "nir": ds.split.train}, seed,
                             PAIR_BUDGET)[1].aggregate("rgb")[0])
    wins = sum(j > a for j, a in zip(joint, alone))
    ok = np.mean(joint) >= np.mean(alone) - 0.1 and wins >= 2
    assert criterion(ok, f"RGB PSNR joint {np.mean(joint):.2f} vs RGB-only {np.mean(alone):.2f} dB "
                         f"({np.mean(joint) - np.mean(alone):+.2f}), joint better in {wins}/3 seeds")


# --------------------------------------------------------------------------
# 7. unbalanced transfer


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_unbalanced_transfer(bundles, criterion):
    ds = bundles("rgb_ms", correlated_scene, ("rgb", "ms"))
    alone, helped = [], []
    for seed in SEEDS:
        ms_views = unbalanced_budget(ds, "ms", 5, seed)["ms"]
        alone.append(run_arm(ds, {"ms": ms_views}, seed, PAIR_BUDGET)[1].aggregate("ms")[0])
        helped.append(run_arm(ds, {"rgb": ds.split.train, "ms": ms_views}, seed, PAIR_BUDGET)[1].aggregate("ms")[0])
    gain = np.mean(helped) - np.mean(alone)
    assert criterion(gain >= 0.5, f"MS PSNR with 45 RGB + 5 MS views {np.mean(helped):.2f} vs 5 MS views "
                                  f"{np.mean(alone):.2f} dB ({gain:+.2f}, need >=+0.5)")


# --------------------------------------------------------------------------
# 8. mosaicked against demosaicked supervision


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_mosaicked_close_to_demosaicked(bundles, criterion):
    ds = bundles("five", correlated_scene, FIVE)
    views = {m: ds.split.train for m in FIVE}
    raw = {m: [] for m in FIVE}
    dem = {m: [] for m in FIVE}
    for seed in SEEDS:
        for sup, store in (("mosaicked", raw), ("demosaicked", dem)):
            rep = run_arm(ds, views, seed, FIVE_MODALITY_BUDGET, supervision=sup)[1]
            for m in FIVE:
                store[m].append(rep.aggregate(m)[0])
    gaps = {m: np.mean(raw[m]) - np.mean(dem[m]) for m in FIVE}
    ok = all(abs(g) <= 1.0 for g in gaps.values())
    assert criterion(ok, "raw minus demosaicked " + ", ".join(f"{m} {g:+.2f}" for m, g in gaps.items())
                     + " dB (|gap| <=1.0)")


# --------------------------------------------------------------------------
# 9. channel isolation


@pytest.mark.criterion(9)
def test_channel_isolation(sphere_bundle, criterion):
    ds = load_scene(sphere_bundle)
    cfg = desk_train_config(rays_per_modality=64, samples_per_ray=16, total_iters=10, sphere_init_steps=10,
                            eval_every=0, eikonal_points=32)
    model = build_model(ds, cfg)
    opt = make_optimizer(model, cfg)
    results = []
    for name in ("rgb", "pol", "ms"):
        heads = model.radiance.heads
        before = {n: (h.weight.detach().clone(), h.bias.detach().clone()) for n, h in heads.items()}
        batch = build_batch(ds, ViewBudget({name: ds.split.train}), 64, seed=0, cache=RayCache(ds))
        train_step(model, opt, batch, cfg, 5, torch.Generator().manual_seed(0), ds)
        for other, h in heads.items():
            same = torch.equal(h.weight, before[other][0]) and torch.equal(h.bias, before[other][1])
            results.append(same == (other != name))
    assert criterion(all(results), f"{sum(results)}/{len(results)} head checks: other slices bit-identical, "
                                   f"trained slice moved")


# --------------------------------------------------------------------------
# 10. mask generation


@pytest.mark.slow
@pytest.mark.criterion(10)
def test_mask_generation(bundles, criterion):
    scene = sphere_scene()
    ds = bundles("sphere_rgb", sphere_scene, ("rgb",))
    # The mask model sees every view, train and test alike.
    res, _ = run_arm(ds, {"rgb": tuple(ds.view_ids)}, seed=0)
    masks = generate_masks(res.model, ds, modalities=["rgb"])["rgb"]
    ious = [mask_iou(masks[i], silhouette(scene, ds.camera(v, "rgb"))) for i, v in enumerate(ds.view_ids)]
    rng = np.random.default_rng(10)
    excluded = True
    for i, v in enumerate(ds.split.test):
        k = ds.view_ids.index(v)
        mask = masks[k]
        pred = render_frame(res.model, ds.camera(v, "rgb"), ds.modality("rgb"), options=RenderOptions())["image"]
        target = ds.frame("rgb", v)
        noisy_pred, noisy_target = pred.copy(), target.copy()
        noisy_pred[~mask] = rng.uniform(size=(~mask).sum())
        noisy_target[~mask] = rng.uniform(size=(~mask).sum())
        excluded &= psnr(noisy_pred, noisy_target, mask) == psnr(pred, target, mask)
    ok = min(ious) >= 0.95 and excluded
    assert criterion(ok, f"IoU vs analytic silhouettes min {min(ious):.3f} mean {np.mean(ious):.3f} over 50 views "
                         f"(>=0.95); PSNR unchanged when background pixels are overwritten: {excluded}")


# --------------------------------------------------------------------------
# 11. metric oracles and schedule


@pytest.mark.criterion(11)
def test_metric_oracles_and_schedule(criterion):
    rng = np.random.default_rng(11)
    dp = ds = 0.0
    for _ in range(5):
        a, b = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
        mask = rng.uniform(size=(8, 8)) > 0.3
        dp = max(dp, abs(psnr(a, b, mask) - naive_psnr(a, b, mask)))
        ds = max(ds, abs(ssim(a, b, mask) - naive_ssim(a, b, mask)))
    cfg = TrainConfig(total_iters=20000)
    T = cfg.total_iters
    peak = {"tables": cfg.lr_tables, "mlp": cfg.lr_mlp, "sharpness": cfg.lr_sharpness}
    expected = {0: 0.01, int(0.1 * T): 1.0, int(0.6 * T): 0.33, int(0.8 * T): 0.33**2, int(0.95 * T): 0.33**3}
    exact = all(lr_at(it, cfg)[g] == peak[g] * f for it, f in expected.items() for g in peak)
    ok = dp <= 1e-9 and ds <= 1e-6 and exact
    assert criterion(ok, f"PSNR diff {dp:.1e} (<=1e-9), SSIM diff {ds:.1e} (<=1e-6), schedule exact at "
                         f"{{0, .1T, .6T, .8T, .95T}}: {exact}")
