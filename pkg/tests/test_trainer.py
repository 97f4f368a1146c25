import dataclasses

import numpy as np
import pytest
import torch

from mmrf.dataset import ViewBudget, load_scene
from mmrf.errors import EmptyBudget
from mmrf.trainer import (
    RayCache,
    TrainConfig,
    build_batch,
    build_model,
    desk_train_config,
    eikonal_loss,
    lr_at,
    make_optimizer,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def dataset(sphere_bundle):
    return load_scene(sphere_bundle)


@pytest.fixture(scope="module")
def cache(dataset):
    return RayCache(dataset)


def tiny_config(**kw):
    base = dict(rays_per_modality=64, samples_per_ray=16, total_iters=6, sphere_init_steps=10, eval_every=0,
                eikonal_points=32, log_every=1)
    base.update(kw)
    return desk_train_config(**base)


def test_schedule_closed_form():
    cfg = TrainConfig(total_iters=20000)
    peak = {"tables": 1e-2, "mlp": 5e-4, "sharpness": cfg.lr_sharpness}
    T = cfg.total_iters
    for it, factor in ((0, 0.01), (int(0.1 * T), 1.0), (int(0.6 * T), 0.33), (int(0.8 * T), 0.33**2),
                       (int(0.95 * T), 0.33**3)):
        got = lr_at(it, cfg)
        for g in peak:
            assert got[g] == peak[g] * factor, (it, g)
    with pytest.raises(ValueError):
        lr_at(T + 1, cfg)


def test_schedule_shape():
    cfg = TrainConfig(total_iters=1000)
    lrs = np.array([lr_at(i, cfg)["tables"] for i in range(1001)])
    warm = lrs[:101]
    assert np.all(np.diff(warm) > 0) and np.abs(np.diff(warm[:100]) - np.diff(warm[:100])[0]).max() < 1e-15
    assert np.all(np.diff(lrs[100:]) <= 0)


def test_config_round_trip_and_validation():
    cfg = desk_train_config(seed=5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(decay_points=(0.5, 0.4, 0.9))


def test_batch_composition(dataset, cache):
    budget = ViewBudget({"rgb": dataset.split.train, "ms": (0, 1)})
    b = build_batch(dataset, budget, 100, seed=0, cache=cache)
    assert b.counts() == {"rgb": 100, "ms": 100}
    ms_rows = slice(*[(s, e) for n, s, e in b.groups if n == "ms"][0])
    assert set(b.view[ms_rows]) <= {0, 1}
    assert not set(b.view) & set(dataset.split.test)
    b2 = build_batch(dataset, budget, 100, seed=0, cache=cache)
    assert np.array_equal(b.origins, b2.origins) and np.array_equal(b.row, b2.row)
    with pytest.raises(EmptyBudget):
        build_batch(dataset, ViewBudget({}), 10, cache=cache)
    with pytest.raises(EmptyBudget):
        build_batch(dataset, ViewBudget({"rgb": ()}), 10, cache=cache)


def test_batch_targets_match_frames(dataset, cache):
    b = build_batch(dataset, ViewBudget({"pol": dataset.split.train}), 50, seed=3, cache=cache)
    for i in range(50):
        assert b.targets[0][i] == dataset.frame("pol", int(b.view[i]))[b.row[i], b.col[i]]


def test_eikonal_zero_for_exact_sdf():
    loss = eikonal_loss(lambda p: (p.norm(dim=-1) - 0.5, None), 256, seed=0, step=1e-4, dtype=torch.float64)
    assert float(loss) < 1e-6


def test_channel_isolation(dataset, cache):
    cfg = tiny_config()
    model = build_model(dataset, cfg)
    opt = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(0)
    batch = build_batch(dataset, ViewBudget({"rgb": dataset.split.train}), 64, seed=0, cache=cache)
    before = {n: (h.weight.detach().clone(), h.bias.detach().clone()) for n, h in model.radiance.heads.items()}
    for it in range(3):
        train_step(model, opt, batch, cfg, it + 2, gen, dataset)
    for name, head in model.radiance.heads.items():
        same = torch.equal(head.weight, before[name][0]) and torch.equal(head.bias, before[name][1])
        assert same == (name != "rgb"), name


def test_zero_gradient_step_is_pure_weight_decay(dataset):
    cfg = tiny_config()
    model = build_model(dataset, cfg)
    opt = make_optimizer(model, cfg)
    lrs = lr_at(3, cfg)
    for g in opt.param_groups:
        g["lr"] = lrs[g["name"]]
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    groups = {n: g for g, items in model.parameter_groups().items() for n, _ in items}
    for n, p in model.named_parameters():
        decay = cfg.weight_decay_mlp * lrs["mlp"] if groups[n] == "mlp" else 0.0
        torch.testing.assert_close(p.detach(), before[n] * (1 - decay), rtol=0, atol=0)


def test_optimizer_groups(dataset):
    cfg = tiny_config()
    opt = make_optimizer(build_model(dataset, cfg), cfg)
    spec = {g["name"]: (g["eps"], g["weight_decay"]) for g in opt.param_groups}
    assert spec == {"tables": (1e-15, 0.0), "mlp": (1e-8, 1e-2), "sharpness": (1e-8, 0.0)}
    assert opt.defaults["betas"] == (0.9, 0.99)


def test_short_training_run(tmp_path, dataset, cache):
    cfg = tiny_config(total_iters=8)
    res = train(dataset, cfg, budget=ViewBudget({"rgb": dataset.split.train, "pol": dataset.split.train}),
                out_dir=tmp_path, cache=cache)
    assert (tmp_path / "model.ckpt").exists() and (tmp_path / "metrics.csv").exists()
    assert (tmp_path / "config.json").exists()
    assert len(res.log) >= 1 and all(np.isfinite(r["loss_total"]) for r in res.log)
    assert {"loss_rgb", "loss_pol", "loss_eikonal"} <= set(res.log[-1])


def test_half_rays_budget():
    cfg = tiny_config(half_rays=True, rays_per_modality=64)
    assert cfg.rays == 32 and dataclasses.replace(cfg, half_rays=False).rays == 64
