"""Multimodal training loop.

Every iteration draws the same number of rays from each modality's budgeted
views, renders the shared output vector, and supervises only the channel(s)
of the ray's own modality: the pattern channel under the pixel for raw
mosaicked frames, or all channels for demosaicked frames. An eikonal term on
uniform ROI samples regularizes the SDF.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from ._fpu import flush_denormals
from .autodiff import Tape, backward
from .dataset import SceneDataset, ViewBudget
from .errors import EmptyBudget, NonFiniteLoss
from .field import FieldConfig, HashGridConfig, SceneModel, save_checkpoint, sdf_gradient, sphere_pretrain
from .geometry import camera_rays, frame_pixels
from .metrics import demosaick_bilinear, psnr
from .modality import channel_at, polarizer_cos_sin
from .renderer import RenderOptions, modality_values, render_frame, render_rays


@dataclass(frozen=True)
class TrainConfig:
    rays_per_modality: int = 2048
    half_rays: bool = False
    samples_per_ray: int = 64
    total_iters: int = 20000
    lr_tables: float = 1e-2
    lr_mlp: float = 5e-4
    lr_sharpness: float = 1e-2
    warmup_fraction: float = 0.10
    decay_points: tuple[float, ...] = (0.50, 0.75, 0.90)
    decay_factor: float = 0.33
    betas: tuple[float, float] = (0.9, 0.99)
    eps_tables: float = 1e-15
    eps_mlp: float = 1e-8
    weight_decay_mlp: float = 1e-2
    photometric_weight: float = 1.0
    # modality -> [(progress fraction, weight), ...] piecewise constant; empty = constant 1.
    loss_schedules: dict = field(default_factory=dict)
    eikonal_weight: float = 0.1
    eikonal_points: int = 256
    supervision: str = "mosaicked"       # "mosaicked" | "demosaicked"
    stratified: bool = True
    weight_prune: float = 0.0
    sphere_init_steps: int = 300
    rgb_pretrain_iters: int = 0          # disabled; RGB-only warm start not used by default
    seed: int = 0
    log_every: int = 50
    eval_every: int = 0
    eval_views: int = 2
    eval_stride: int = 2
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        pts = (self.warmup_fraction,) + tuple(self.decay_points)
        if not all(0.0 < p < 1.0 for p in pts) or any(a >= b for a, b in zip(pts, pts[1:])):
            raise ValueError("warmup/decay fractions must lie in (0, 1) and increase strictly")
        if min(self.rays_per_modality, self.samples_per_ray, self.total_iters) <= 0:
            raise ValueError("ray, sample and iteration counts must be positive")
        if self.supervision not in ("mosaicked", "demosaicked"):
            raise ValueError(f"unknown supervision {self.supervision!r}")

    @property
    def rays(self) -> int:
        return self.rays_per_modality // 2 if self.half_rays else self.rays_per_modality

    def to_dict(self) -> dict:
        d = asdict(self)
        d["field"] = self.field.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        if "field" in d and isinstance(d["field"], dict):
            d["field"] = FieldConfig.from_dict(d["field"])
        for key in ("decay_points", "betas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def desk_field_config(**overrides) -> FieldConfig:
    """Field sized for single-core desk runs: smaller tables, no normal input."""
    grid = HashGridConfig(levels=8, table_size_log2=16)
    base = dict(sdf_grid=grid, radiance_grid=grid, use_normal=False)
    base.update(overrides)
    return FieldConfig(**base)


def desk_train_config(**overrides) -> TrainConfig:
    """Settings that train the 64x64 synthetic scenes in minutes on one core."""
    base = dict(rays_per_modality=512, samples_per_ray=64, total_iters=1000, lr_mlp=2e-3, weight_prune=1e-4,
                sphere_init_steps=200, field=desk_field_config())
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# learning-rate schedule


def lr_factor(it: int, config: TrainConfig) -> float:
    """Schedule multiplier: linear 0.01 -> 1 warmup, then step decays."""
    total = config.total_iters
    warm = config.warmup_fraction * total
    if it < warm:
        return 0.01 + 0.99 * it / warm
    k = sum(1 for d in config.decay_points if it >= d * total)
    return config.decay_factor**k


def lr_at(it: int, config: TrainConfig) -> dict[str, float]:
    if not 0 <= it <= config.total_iters:
        raise ValueError(f"iteration {it} outside [0, {config.total_iters}]")
    f = lr_factor(it, config)
    return {"tables": config.lr_tables * f, "mlp": config.lr_mlp * f, "sharpness": config.lr_sharpness * f}


def make_optimizer(model: SceneModel, config: TrainConfig) -> torch.optim.AdamW:
    groups = model.parameter_groups()
    spec = {
        "tables": dict(eps=config.eps_tables, weight_decay=0.0),
        "mlp": dict(eps=config.eps_mlp, weight_decay=config.weight_decay_mlp),
        "sharpness": dict(eps=config.eps_mlp, weight_decay=0.0),
    }
    param_groups = [dict(params=[p for _, p in groups[name]], name=name, lr=0.0, **spec[name])
                    for name in ("tables", "mlp", "sharpness") if groups[name]]
    return torch.optim.AdamW(param_groups, betas=config.betas)


# --------------------------------------------------------------------------
# batches


@dataclass
class _ModalityRays:
    views: tuple[int, ...]
    origins: np.ndarray    # (V, P, 3)
    dirs: np.ndarray       # (V, P, 3)
    near: np.ndarray       # (V, P)
    far: np.ndarray
    hit: np.ndarray
    channel: np.ndarray    # (P,)
    target: np.ndarray     # (V, P) mosaicked or (V, P, C) full-channel
    cos2: np.ndarray | None  # (V, P, 4) for polarization
    sin2: np.ndarray | None


class RayCache:
    """Per-pixel rays and targets of every camera, computed once."""

    def __init__(self, dataset: SceneDataset, supervision: str = "mosaicked", views=None):
        self.dataset = dataset
        self.supervision = supervision
        self.by_modality: dict[str, _ModalityRays] = {}
        views = tuple(dataset.view_ids if views is None else views)
        for m in dataset.registry:
            k = dataset.camera(views[0], m.name).intrinsics
            pix = frame_pixels(k.width, k.height)
            chan = channel_at(m.pattern, pix[:, 1], pix[:, 0]) if m.pattern is not None else np.zeros(len(pix), int)
            o, d, n, f, h, tg, c2, s2 = [], [], [], [], [], [], [], []
            for v in views:
                cam = dataset.camera(v, m.name)
                ro, rd, rn, rf, rh = camera_rays(cam, pix)
                o.append(ro), d.append(rd), n.append(rn), f.append(rf), h.append(rh)
                frame = dataset.frame(m.name, v)
                if supervision == "mosaicked":
                    tg.append(frame.reshape(-1))
                elif m.name in dataset.full_channel:
                    tg.append(dataset.full_channel[m.name][dataset.view_ids.index(v)].reshape(len(pix), -1))
                else:
                    tg.append(demosaick_bilinear(frame, m.pattern).reshape(len(pix), -1))
                if m.is_polarization:
                    from .modality import camera_roll_about_rays

                    roll = camera_roll_about_rays(cam.pose.rotation, rd)
                    cc, ss = polarizer_cos_sin(m.filter_angles[None, :] + roll[:, None])
                    c2.append(cc), s2.append(ss)
            self.by_modality[m.name] = _ModalityRays(
                views, np.stack(o), np.stack(d), np.stack(n), np.stack(f), np.stack(h), chan, np.stack(tg),
                np.stack(c2) if c2 else None, np.stack(s2) if s2 else None)


@dataclass
class RaySampleBatch:
    groups: list[tuple[str, int, int]]   # (modality, start, end) rows
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    hit: np.ndarray
    view: np.ndarray
    row: np.ndarray
    col: np.ndarray
    channel: np.ndarray
    targets: list[np.ndarray]            # per group: (n,) or (n, C)
    cos2: list[np.ndarray | None]        # per group: (n,) or (n, 4)
    sin2: list[np.ndarray | None]

    def __len__(self) -> int:
        return len(self.origins)

    def counts(self) -> dict[str, int]:
        return {name: end - start for name, start, end in self.groups}


def build_batch(dataset: SceneDataset, budget: ViewBudget, rays_per_modality: int, seed=None,
                rng: np.random.Generator | None = None, cache: RayCache | None = None,
                supervision: str = "mosaicked") -> RaySampleBatch:
    """Exactly ``rays_per_modality`` rays per budgeted modality, drawn uniformly
    (with replacement) over the modality's views and pixels."""
    if not budget.views:
        raise EmptyBudget("the view budget names no modality")
    for name, views in budget.views.items():
        if len(views) == 0:
            raise EmptyBudget(f"modality {name!r} has no usable views")
    rng = np.random.default_rng(seed) if rng is None else rng
    cache = RayCache(dataset, supervision) if cache is None else cache
    parts = {k: [] for k in ("origins", "dirs", "near", "far", "hit", "view", "row", "col", "channel")}
    groups, targets, cos2, sin2 = [], [], [], []
    start = 0
    for m in dataset.registry:
        if m.name not in budget.views:
            continue
        mr = cache.by_modality[m.name]
        allowed = np.array([mr.views.index(v) for v in budget[m.name]])
        vi = allowed[rng.integers(len(allowed), size=rays_per_modality)]
        width = dataset.camera(mr.views[0], m.name).intrinsics.width
        pi = rng.integers(mr.origins.shape[1], size=rays_per_modality)
        parts["origins"].append(mr.origins[vi, pi])
        parts["dirs"].append(mr.dirs[vi, pi])
        parts["near"].append(mr.near[vi, pi])
        parts["far"].append(mr.far[vi, pi])
        parts["hit"].append(mr.hit[vi, pi])
        parts["view"].append(np.array(mr.views)[vi])
        parts["row"].append(pi // width)
        parts["col"].append(pi % width)
        parts["channel"].append(mr.channel[pi])
        targets.append(mr.target[vi, pi])
        mosaicked = supervision == "mosaicked"
        if mr.cos2 is not None:
            c, s = mr.cos2[vi, pi], mr.sin2[vi, pi]
            if mosaicked:
                ch = mr.channel[pi]
                c, s = c[np.arange(len(pi)), ch], s[np.arange(len(pi)), ch]
            cos2.append(c), sin2.append(s)
        else:
            cos2.append(None), sin2.append(None)
        groups.append((m.name, start, start + rays_per_modality))
        start += rays_per_modality
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    return RaySampleBatch(groups, targets=targets, cos2=cos2, sin2=sin2, **cat)


# --------------------------------------------------------------------------
# losses


def photometric_loss(color: torch.Tensor, batch: RaySampleBatch, group: int, modality, mosaicked: bool = True):
    """Mean L1 between the modality's rendered value(s) and the raw target(s)."""
    name, start, end = batch.groups[group]
    rows = color[start:end]
    dtype = color.dtype
    cos2 = sin2 = None
    if batch.cos2[group] is not None:
        cos2 = torch.as_tensor(batch.cos2[group], dtype=dtype)
        sin2 = torch.as_tensor(batch.sin2[group], dtype=dtype)
    channel = torch.as_tensor(batch.channel[start:end]) if mosaicked else None
    pred = modality_values(rows, modality, channel, cos2, sin2)
    target = torch.as_tensor(batch.targets[group], dtype=dtype)
    return (pred - target).abs().mean()


def eikonal_loss(sdf_fn, n_points: int, seed=0, step: float = 1e-3, generator: torch.Generator | None = None,
                 dtype=torch.float32):
    """Mean ``(|∇sdf| - 1)²`` over uniform samples of the unit ball (numerical gradient)."""
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    gen = torch.Generator().manual_seed(int(seed)) if generator is None else generator
    d = torch.randn(n_points, 3, generator=gen, dtype=torch.float64)
    d = d / d.norm(dim=-1, keepdim=True)
    r = torch.rand(n_points, 1, generator=gen, dtype=torch.float64) ** (1.0 / 3.0)
    pts = (d * r).to(dtype)
    g = sdf_gradient(sdf_fn, pts, step)
    return ((g.norm(dim=-1) - 1.0) ** 2).mean()


def loss_weight(config: TrainConfig, modality: str, progress: float) -> float:
    sched = config.loss_schedules.get(modality)
    w = config.photometric_weight
    if not sched:
        return w
    for frac, value in sorted(sched):
        if progress >= frac:
            w = value
    return w


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SceneModel
    log: list[dict]
    checkpoint: Path | None
    seconds: float


def _tensors(batch: RaySampleBatch, dtype):
    return (torch.as_tensor(batch.origins, dtype=dtype), torch.as_tensor(batch.dirs, dtype=dtype),
            torch.as_tensor(batch.near, dtype=dtype), torch.as_tensor(batch.far, dtype=dtype),
            torch.as_tensor(batch.hit))


@flush_denormals()
def train_step(model: SceneModel, optimizer, batch: RaySampleBatch, config: TrainConfig, it: int,
               generator: torch.Generator, dataset: SceneDataset) -> dict:
    """One optimizer step. Output heads of modalities absent from the batch
    are left out of the update entirely (no gradient, no weight decay)."""
    for group in optimizer.param_groups:
        group["lr"] = lr_at(it, config)[group["name"]]
    opts = RenderOptions(n_samples=config.samples_per_ray, stratified=config.stratified,
                         weight_prune=config.weight_prune)
    progress = it / config.total_iters
    with Tape() as tape:
        out = render_rays(model, *_tensors(batch, torch.float32), options=opts, generator=generator)
        losses = {}
        total = 0.0
        for g, (name, _, _) in enumerate(batch.groups):
            l = photometric_loss(out.color, batch, g, model.modality(name), config.supervision == "mosaicked")
            losses[name] = l
            total = total + loss_weight(config, name, progress) * l
        if config.eikonal_weight > 0:
            eik = eikonal_loss(model.query_sdf, config.eikonal_points, step=model.config.step, generator=generator)
            losses["eikonal"] = eik
            total = total + config.eikonal_weight * eik
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss at iteration {it}: "
                            + ", ".join(f"{k}={float(v):.4g}" for k, v in losses.items()))
    optimizer.zero_grad(set_to_none=True)
    backward(tape, total)
    present = {name for name, _, _ in batch.groups}
    for name, head in model.radiance.heads.items():
        if name not in present:
            head.weight.grad = None
            head.bias.grad = None
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()} | {"total": float(total.detach())}


def eval_psnr(model: SceneModel, dataset: SceneDataset, views, stride: int = 1, n_samples: int = 64,
              modalities=None) -> dict[str, float]:
    """Mean masked PSNR (mosaicked) over ``views``; unmasked when the dataset has no masks."""
    opts = RenderOptions(n_samples=n_samples)
    out = {}
    for m in dataset.registry:
        if modalities is not None and m.name not in modalities:
            continue
        vals = []
        for v in views:
            pred = render_frame(model, dataset.camera(v, m.name), m, stride=stride, options=opts)["image"]
            target = dataset.frame(m.name, v)[::stride, ::stride]
            mask = dataset.mask(m.name, v)
            mask = np.ones(target.shape, bool) if mask is None else mask[::stride, ::stride]
            vals.append(psnr(pred, target, mask))
        out[m.name] = float(np.mean(vals))
    return out


def build_model(dataset: SceneDataset, config: TrainConfig) -> SceneModel:
    torch.manual_seed(config.seed)
    model = SceneModel(dataset.registry, config.field)
    if config.sphere_init_steps > 0:
        sphere_pretrain(model, steps=config.sphere_init_steps, seed=config.seed)
    return model


@flush_denormals()
def train(dataset: SceneDataset, config: TrainConfig, budget: ViewBudget | None = None, out_dir=None,
          model: SceneModel | None = None, cache: RayCache | None = None, progress=None) -> TrainResult:
    """Train a scene model; deterministic given ``config.seed``.

    Writes ``metrics.csv``, ``config.json`` and ``model.ckpt`` into ``out_dir``
    when given.
    """
    torch.use_deterministic_algorithms(True)
    t0 = time.perf_counter()
    budget = dataset.default_budget() if budget is None else budget
    if model is None:
        model = build_model(dataset, config)
    cache = RayCache(dataset, config.supervision) if cache is None else cache
    optimizer = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    log = []
    eval_views = list(dataset.split.test[: config.eval_views])
    if config.rgb_pretrain_iters > 0 and "rgb" in budget.views:
        pre = ViewBudget({"rgb": budget["rgb"]})
        for it in range(config.rgb_pretrain_iters):
            batch = build_batch(dataset, pre, config.rays, rng=rng, cache=cache, supervision=config.supervision)
            train_step(model, optimizer, batch, config, 0, gen, dataset)
    for it in range(config.total_iters):
        batch = build_batch(dataset, budget, config.rays, rng=rng, cache=cache, supervision=config.supervision)
        try:
            losses = train_step(model, optimizer, batch, config, it, gen, dataset)
        except NonFiniteLoss:
            if out_dir is not None:
                save_checkpoint(model, out_dir / "nonfinite_snapshot.ckpt", {"iter": it})
            raise
        last = it == config.total_iters - 1
        if it % config.log_every == 0 or last:
            row = {"iter": it} | {f"loss_{k}": v for k, v in losses.items()}
            row["sharpness"] = float(model.sharpness().detach())
            row["lr_tables"] = lr_at(it, config)["tables"]
            if config.eval_every and (it % config.eval_every == 0 or last) and eval_views:
                for k, v in eval_psnr(model, dataset, eval_views, config.eval_stride,
                                      config.samples_per_ray).items():
                    row[f"eval_psnr_{k}"] = v
            log.append(row)
            if progress is not None:
                progress(row)
    ckpt = None
    if out_dir is not None:
        _write_log(log, out_dir / "metrics.csv")
        ckpt = out_dir / "model.ckpt"
        save_checkpoint(model, ckpt, {"train_config": config.to_dict(), "iters": config.total_iters})
    return TrainResult(model, log, ckpt, time.perf_counter() - t0)


def _write_log(log: list[dict], path: Path) -> None:
    keys = []
    for row in log:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, restval="", lineterminator="\n")
        w.writeheader()
        for row in log:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
