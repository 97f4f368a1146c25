"""Command-line entry points.

    mmrf synth      --out DIR [--spec FILE] [--views 50] [--modalities rgb,nir]
    mmrf validate   MANIFEST
    mmrf train      --manifest M --out DIR [--config FILE] [--<config-key> VALUE ...]
    mmrf render     --checkpoint C --manifest M --out DIR [--views 9,19] [--mode full-channel]
    mmrf eval       --checkpoint C --manifest M --out DIR [--split test] [--mask-model C2]
    mmrf experiment --plan NAME --manifest M --out DIR [--seeds 0,1,2]

Training flags mirror the keys of the training config one-to-one; a config
file (JSON or YAML) is applied first and flags override it. Exit status is 0
on success, 1 for user errors and 2 for internal errors; failures print one
line ``error code=<code> message=<text>`` on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import MMRFError

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(MMRFError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# configuration


_SCALARS = {"int": int, "float": float, "str": str}


def _config_flags(parser: argparse.ArgumentParser) -> None:
    from .trainer import TrainConfig

    group = parser.add_argument_group("training config (overrides the config file)")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":  # every command has its own --seed
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            group.add_argument(flag, dest=f"cfg_{f.name}", action=argparse.BooleanOptionalAction, default=None)
        elif f.type in _SCALARS:
            group.add_argument(flag, dest=f"cfg_{f.name}", type=_SCALARS[f.type], default=None)
    parser.add_argument("--preset", choices=("default", "desk"), default="desk",
                        help="base settings before the config file (desk: minutes on one core)")


def _read_structured(path) -> dict:
    text = Path(path).read_text()
    return json.loads(text) if str(path).endswith(".json") else (yaml.safe_load(text) or {})


def resolve_config(args):
    from .trainer import TrainConfig, desk_train_config

    base = desk_train_config() if getattr(args, "preset", "desk") == "desk" else TrainConfig()
    d = base.to_dict()
    if getattr(args, "config", None):
        loaded = _read_structured(args.config)
        if "field" in loaded:
            d["field"] = {**d["field"], **loaded.pop("field")}
        d.update(loaded)
    for key, value in vars(args).items():
        if key.startswith("cfg_") and value is not None:
            d[key[4:]] = value
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _write_run_manifest(out: Path, command: str, args, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    plain = {k: v for k, v in vars(args).items() if k != "func" and not k.startswith("cfg_")}
    doc = {"command": command, "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in plain.items()}}
    doc.update(extra)
    (out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))


def _csv_list(text, cast=str):
    return [cast(v) for v in str(text).split(",") if v != ""]


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .synth import Texture, load_scene_spec, make_scene_bundle, sphere_scene

    scene = load_scene_spec(args.spec) if args.spec else sphere_scene(texture=Texture(args.texture))
    out = make_scene_bundle(scene, args.out, n_views=args.views, modalities=_csv_list(args.modalities),
                            seed=args.seed)
    _write_run_manifest(Path(args.out), "synth", args)
    print(f"wrote {out / 'manifest.json'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .dataset import validate

    report = validate(args.manifest)
    for line in report:
        print(line)
    if report:
        print(f"{len(report)} problem(s)")
        return EXIT_USER
    print("ok")
    return EXIT_OK


def _budget_from_args(dataset, args):
    from .dataset import ViewBudget, unbalanced_budget

    budget = dataset.default_budget("all" if args.views == "all" else "train")
    for item in args.budget or []:
        name, n = item.split("=")
        budget = ViewBudget({**budget.views, name: unbalanced_budget(dataset, name, int(n), args.seed or 0)[name]})
    if args.modalities:
        budget = ViewBudget({m: budget[m] for m in _csv_list(args.modalities)})
    return budget


def cmd_train(args) -> int:
    from .dataset import demosaicked, load_scene
    from .plots import plot_training_log
    from .trainer import train

    config = resolve_config(args)
    dataset = load_scene(args.manifest)
    if config.supervision == "demosaicked":
        dataset = demosaicked(dataset)
    out = Path(args.out)
    _write_run_manifest(out, "train", args, train_config=config.to_dict())
    result = train(dataset, config, budget=_budget_from_args(dataset, args), out_dir=out,
                   progress=(lambda row: print(json.dumps(row), flush=True)) if args.verbose else None)
    plot_training_log(out / "metrics.csv", out / "training.png")
    print(f"wrote {result.checkpoint} ({result.seconds:.1f} s)")
    return EXIT_OK


def cmd_render(args) -> int:
    from .dataset import load_scene
    from .field import load_checkpoint
    from .renderer import RenderOptions, render_frame, save_render

    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_scene(args.manifest, load_masks=False)
    views = _csv_list(args.views, int) if args.views else list(dataset.split.test)
    mods = _csv_list(args.modalities) if args.modalities else [m.name for m in model.registry]
    out = Path(args.out)
    _write_run_manifest(out, "render", args)
    opts = RenderOptions(n_samples=args.samples, normals=True)
    for v in views:
        for name in mods:
            res = render_frame(model, dataset.camera(v, name), model.modality(name), mode=args.mode,
                               stride=args.stride, options=opts)
            for p in save_render(res, out / f"{name}_{v:03d}"):
                print(p)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import load_scene
    from .field import load_checkpoint
    from .metrics import evaluate, generate_masks, save_mask_png
    from .plots import plot_eval_report

    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_scene(args.manifest)
    views = {"test": dataset.split.test, "train": dataset.split.train, "all": dataset.view_ids}[args.split]
    out = Path(args.out)
    _write_run_manifest(out, "eval", args)
    masks = None
    if args.mask_model:
        mask_model, _ = load_checkpoint(args.mask_model)
        masks = generate_masks(mask_model, dataset, threshold=args.mask_threshold)
        for name, stack in masks.items():
            for v, m in zip(dataset.view_ids, stack):
                save_mask_png(m, out / "masks" / name / f"{v:03d}.png")
    mods = _csv_list(args.modalities) if args.modalities else None
    report = evaluate(model, dataset, views=views, modalities=mods, mode=args.mode, masks=masks)
    report.write(out / "report.csv")
    plot_eval_report(report, out / "report.png")
    (out / "report.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


# --------------------------------------------------------------------------
# experiment plans

PLANS = ("single-modality", "two-modality", "three-modality", "five-modality", "unbalanced",
         "mosaicked-vs-demosaicked", "few-shot")
UNBALANCED_VIEWS = (1, 3, 5, 10, 25, 45)
FEW_SHOT_MACROFRAMES = (5, 10)


@dataclass(frozen=True)
class Job:
    name: str
    train_modalities: tuple[str, ...]
    test_modalities: tuple[str, ...]
    group: str = ""
    half_views: bool = False
    half_rays: bool = False
    budget: tuple[tuple[str, int], ...] = ()   # modality -> number of train views
    macroframes: int = 0                        # few-shot: train views shared by all modalities
    supervision: str = "mosaicked"
    baseline: str = ""                          # job whose PSNR the delta column refers to


@dataclass
class ExperimentPlan:
    name: str
    modalities: tuple[str, ...]
    seeds: tuple[int, ...] = (0,)
    out_dir: Path = Path("experiment")
    reference: str = "rgb"

    def __post_init__(self):
        if self.name not in PLANS:
            raise UsageError(f"unknown plan {self.name!r}; choose from {', '.join(PLANS)}")

    def jobs(self) -> list[Job]:
        """Deterministic job list of the plan (one entry per design cell; seeds apply to each)."""
        ref = self.reference
        others = [m for m in self.modalities if m != ref]
        single = [Job(f"{m}", (m,), (m,), group="single") for m in self.modalities]
        if self.name == "single-modality":
            return single
        if self.name == "two-modality":
            jobs = list(single)
            for m in others:
                for hv, hr in ((False, False), (True, False), (False, True), (True, True)):
                    tag = f"{'half' if hv else 'all'}-views/{'half' if hr else 'all'}-rays"
                    for test in (ref, m):
                        jobs.append(Job(f"{ref}+{m} {tag}", (ref, m), (ref, m), group=tag, half_views=hv,
                                        half_rays=hr, baseline=test))
            return _dedupe(jobs)
        if self.name == "three-modality":
            jobs = list(single)
            for i, a in enumerate(others):
                for b in others[i + 1:]:
                    mods = (ref, a, b)
                    jobs += [Job(f"{'+'.join(mods)}", mods, mods, group="three", baseline=t) for t in mods]
            return _dedupe(jobs)
        if self.name == "five-modality":
            mods = tuple(self.modalities)
            return _dedupe(single + [Job("+".join(mods), mods, mods, group="all", baseline=t) for t in mods])
        if self.name == "unbalanced":
            jobs = []
            for m in others:
                for n in UNBALANCED_VIEWS:
                    jobs.append(Job(f"{m}-only n={n}", (m,), (m,), group=f"{m}-only", budget=((m, n),)))
                    jobs.append(Job(f"{ref}+{m} n={n}", (ref, m), (ref, m), group=f"{ref}+{m}", budget=((m, n),),
                                    baseline=f"{m}-only n={n}"))
            return jobs
        if self.name == "mosaicked-vs-demosaicked":
            mods = tuple(self.modalities)
            return [Job("mosaicked", mods, mods, group="mosaicked"),
                    Job("demosaicked", mods, mods, group="demosaicked", supervision="demosaicked",
                        baseline="mosaicked")]
        jobs = []
        for n in FEW_SHOT_MACROFRAMES:
            base = f"{ref} {n} macroframes"
            jobs.append(Job(base, (ref,), (ref,), group=f"{n}", macroframes=n))
            if others:
                jobs.append(Job(f"{ref}+{others[0]} {n} macroframes", (ref, others[0]), (ref,), group=f"{n}",
                                macroframes=n, baseline=base))
            jobs.append(Job(f"all {n} macroframes", tuple(self.modalities), (ref,), group=f"{n}",
                            macroframes=n, baseline=base))
        return jobs


def _dedupe(jobs: list[Job]) -> list[Job]:
    """Merge jobs that train the same model; the baseline becomes per test modality."""
    seen: dict[tuple, Job] = {}
    for j in jobs:
        key = (j.train_modalities, j.half_views, j.half_rays, j.budget, j.macroframes, j.supervision)
        if key not in seen:
            seen[key] = dataclasses.replace(j, baseline="" if j.baseline in j.test_modalities else j.baseline)
    return list(seen.values())


def job_budget(dataset, job: Job, seed: int):
    from .dataset import ViewBudget, unbalanced_budget

    train = dataset.split.train
    views = {m: train for m in job.train_modalities}
    if job.half_views:
        views = {m: tuple(v for k, v in enumerate(train) if k % len(job.train_modalities) == i)
                 for i, m in enumerate(job.train_modalities)}
    for name, n in job.budget:
        views[name] = unbalanced_budget(dataset, name, n, seed)[name]
    if job.macroframes:
        rng = np.random.default_rng(seed)
        chosen = tuple(sorted(int(v) for v in rng.choice(np.array(train), size=job.macroframes, replace=False)))
        views = {m: chosen for m in job.train_modalities}
    return ViewBudget(views)


def run_job(dataset, job: Job, seed: int, config, out: Path, masks=None) -> list[dict]:
    """Train and evaluate one job; returns one result row per test modality."""
    from .dataset import demosaicked
    from .metrics import evaluate
    from .trainer import train

    cfg = dataclasses.replace(config, seed=seed, half_rays=job.half_rays, supervision=job.supervision)
    data = demosaicked(dataset) if job.supervision == "demosaicked" else dataset
    result = train(data, cfg, budget=job_budget(dataset, job, seed), out_dir=out)
    report = evaluate(result.model, dataset, modalities=list(job.test_modalities), masks=masks,
                      n_samples=cfg.samples_per_ray)
    report.write(out / "eval.csv")
    return [{"job": job.name, "seed": seed, "test_modality": m, "psnr": report.aggregate(m)[0],
             "ssim": report.aggregate(m, "ssim")[0]} for m in job.test_modalities]


def aggregate_rows(plan: ExperimentPlan, jobs: list[Job], results: list[dict]) -> list[dict]:
    """Mean/std over seeds with the signed PSNR delta against each job's baseline."""
    rows = []
    for job in jobs:
        for m in job.test_modalities:
            vals = [r for r in results if r["job"] == job.name and r["test_modality"] == m]
            p = np.array([r["psnr"] for r in vals])
            rows.append({"plan": plan.name, "job": job.name, "group": job.group, "test_modality": m,
                         "train_modalities": "+".join(job.train_modalities), "seeds": len(vals),
                         "psnr_mean": float(p.mean()), "psnr_std": float(p.std()),
                         "ssim_mean": float(np.mean([r["ssim"] for r in vals])),
                         "n_views": dict(job.budget).get(m, "") if job.budget else "",
                         "baseline": job.baseline or (m if len(job.train_modalities) > 1 else "")})
    index = {(r["job"], r["test_modality"]): r for r in rows}
    for r in rows:
        base = index.get((r["baseline"], r["test_modality"])) if r["baseline"] else None
        r["delta"] = f"({r['psnr_mean'] - base['psnr_mean']:+.2f})" if base and r is not base else ""
    return rows


def format_rows(rows: list[dict]) -> str:
    width = max(len(r["job"]) for r in rows)
    lines = [f"{'job':<{width}}  {'test':<6} {'PSNR':>7} {'delta':>9} {'±std':>6} {'SSIM':>7}"]
    for r in rows:
        lines.append(f"{r['job']:<{width}}  {r['test_modality']:<6} {r['psnr_mean']:7.2f} {r['delta']:>9} "
                     f"{r['psnr_std']:6.2f} {r['ssim_mean']:7.4f}")
    return "\n".join(lines)


def run_plan(plan: ExperimentPlan, dataset, config, log=print) -> list[dict]:
    import csv

    from .metrics import generate_masks
    from .plots import plot_experiment, plot_unbalanced
    from .trainer import train

    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = plan.jobs()
    (out / "plan.json").write_text(json.dumps({"plan": plan.name, "seeds": list(plan.seeds),
                                               "jobs": [dataclasses.asdict(j) for j in jobs]}, indent=1))
    masks = None
    if not dataset.masks:
        log("no masks in the dataset: training a full-view model to generate them")
        mask_cfg = dataclasses.replace(config, seed=plan.seeds[0])
        mask_model = train(dataset, mask_cfg, budget=dataset.default_budget("all"), out_dir=out / "mask_model").model
        masks = generate_masks(mask_model, dataset)
    results = []
    for job in jobs:
        for seed in plan.seeds:
            job_dir = out / "jobs" / _slug(job.name) / f"seed{seed}"
            log(f"job {job.name} seed {seed}")
            results += run_job(dataset, job, seed, config, job_dir, masks)
    rows = aggregate_rows(plan, jobs, results)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / "report.txt").write_text(format_rows(rows) + "\n")
    plot_experiment(rows, out / "report.png", title=plan.name)
    if plan.name == "unbalanced":
        plot_unbalanced(rows, out / "unbalanced.png")
    return rows


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "+-=" else "_" for c in name)


def cmd_experiment(args) -> int:
    from .dataset import load_scene

    config = resolve_config(args)
    dataset = load_scene(args.manifest)
    mods = tuple(_csv_list(args.modalities)) if args.modalities else tuple(m.name for m in dataset.registry)
    plan = ExperimentPlan(args.plan, mods, tuple(_csv_list(args.seeds, int)), Path(args.out))
    _write_run_manifest(Path(args.out), "experiment", args, train_config=config.to_dict())
    rows = run_plan(plan, dataset, config)
    print(format_rows(rows))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmrf", description="multimodal SDF radiance fields from raw frames")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic scene bundle")
    s.add_argument("--spec", help="scene spec (JSON/YAML); default: untextured sphere")
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=50)
    s.add_argument("--modalities", default="rgb,mono,nir,pol,ms")
    s.add_argument("--texture", type=float, default=0.0, help="albedo texture amplitude of the default sphere")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("validate", help="check a scene manifest")
    v.add_argument("manifest")
    v.set_defaults(func=cmd_validate)

    t = sub.add_parser("train", help="train a scene model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--modalities", help="train only these modalities")
    t.add_argument("--budget", action="append", help="MODALITY=N views (repeatable)")
    t.add_argument("--views", choices=("train", "all"), default="train",
                   help="'all' trains on train+test views (mask-generation model)")
    t.add_argument("--verbose", action="store_true")
    _config_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views of a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--views")
    r.add_argument("--modalities")
    r.add_argument("--mode", choices=("mosaicked", "full-channel"), default="full-channel")
    r.add_argument("--stride", type=int, default=1)
    r.add_argument("--samples", type=int, default=64)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="masked PSNR/SSIM report of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--modalities")
    e.add_argument("--mode", choices=("mosaicked", "full-channel"), default="mosaicked")
    e.add_argument("--mask-model", help="full-view checkpoint used to generate masks (default: dataset masks)")
    e.add_argument("--mask-threshold", type=float, default=1e-3)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run a canned experiment plan")
    x.add_argument("--plan", required=True, choices=PLANS)
    x.add_argument("--manifest", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--seeds", default="0,1,2")
    x.add_argument("--modalities")
    x.add_argument("--config")
    _config_flags(x)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (MMRFError, ValueError, KeyError, FileNotFoundError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(f"error code={code} message={str(exc).splitlines()[0] if str(exc) else type(exc).__name__}",
              file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - the contract is a single line and exit 2
        print(f"error code=internal message={type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
              file=sys.stderr)
        if "--debug-trace" in (argv or sys.argv):
            traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
