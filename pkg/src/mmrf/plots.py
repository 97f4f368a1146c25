"""Report figures (written to files; the Agg backend never opens a window)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["figure.dpi"] = 120
plt.rcParams["savefig.bbox"] = "tight"
plt.rcParams["axes.spines.top"] = False
plt.rcParams["axes.spines.right"] = False


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_eval_report(report, path) -> Path:
    """Mean ± std PSNR per modality."""
    mods = report.modalities()
    means = [report.aggregate(m)[0] for m in mods]
    stds = [report.aggregate(m)[1] for m in mods]
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(mods), 3.0))
    ax.bar(mods, means, yerr=stds, color="0.55", capsize=3)
    ax.set_ylabel("masked PSNR (dB)")
    return _save(fig, path)


def plot_training_log(log_csv, path) -> Path:
    with open(log_csv) as f:
        rows = list(csv.DictReader(f))
    it = np.array([int(r["iter"]) for r in rows])
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    for key in rows[0]:
        if key.startswith("loss_") and key != "loss_total":
            a.semilogy(it, [float(r[key]) for r in rows], label=key[5:])
        if key.startswith("eval_psnr_"):
            pts = [(int(r["iter"]), float(r[key])) for r in rows if r[key]]
            if pts:
                b.plot(*zip(*pts), marker="o", label=key[10:])
    a.set_xlabel("iteration")
    a.set_ylabel("loss")
    a.legend(frameon=False)
    b.set_xlabel("iteration")
    b.set_ylabel("eval PSNR (dB)")
    if b.lines:
        b.legend(frameon=False)
    return _save(fig, path)


def plot_experiment(rows: list[dict], path, title: str = "") -> Path:
    """Grouped bars: one group per test modality, one bar per job."""
    mods = sorted({r["test_modality"] for r in rows})
    jobs = list(dict.fromkeys(r["job"] for r in rows))
    width = 0.8 / max(len(jobs), 1)
    fig, ax = plt.subplots(figsize=(2 + 1.2 * len(mods) * max(1, len(jobs) / 3), 3.2))
    for j, job in enumerate(jobs):
        xs, ys, es = [], [], []
        for i, m in enumerate(mods):
            for r in rows:
                if r["job"] == job and r["test_modality"] == m:
                    xs.append(i + j * width)
                    ys.append(r["psnr_mean"])
                    es.append(r["psnr_std"])
        ax.bar(xs, ys, width, yerr=es, capsize=2, label=job)
    ax.set_xticks(np.arange(len(mods)) + 0.4 - width / 2)
    ax.set_xticklabels(mods)
    ax.set_ylabel("masked PSNR (dB)")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=7, ncol=2)
    return _save(fig, path)


def plot_unbalanced(rows: list[dict], path) -> Path:
    """PSNR of the budgeted modality against its number of training views."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    series: dict[str, list] = {}
    for r in rows:
        if r.get("n_views") in (None, ""):
            continue
        series.setdefault(f"{r['group']} ({r['test_modality']})", []).append((int(r["n_views"]), r["psnr_mean"]))
    for label, pts in sorted(series.items()):
        pts.sort()
        ax.plot(*zip(*pts), marker="o", label=label)
    ax.set_xscale("log")
    ax.set_xlabel("views of the budgeted modality")
    ax.set_ylabel("masked PSNR (dB)")
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)


def plot_render_comparison(pred, target, path, title: str = "") -> Path:
    """Rendering / ground truth / absolute error strip for one channel."""
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.6))
    for ax, img, name in zip(axes, (pred, target, np.abs(pred - target)), ("rendering", "ground truth", "error")):
        ax.imshow(img, cmap="gray" if name != "error" else "magma", vmin=0, vmax=1 if name != "error" else None)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    return _save(fig, path)
