"""Image metrics, mask generation, demosaicking baseline and evaluation reports.

Evaluation is always masked ("metrics never consider the background");
:func:`psnr_unmasked` is the separately named escape hatch.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._fpu import flush_denormals
from .errors import EmptyMask, ShapeMismatch
from .modality import MosaickPattern, dolp_aolp

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DEFAULT_MASK_THRESHOLD = 1e-3


def _check(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:mask.ndim]:
        raise ShapeMismatch(f"mask {mask.shape} does not cover image {pred.shape}")
    if not mask.any():
        raise EmptyMask("mask selects no pixels")
    return pred, target, mask


def psnr(pred, target, mask) -> float:
    """``10 log10(1 / MSE)`` over masked pixels (all channels); ``inf`` when exact."""
    pred, target, mask = _check(pred, target, mask)
    diff = (pred - target)[mask]
    mse = float(np.mean(diff * diff))
    return math.inf if mse == 0.0 else -10.0 * math.log10(mse)


def psnr_unmasked(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    return psnr(pred, target, np.ones(pred.shape[:2], dtype=bool))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(pred, target, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM of single-channel images.

    Windows are truncated at the image border and their weights renormalized
    over the pixels that exist, so every pixel (even in tiny images) has a value.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.ndim != 2 or x.shape != y.shape:
        raise ShapeMismatch("ssim needs two single-channel images of equal shape")
    w = gaussian_window()

    def avg(img):
        return ndimage.correlate(img, w, mode="constant", cval=0.0)

    norm = avg(np.ones_like(x))
    mx, my = avg(x) / norm, avg(y) / norm
    vx = avg(x * x) / norm - mx * mx
    vy = avg(y * y) / norm - my * my
    cxy = avg(x * y) / norm - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(pred, target, mask) -> float:
    pred, target, mask = _check(pred, target, mask)
    return float(np.mean(ssim_map(pred, target)[mask]))


# --------------------------------------------------------------------------
# demosaicking baseline


def _tent(period: int) -> np.ndarray:
    ax = np.arange(-period + 1, period)
    return 1.0 - np.abs(ax) / period


def demosaick_bilinear(raw, pattern: MosaickPattern | None) -> np.ndarray:
    """Full-channel ``(H, W, C)`` frame from a mosaicked ``(H, W)`` frame.

    Each channel keeps its own cells; other pixels get the tent-weighted
    (bilinear) average of the nearest cells of that channel. Borders use
    clamped extension.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if pattern is None:
        return raw[..., None].copy()
    h, w = raw.shape
    if h < pattern.tile_rows or w < pattern.tile_cols:
        raise ShapeMismatch("frame smaller than one mosaick tile")
    cmap = pattern.channel_map(h, w)
    kernel = np.outer(_tent(pattern.tile_rows), _tent(pattern.tile_cols))
    n_channels = int(pattern.array.max()) + 1
    out = np.empty((h, w, n_channels))
    for c in range(n_channels):
        sel = (cmap == c).astype(np.float64)
        num = ndimage.correlate(raw * sel, kernel, mode="nearest")
        den = ndimage.correlate(sel, kernel, mode="nearest")
        plane = num / den
        plane[cmap == c] = raw[cmap == c]
        out[..., c] = plane
    return out


def polarization_error_maps(pred_stokes, gt_stokes) -> tuple[np.ndarray, np.ndarray]:
    """Absolute DoLP error and axial AoLP error (degrees)."""
    dp, ap = dolp_aolp(pred_stokes)
    dg, ag = dolp_aolp(gt_stokes)
    d = np.abs(ap - ag) % 180.0
    return np.abs(dp - dg), np.minimum(d, 180.0 - d)


# --------------------------------------------------------------------------
# masks


@flush_denormals()
def generate_masks(model, dataset, threshold: float = DEFAULT_MASK_THRESHOLD, views=None,
                   modalities=None, n_samples: int = 64) -> dict[str, np.ndarray]:
    """Foreground iff the rendered foreground weight exceeds ``threshold``.

    ``model`` should have been trained on every view of the scene (train and
    test alike). Returns modality -> ``(V, H, W)`` bool.
    """
    from .renderer import RenderOptions, render_frame

    views = dataset.view_ids if views is None else views
    modalities = [m.name for m in dataset.registry] if modalities is None else modalities
    opts = RenderOptions(n_samples=n_samples, normals=False)
    out = {}
    for name in modalities:
        m = dataset.modality(name)
        out[name] = np.stack([render_frame(model, dataset.camera(v, name), m, options=opts)["w_fg"] > threshold
                              for v in views])
    return out


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def save_mask_png(mask, path) -> None:
    import cv2

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), np.asarray(mask, dtype=np.uint8) * 255)


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalRow:
    scene: str
    modality: str
    view: int
    psnr: float
    ssim: float
    mode: str


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    meta: dict = field(default_factory=lambda: {
        "ssim_window": SSIM_WINDOW, "ssim_sigma": SSIM_SIGMA, "ssim_k1": SSIM_K1, "ssim_k2": SSIM_K2,
        "ssim_applicability": "single-channel raw or per-channel demosaicked"})

    def add(self, *args) -> None:
        self.rows.append(EvalRow(*args))

    def modalities(self) -> list[str]:
        return sorted({r.modality for r in self.rows})

    def aggregate(self, modality: str, metric: str = "psnr") -> tuple[float, float]:
        vals = np.array([getattr(r, metric) for r in self.rows if r.modality == modality], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if len(vals) == 0:
            return math.nan, math.nan
        return float(vals.mean()), float(vals.std())

    def mean_psnr(self, modality: str) -> float:
        return self.aggregate(modality)[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scene", "modality", "view", "psnr", "ssim", "mode"])
        for r in self.rows:
            w.writerow([r.scene, r.modality, r.view, repr(r.psnr), repr(r.ssim), r.mode])
        return buf.getvalue()

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        path.with_suffix(".json").write_text(json.dumps(self.meta, indent=1, sort_keys=True))

    @classmethod
    def read(cls, path) -> "EvalReport":
        rep = cls()
        with open(path) as f:
            for row in csv.DictReader(f):
                rep.add(row["scene"], row["modality"], int(row["view"]), float(row["psnr"]), float(row["ssim"]),
                        row["mode"])
        return rep

    def table(self) -> str:
        lines = [f"{'modality':<10} {'PSNR':>14} {'SSIM':>14} {'views':>6}"]
        for m in self.modalities():
            p, ps = self.aggregate(m, "psnr")
            s, ss = self.aggregate(m, "ssim")
            n = sum(r.modality == m for r in self.rows)
            lines.append(f"{m:<10} {p:8.2f}±{ps:5.2f} {s:8.4f}±{ss:5.3f} {n:6d}")
        return "\n".join(lines)


@flush_denormals()
def evaluate(model, dataset, views=None, modalities=None, mode: str = "mosaicked", masks=None,
             n_samples: int = 64) -> EvalReport:
    """Masked PSNR/SSIM of rendered views against the dataset's frames.

    ``mosaicked`` compares the single pattern channel per pixel against the raw
    frame; ``full-channel`` compares every channel against the bilinearly
    demosaicked frame. ``masks`` defaults to the dataset's masks.
    """
    from .renderer import RenderOptions, render_frame

    views = dataset.split.test if views is None else views
    modalities = [m.name for m in dataset.registry] if modalities is None else modalities
    opts = RenderOptions(n_samples=n_samples, normals=False)
    report = EvalReport()
    for name in modalities:
        m = dataset.modality(name)
        for v in views:
            mask = masks[name][dataset.view_ids.index(v)] if masks is not None else dataset.mask(name, v)
            if mask is None:
                raise EmptyMask(f"no mask for {name} view {v}; evaluation needs masks")
            pred = render_frame(model, dataset.camera(v, name), m, mode=mode, options=opts)["image"]
            target = dataset.frame(name, v)
            if mode == "mosaicked":
                s = ssim(pred, target, mask)
            else:
                target = demosaick_bilinear(target, m.pattern)
                s = float(np.mean([ssim(pred[..., c], target[..., c], mask) for c in range(pred.shape[-1])]))
            report.add(dataset.name, name, int(v), psnr(pred, target, mask), s, mode)
    return report
