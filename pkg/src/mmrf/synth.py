"""Analytic multimodal scenes: exact geometry, spectra and polarization.

The generator renders ground-truth raw frames by sphere tracing through the
same camera models the engine uses, and exposes the scene as an analytic
scene field so the volume renderer can be checked against the tracer.

Spectral model: a material is defined by its RGB albedo plus an NIR albedo
(derived from RGB by a fixed curve unless given). Any channel with a centre
wavelength reads the piecewise-linear spectrum through the anchors
460 nm (B), 540 nm (G), 600 nm (R) and 850 nm (NIR), clamped outside. Channels
without a wavelength (monochrome, polarization S0) read luminance. All bands
therefore share the spatial structure of the scene.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .geometry import (CameraModel, DistortionCoefficients, Intrinsics, Pose, camera_rays, compose_star_pose,
                       frame_pixels, look_at, rotation_about_axis)
from .modality import (ModalitySpec, assign_output_slices, channel_at, default_modality, quantize,
                       reference_frame, stokes_to_intensity, camera_roll_about_rays)

ANCHOR_NM = np.array([460.0, 540.0, 600.0, 850.0])
LUMA = np.array([0.2126, 0.7152, 0.0722])
DEFAULT_TEST_VIEWS = (9, 19, 29, 39, 49)


def default_nir(albedo_rgb) -> float:
    """NIR albedo implied by an RGB albedo (smooth, red-weighted)."""
    r, g, b = albedo_rgb
    return float(np.clip(0.15 + 0.6 * r + 0.25 * g, 0.0, 1.0))


@dataclass(frozen=True)
class Texture:
    """Multiplicative albedo modulation ``1 - a (½ + ½ sin fx sin fy sin fz)``."""

    amplitude: float = 0.0
    frequency: float = 6.0

    def factor(self, points: np.ndarray) -> np.ndarray:
        if self.amplitude == 0.0:
            return np.ones(points.shape[:-1])
        f = self.frequency
        wave = np.sin(f * points[..., 0]) * np.sin(f * points[..., 1]) * np.sin(f * points[..., 2])
        return 1.0 - self.amplitude * (0.5 + 0.5 * wave)


@dataclass(frozen=True)
class Material:
    albedo_rgb: tuple[float, float, float]
    nir: float | None = None
    dolp: float = 0.0
    aolp_mode: str = "fixed"   # "fixed" | "normal-azimuth"
    aolp_deg: float = 0.0
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        rgb = tuple(float(v) for v in self.albedo_rgb)
        if len(rgb) != 3 or not all(0.0 <= v <= 1.0 for v in rgb):
            raise ValueError("albedo_rgb needs three values in [0, 1]")
        object.__setattr__(self, "albedo_rgb", rgb)
        if self.nir is not None and not 0.0 <= self.nir <= 1.0:
            raise ValueError("nir albedo must lie in [0, 1]")
        if not 0.0 <= self.dolp <= 1.0:
            raise ValueError("DoLP must lie in [0, 1]")
        if self.aolp_mode not in ("fixed", "normal-azimuth"):
            raise ValueError(f"unknown AoLP mode {self.aolp_mode!r}")

    @property
    def anchors(self) -> np.ndarray:
        r, g, b = self.albedo_rgb
        n = default_nir(self.albedo_rgb) if self.nir is None else self.nir
        return np.array([b, g, r, n])

    def band(self, wavelength_nm: float | None) -> float:
        if wavelength_nm is None:
            return float(LUMA @ np.array(self.albedo_rgb))
        return float(np.interp(wavelength_nm, ANCHOR_NM, self.anchors))

    @classmethod
    def from_dict(cls, d: dict) -> "Material":
        d = dict(d)
        if "texture" in d:
            d["texture"] = Texture(**d["texture"])
        return cls(**d)


@dataclass(frozen=True)
class Primitive:
    kind: str                      # sphere | box | torus
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: tuple[float, ...] = (0.5,)  # sphere (r,), box half-extents (x, y, z), torus (R, r)
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    material: int = 0

    def __post_init__(self):
        want = {"sphere": 1, "box": 3, "torus": 2}
        if self.kind not in want:
            raise ValueError(f"unknown primitive {self.kind!r}")
        if len(self.size) != want[self.kind] or min(self.size) <= 0:
            raise ValueError(f"{self.kind} needs {want[self.kind]} positive size values")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "rotation", tuple(tuple(float(v) for v in r) for r in self.rotation))

    @property
    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            extent = self.size[0]
        elif self.kind == "box":
            extent = math.sqrt(sum(v * v for v in self.size))
        else:
            extent = self.size[0] + self.size[1]
        return float(np.linalg.norm(self.center)) + extent

    def sdf(self, points: np.ndarray) -> np.ndarray:
        local = (points - np.array(self.center)) @ np.array(self.rotation)
        if self.kind == "sphere":
            return np.linalg.norm(local, axis=-1) - self.size[0]
        if self.kind == "box":
            q = np.abs(local) - np.array(self.size)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(q.max(axis=-1), 0.0)
        ring = np.linalg.norm(local[..., :2], axis=-1) - self.size[0]
        return np.hypot(ring, local[..., 2]) - self.size[1]

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        d = dict(d)
        kind = d.pop("type", d.pop("kind", None))
        if "radius" in d:
            d["size"] = (d.pop("radius"),)
        if "half_extents" in d:
            d["size"] = tuple(d.pop("half_extents"))
        if "radii" in d:
            d["size"] = tuple(d.pop("radii"))
        return cls(kind=kind, **d)


@dataclass(frozen=True)
class RigSpec:
    """Acquisition geometry: two rings of reference-camera poses plus star offsets."""

    width: int = 64
    height: int = 64
    focal: float = 150.0
    distance: float = 3.0
    elevations_deg: tuple[float, float] = (15.0, -15.0)
    distortion: tuple[float, float, float, float] = (-0.05, 0.01, 0.0005, -0.0005)
    offset: float = 0.1


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple[Primitive, ...]
    materials: tuple[Material, ...]
    background: Material = field(default_factory=lambda: Material((0.1, 0.1, 0.1)))
    lighting: str = "ambient"                 # "ambient" | "lambert"
    light_direction: tuple[float, float, float] = (0.3, -0.4, 0.866)
    rig: RigSpec = field(default_factory=RigSpec)
    name: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "materials", tuple(self.materials))
        for p in self.primitives:
            if p.material >= len(self.materials):
                raise ValueError(f"primitive references missing material {p.material}")
            if p.bounding_radius >= 1.0:
                raise ValueError("primitives must lie inside the unit sphere")
        if self.lighting not in ("ambient", "lambert"):
            raise ValueError(f"unknown lighting {self.lighting!r}")

    @property
    def bounding_radius(self) -> float:
        return max(p.bounding_radius for p in self.primitives)


def sphere_scene(radius: float = 0.5, albedo_rgb=(0.8, 0.45, 0.25), dolp: float = 0.3,
                 texture: Texture | None = None, **kwargs) -> AnalyticScene:
    """Single sphere at the origin; the acceptance workhorse."""
    mat = Material(albedo_rgb, dolp=dolp, aolp_mode="normal-azimuth", texture=texture or Texture())
    return AnalyticScene((Primitive("sphere", size=(radius,)),), (mat,), **kwargs)


def load_scene_spec(path) -> AnalyticScene:
    """Read a scene spec (JSON or YAML) with primitives, materials, background, rig."""
    text = Path(path).read_text()
    d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return scene_from_dict(d)


def scene_from_dict(d: dict) -> AnalyticScene:
    rig = RigSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.get("rig", {}).items()})
    kwargs = {}
    if "background" in d:
        kwargs["background"] = Material.from_dict(d["background"])
    for key in ("lighting", "name"):
        if key in d:
            kwargs[key] = d[key]
    if "light_direction" in d:
        kwargs["light_direction"] = tuple(d["light_direction"])
    return AnalyticScene(
        primitives=tuple(Primitive.from_dict(p) for p in d["primitives"]),
        materials=tuple(Material.from_dict(m) for m in d["materials"]),
        rig=rig,
        **kwargs,
    )


# --------------------------------------------------------------------------
# geometry queries


def analytic_sdf(scene: AnalyticScene, position) -> np.ndarray | float:
    """Min-union SDF of the scene's primitives."""
    p = np.asarray(position, dtype=np.float64)
    d = np.min(np.stack([prim.sdf(p) for prim in scene.primitives]), axis=0)
    return float(d) if d.ndim == 0 else d


def nearest_material(scene: AnalyticScene, points: np.ndarray) -> np.ndarray:
    return np.argmin(np.stack([prim.sdf(points) for prim in scene.primitives]), axis=0)


def analytic_normal(scene: AnalyticScene, points: np.ndarray, step: float = 1e-6) -> np.ndarray:
    grads = []
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = step
        grads.append((analytic_sdf(scene, points + e) - analytic_sdf(scene, points - e)) / (2 * step))
    g = np.stack(grads, axis=-1)
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def sphere_trace(scene: AnalyticScene, origins, dirs, near, far, tol: float = 1e-8, max_steps: int = 512):
    """First hit along each ray within ``[near, far]``: ``(t, hit)``."""
    t = np.array(near, dtype=np.float64, copy=True)
    far = np.asarray(far, dtype=np.float64)
    active = t < far
    hit = np.zeros(t.shape, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        d = analytic_sdf(scene, origins[idx] + t[idx, None] * dirs[idx])
        d = np.atleast_1d(d)
        done = d < tol
        hit[idx[done]] = True
        t[idx[~done]] += d[~done]
        active[idx[done]] = False
        active[idx[~done]] &= t[idx[~done]] < far[idx[~done]]
    return t, hit


# --------------------------------------------------------------------------
# appearance


def _shading(scene: AnalyticScene, normals: np.ndarray) -> np.ndarray:
    if scene.lighting == "ambient":
        return np.ones(normals.shape[:-1])
    light = np.asarray(scene.light_direction, dtype=np.float64)
    light = light / np.linalg.norm(light)
    return 0.25 + 0.75 * np.maximum(normals @ light, 0.0)


def surface_values(scene: AnalyticScene, modality: ModalitySpec, points, normals, dirs) -> np.ndarray:
    """Ideal per-channel values of surface points.

    Radiance modalities: ``(N, n_channels)`` albedo x texture x shading.
    Polarization: the Stokes vector ``(N, 3)`` in each ray's reference frame.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    mats = nearest_material(scene, points)
    shade = _shading(scene, normals)
    out = np.zeros((len(points), 3 if modality.is_polarization else modality.n_channels))
    for mid, mat in enumerate(scene.materials):
        sel = mats == mid
        if not sel.any():
            continue
        scale = mat.texture.factor(points[sel]) * shade[sel]
        if modality.is_polarization:
            s0 = mat.band(None) * scale
            if mat.aolp_mode == "fixed":
                aolp = np.full(s0.shape, math.radians(mat.aolp_deg))
            else:
                e1, e2 = reference_frame(dirs[sel])
                n = normals[sel]
                aolp = np.arctan2(np.sum(n * e2, -1), np.sum(n * e1, -1))
            out[sel] = np.stack([s0, s0 * mat.dolp * np.cos(2 * aolp), s0 * mat.dolp * np.sin(2 * aolp)], -1)
        else:
            bands = np.array([mat.band(c.wavelength_nm) for c in modality.channels])
            out[sel] = scale[:, None] * bands[None, :]
    return out


def background_values(scene: AnalyticScene, modality: ModalitySpec) -> np.ndarray:
    """Constant background: per-channel values, or an unpolarized Stokes vector."""
    bg = scene.background
    if modality.is_polarization:
        return np.array([bg.band(None), 0.0, 0.0])
    return np.array([bg.band(c.wavelength_nm) for c in modality.channels])


# --------------------------------------------------------------------------
# ground-truth frames


@dataclass
class TraceResult:
    values: np.ndarray   # (H, W, C) ideal per-channel values (Stokes for polarization)
    hit: np.ndarray      # (H, W) bool
    depth: np.ndarray    # (H, W) distance along the unit ray, 0 on misses
    normal: np.ndarray   # (H, W, 3)
    dirs: np.ndarray     # (H*W, 3)


def trace_scene(scene: AnalyticScene, camera: CameraModel, modality: ModalitySpec) -> TraceResult:
    k = camera.intrinsics
    pix = frame_pixels(k.width, k.height)
    o, d, near, far, in_roi = camera_rays(camera, pix)
    t, hit = sphere_trace(scene, o, d, np.where(in_roi, near, far), far)
    hit &= in_roi
    pts = o + t[:, None] * d
    normals = np.zeros_like(pts)
    normals[hit] = analytic_normal(scene, pts[hit])
    bg = background_values(scene, modality)
    values = np.broadcast_to(bg, (len(pix), bg.shape[0])).copy()
    if hit.any():
        values[hit] = surface_values(scene, modality, pts[hit], normals[hit], d[hit])
    if modality.is_polarization:
        values = _stokes_to_channels(values, modality, camera, d)
    h, w = k.height, k.width
    return TraceResult(values.reshape(h, w, -1), hit.reshape(h, w), np.where(hit, t, 0.0).reshape(h, w),
                       normals.reshape(h, w, 3), d)


def _stokes_to_channels(stokes: np.ndarray, modality: ModalitySpec, camera: CameraModel, dirs) -> np.ndarray:
    roll = camera_roll_about_rays(camera.pose.rotation, dirs)
    return np.stack([stokes_to_intensity(stokes, a, roll) for a in modality.filter_angles], axis=-1)


def trace_ground_truth(scene: AnalyticScene, camera: CameraModel, modality: ModalitySpec,
                       mosaicked: bool = True) -> np.ndarray:
    """Quantized raw frame (uint16, right-aligned) of the analytic scene.

    Mosaicked frames hold one pattern channel per pixel; otherwise all
    channels are returned ``(H, W, C)``.
    """
    res = trace_scene(scene, camera, modality)
    values = res.values
    if mosaicked and modality.pattern is not None:
        h, w = values.shape[:2]
        ch = modality.pattern.channel_map(h, w)
        values = np.take_along_axis(values, ch[..., None], axis=-1)[..., 0]
    return quantize(np.clip(values, 0.0, 1.0), modality.bit_depth)


def silhouette(scene: AnalyticScene, camera: CameraModel) -> np.ndarray:
    k = camera.intrinsics
    o, d, near, far, in_roi = camera_rays(camera, frame_pixels(k.width, k.height))
    _, hit = sphere_trace(scene, o, d, np.where(in_roi, near, far), far)
    return (hit & in_roi).reshape(k.height, k.width)


# --------------------------------------------------------------------------
# analytic scene field (renderer oracle)


class AnalyticField:
    """The analytic scene behind the renderer's scene-field protocol.

    Radiance at a point is the ideal surface value of the nearest primitive's
    material. Polarization slices hold the bounded Stokes encoding.
    """

    dtype = torch.float64
    needs_normals = False
    normal_step = 1e-6

    def __init__(self, scene: AnalyticScene, registry, sharpness: float = 1e4):
        self.scene = scene
        self.registry = list(registry)
        self.n_outputs = max(m.output_slice[1] for m in self.registry)
        self._s = sharpness

    def sharpness(self) -> torch.Tensor:
        return torch.tensor(self._s, dtype=torch.float64)

    def query_sdf(self, points):
        p = points.detach().numpy()
        return torch.from_numpy(np.atleast_1d(analytic_sdf(self.scene, p))), torch.zeros(len(p), 1, dtype=torch.float64)

    def _fill(self, per_modality) -> torch.Tensor:
        from .renderer import unit_from_stokes

        cols = []
        for m in self.registry:
            v = per_modality(m)
            cols.append(unit_from_stokes(v) if m.is_polarization else v)
        return torch.from_numpy(np.concatenate(cols, axis=-1))

    def query_radiance(self, points, dirs, normals, geo):
        p = points.detach().numpy()
        d = dirs.detach().numpy()
        n = analytic_normal(self.scene, p)
        return self._fill(lambda m: surface_values(self.scene, m, p, n, d))

    def background_color(self, origins, dirs):
        r = origins.shape[0]
        return self._fill(lambda m: np.broadcast_to(background_values(self.scene, m), (r, m.output_width)))


# --------------------------------------------------------------------------
# bundle generation


def rig_extrinsics(modalities, offset: float) -> dict[str, Pose]:
    """Star-topology extrinsics (secondary camera -> reference camera); first is the reference."""
    shifts = [(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, 1.0), (-1.0, -1.0)]
    out = {}
    for i, m in enumerate(modalities):
        sx, sy = shifts[i % len(shifts)]
        # Toe-in so every sensor still centres the object at the rig distance.
        rot = rotation_about_axis((0.0, 1.0, 0.0), -math.atan2(sx * offset, 3.0)) @ \
            rotation_about_axis((1.0, 0.0, 0.0), math.atan2(sy * offset, 3.0))
        out[m.name] = Pose(rot, np.array([sx * offset, sy * offset, 0.0]))
    return out


def ring_poses(n_views: int, rig: RigSpec, seed: int = 0) -> list[Pose]:
    """Two 360° rings at different heights; views ``0..n/2-1`` on the first."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2 * math.pi)
    first = n_views - n_views // 2
    poses = []
    for i in range(n_views):
        ring, j = (0, i) if i < first else (1, i - first)
        count = first if ring == 0 else n_views // 2
        az = phase + 2 * math.pi * j / count + (math.pi / count if ring else 0.0)
        el = math.radians(rig.elevations_deg[ring])
        eye = rig.distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        poses.append(look_at(eye))
    return poses


def rig_cameras(rig: RigSpec, modality: ModalitySpec, pose: Pose) -> CameraModel:
    k = Intrinsics(rig.focal, rig.focal, rig.width / 2.0, rig.height / 2.0, rig.width, rig.height)
    return CameraModel(k, DistortionCoefficients(*rig.distortion), pose)


def make_scene_bundle(scene: AnalyticScene, out_dir, n_views: int = 50, modalities=("rgb",), seed: int = 0,
                      write_masks: bool = True, test_views=DEFAULT_TEST_VIEWS) -> Path:
    """Write ``manifest.json`` plus raw frames (and analytic masks) in the dataset layout."""
    import cv2

    if n_views < 2:
        raise ValueError("need at least two views")
    out = Path(out_dir)
    specs = assign_output_slices([default_modality(m) if isinstance(m, str) else m for m in modalities])
    extrinsics = rig_extrinsics(specs, scene.rig.offset)
    ref_poses = ring_poses(n_views, scene.rig, seed)
    cameras = []
    for m in specs:
        cam = rig_cameras(scene.rig, m, Pose.identity())
        cameras.append({
            "modality": m.to_dict(),
            "intrinsics": cam.intrinsics.to_dict(),
            "distortion": cam.distortion.to_dict(),
            "extrinsic": extrinsics[m.name].to_dict(),
            "reference": m is specs[0],
        })
    views = []
    for v, ref in enumerate(ref_poses):
        entry = {"index": v, "pose": ref.to_dict(), "frames": {}, "masks": {}}
        for m in specs:
            cam = rig_cameras(scene.rig, m, compose_star_pose(ref, extrinsics[m.name]))
            raw = trace_ground_truth(scene, cam, m)
            rel = f"frames/{m.name}/{v:03d}.png"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            cv2.imwrite(str(out / rel), raw)
            entry["frames"][m.name] = rel
            if write_masks:
                mrel = f"masks/{m.name}/{v:03d}.png"
                (out / mrel).parent.mkdir(parents=True, exist_ok=True)
                cv2.imwrite(str(out / mrel), silhouette(scene, cam).astype(np.uint8) * 255)
                entry["masks"][m.name] = mrel
        views.append(entry)
    manifest = {
        "scene": scene.name,
        "format_version": 1,
        "cameras": cameras,
        "views": views,
        "normalization": {"center": [0.0, 0.0, 0.0], "radius": 0.9, "roi_fill": 0.9},
        "split": {"test": [t for t in test_views if t < n_views]},
        "synth": {"seed": seed, "n_views": n_views},
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out
