"""On-disk scene format: manifest, raw mosaicked frames, masks and splits.

Layout (all paths relative to the manifest)::

    scene/manifest.json
    scene/frames/<modality>/<view:03>.png   16-bit, raw values right-aligned
    scene/masks/<modality>/<view:03>.png    8-bit, optional

The manifest lists one camera per modality (intrinsics, distortion, the
stereo extrinsic mapping that camera into the reference camera, and the
modality spec), one entry per view with the reference camera's world pose,
the declared object bounding sphere used for normalization, and the test
split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BitDepthMismatch, BudgetTooLarge, InvalidSpec, MissingFrame, PoseCompositionError
from .geometry import CameraModel, DistortionCoefficients, Intrinsics, Pose, _check_rotation, compose_star_pose
from .modality import ModalitySpec, assign_output_slices, normalize_raw, partition_violations

DEFAULT_TEST_VIEWS = (9, 19, 29, 39, 49)


@dataclass(frozen=True)
class Split:
    test: tuple[int, ...]
    train: tuple[int, ...]

    @classmethod
    def from_views(cls, views, test) -> "Split":
        views = sorted(views)
        test = tuple(sorted(v for v in test))
        if not set(test) <= set(views):
            raise InvalidSpec(f"test views {sorted(set(test) - set(views))} are not in the scene")
        return cls(test, tuple(v for v in views if v not in test))


@dataclass
class ViewBudget:
    """Usable training views per modality."""

    views: dict[str, tuple[int, ...]]

    def __getitem__(self, modality: str) -> tuple[int, ...]:
        return self.views[modality]


@dataclass
class SceneDataset:
    name: str
    root: Path
    registry: list[ModalitySpec]
    cameras: dict[tuple[int, str], CameraModel]     # (view, modality) -> world camera
    raw: dict[str, np.ndarray]                      # modality -> (V, H, W) uint16
    masks: dict[str, np.ndarray] = field(default_factory=dict)  # modality -> (V, H, W) bool
    split: Split = None
    view_ids: tuple[int, ...] = ()
    scale: float = 1.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    full_channel: dict[str, np.ndarray] = field(default_factory=dict)  # optional demosaicked frames

    def modality(self, name: str) -> ModalitySpec:
        for m in self.registry:
            if m.name == name:
                return m
        raise KeyError(name)

    def frame(self, modality: str, view: int) -> np.ndarray:
        """Normalized raw frame in [0, 1]."""
        m = self.modality(modality)
        return normalize_raw(self.raw[modality][self.view_ids.index(view)], m.bit_depth)

    def mask(self, modality: str, view: int) -> np.ndarray | None:
        if modality not in self.masks:
            return None
        return self.masks[modality][self.view_ids.index(view)]

    def camera(self, view: int, modality: str) -> CameraModel:
        return self.cameras[(view, modality)]

    def default_budget(self, views: str = "train") -> ViewBudget:
        ids = self.split.train if views == "train" else tuple(self.view_ids)
        return ViewBudget({m.name: ids for m in self.registry})


# --------------------------------------------------------------------------
# validation


def _read_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise MissingFrame(f"manifest not found: {path}")
    return json.loads(path.read_text()), path.parent


def validate(manifest) -> list[str]:
    """List every problem found in a manifest (dict or path); empty when well formed."""
    root = None
    if not isinstance(manifest, dict):
        try:
            manifest, root = _read_manifest(manifest)
        except MissingFrame as exc:
            return [f"MissingFile: {exc}"]
    report = []
    specs = []
    cams = manifest.get("cameras", [])
    if sum(bool(c.get("reference")) for c in cams) != 1:
        report.append("ReferenceCamera: exactly one camera must be marked as reference")
    for c in cams:
        try:
            specs.append(ModalitySpec.from_dict(c["modality"]))
        except (InvalidSpec, KeyError, TypeError) as exc:
            report.append(f"PatternError: {exc}")
            continue
        try:
            Intrinsics.from_dict(c["intrinsics"])
            DistortionCoefficients.from_dict(c.get("distortion", {}))
        except (InvalidSpec, KeyError) as exc:
            report.append(f"CameraError: {specs[-1].name}: {exc}")
        problem = _check_rotation(np.array(c.get("extrinsic", {}).get("rotation", np.eye(3)), dtype=np.float64))
        if problem:
            report.append(f"PoseError: extrinsic of {specs[-1].name}: {problem}")
    for p in partition_violations(specs):
        code = "SliceOverlap" if p.startswith("slice overlap") else "SliceError"
        report.append(f"{code}: {p}")
    seen = set()
    names = {s.name for s in specs}
    for v in manifest.get("views", []):
        idx = v.get("index")
        if idx in seen:
            report.append(f"DuplicateView: view index {idx} appears more than once")
        seen.add(idx)
        problem = _check_rotation(np.array(v["pose"]["rotation"], dtype=np.float64))
        if problem:
            report.append(f"PoseError: view {idx}: {problem}")
        missing = names - set(v.get("frames", {}))
        if missing:
            report.append(f"MissingFile: view {idx} has no frame for {sorted(missing)}")
        if root is not None:
            for kind in ("frames", "masks"):
                for mod, rel in v.get(kind, {}).items():
                    if not (root / rel).exists():
                        report.append(f"MissingFile: {rel}")
    test = manifest.get("split", {}).get("test", [])
    if not set(test) <= seen:
        report.append(f"SplitError: test views {sorted(set(test) - seen)} are not in the scene")
    return report


# --------------------------------------------------------------------------
# loading


def _read_png(path: Path, flags) -> np.ndarray:
    import cv2

    if not path.exists():
        raise MissingFrame(f"missing frame {path}")
    img = cv2.imread(str(path), flags)
    if img is None:
        raise MissingFrame(f"unreadable frame {path}")
    return img


def _normalization(manifest: dict) -> tuple[np.ndarray, float]:
    norm = manifest.get("normalization", {})
    center = np.array(norm.get("center", [0.0, 0.0, 0.0]), dtype=np.float64)
    radius = float(norm.get("radius", 0.9))
    fill = float(norm.get("roi_fill", 0.9))
    if not 0.0 < fill < 1.0:
        raise InvalidSpec("roi_fill must lie in (0, 1) so the object sits strictly inside the ROI")
    return center, fill / radius


def load_scene(path, test_views=None, load_masks: bool = True) -> SceneDataset:
    """Load, check and normalize a scene. Frames stay raw (uint16) and are
    normalized on access by ``2^bit_depth - 1``."""
    import cv2

    manifest, root = _read_manifest(path)
    specs = [ModalitySpec.from_dict(c["modality"]) for c in manifest["cameras"]]
    if any(s.output_slice is None for s in specs):
        specs = assign_output_slices(specs)
    center, scale = _normalization(manifest)
    extrinsics = {}
    rigs = {}
    for c, spec in zip(manifest["cameras"], specs):
        extr = Pose.from_dict(c["extrinsic"])
        extrinsics[spec.name] = Pose(extr.rotation, extr.translation * scale)
        rigs[spec.name] = (Intrinsics.from_dict(c["intrinsics"]), DistortionCoefficients.from_dict(c["distortion"]))
    views = sorted(manifest["views"], key=lambda v: v["index"])
    view_ids = tuple(int(v["index"]) for v in views)
    if len(set(view_ids)) != len(view_ids):
        raise InvalidSpec("duplicate view indices")
    cameras, raw, masks = {}, {}, {}
    for spec in specs:
        k, dist = rigs[spec.name]
        frames, mframes = [], []
        for v in views:
            ref = Pose.from_dict(v["pose"])
            ref = Pose(ref.rotation, (ref.translation - center) * scale)
            cameras[(v["index"], spec.name)] = CameraModel(k, dist, compose_star_pose(ref, extrinsics[spec.name]))
            rel = v["frames"].get(spec.name)
            if rel is None:
                raise MissingFrame(f"view {v['index']} has no {spec.name} frame")
            img = _read_png(root / rel, cv2.IMREAD_UNCHANGED)
            if img.dtype != np.uint16 or img.ndim != 2:
                raise BitDepthMismatch(f"{rel}: expected a single-channel 16-bit PNG, got {img.dtype} {img.shape}")
            if img.shape != (k.height, k.width):
                raise BitDepthMismatch(f"{rel}: resolution {img.shape[::-1]} != declared {(k.width, k.height)}")
            if int(img.max()) > spec.max_raw:
                raise BitDepthMismatch(f"{rel}: raw value {int(img.max())} exceeds {spec.bit_depth}-bit range")
            frames.append(img)
            mrel = v.get("masks", {}).get(spec.name)
            if load_masks and mrel is not None:
                mframes.append(_read_png(root / mrel, cv2.IMREAD_UNCHANGED) > 127)
        raw[spec.name] = np.stack(frames)
        if load_masks and len(mframes) == len(views):
            masks[spec.name] = np.stack(mframes)
    test = manifest.get("split", {}).get("test", DEFAULT_TEST_VIEWS) if test_views is None else test_views
    split = Split.from_views(view_ids, test)
    return SceneDataset(manifest.get("scene", root.name), root, specs, cameras, raw, masks, split, view_ids,
                        scale, center)


def demosaicked(dataset: SceneDataset) -> SceneDataset:
    """Copy of ``dataset`` carrying bilinearly demosaicked full-channel frames."""
    from .metrics import demosaick_bilinear

    full = {}
    for m in dataset.registry:
        frames = [demosaick_bilinear(dataset.frame(m.name, v), m.pattern) for v in dataset.view_ids]
        full[m.name] = np.stack(frames)
    out = SceneDataset(**{k: getattr(dataset, k) for k in dataset.__dataclass_fields__})
    out.full_channel = full
    return out


def unbalanced_budget(dataset: SceneDataset, modality: str, n_views: int, seed: int = 0) -> ViewBudget:
    """Restrict ``modality`` to ``n_views`` train views (deterministic in ``seed``)."""
    train = dataset.split.train
    if n_views > len(train):
        raise BudgetTooLarge(f"{n_views} views requested but the train split has {len(train)}")
    if n_views < 1:
        raise BudgetTooLarge("a budget needs at least one view")
    dataset.modality(modality)
    rng = np.random.default_rng(seed)
    chosen = tuple(sorted(int(v) for v in rng.choice(np.array(train), size=n_views, replace=False)))
    views = {m.name: (chosen if m.name == modality else train) for m in dataset.registry}
    return ViewBudget(views)


def restrict_budget(dataset: SceneDataset, budget: ViewBudget, modalities) -> ViewBudget:
    """Budget containing only ``modalities`` (single-modality training runs)."""
    return ViewBudget({m: budget[m] for m in modalities})
