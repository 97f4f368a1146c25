"""Sensor modalities: channel semantics, mosaick patterns and Stokes-vector math.

Every registered modality owns a contiguous slice ``[start, end)`` of the
radiance network's shared output vector. Radiance modalities take one output
per channel; the polarization modality takes three (an encoding of S0, S1, S2
in a fixed world reference frame, see :mod:`mmrf.renderer`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateReference, InvalidSpec, ZeroIntensity

RADIANCE = "radiance"
POLARIZATION = "polarization"
POLARIZER_ANGLES = (0.0, 45.0, 90.0, 135.0)
MS_WAVELENGTHS = (692.0, 653.0, 611.0, 572.0, 541.0, 503.0, 464.0, 431.0)

WORLD_REFERENCE_AXIS = np.array([1.0, 0.0, 0.0])
WORLD_FALLBACK_AXIS = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    wavelength_nm: float | None = None
    filter_angle_deg: float | None = None

    def to_dict(self) -> dict:
        d = {"name": self.name}
        if self.wavelength_nm is not None:
            d["wavelength_nm"] = self.wavelength_nm
        if self.filter_angle_deg is not None:
            d["filter_angle_deg"] = self.filter_angle_deg
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelSpec":
        return cls(d["name"], d.get("wavelength_nm"), d.get("filter_angle_deg"))


@dataclass(frozen=True)
class MosaickPattern:
    """Periodic per-pixel filter layout; ``cell_channel[r][c]`` is a channel index."""

    cell_channel: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        cells = tuple(tuple(int(v) for v in row) for row in self.cell_channel)
        if not cells or not cells[0] or any(len(r) != len(cells[0]) for r in cells):
            raise InvalidSpec("mosaick pattern must be a non-empty rectangular grid")
        if any(v < 0 for r in cells for v in r):
            raise InvalidSpec("negative channel index in mosaick pattern")
        object.__setattr__(self, "cell_channel", cells)

    @property
    def tile_rows(self) -> int:
        return len(self.cell_channel)

    @property
    def tile_cols(self) -> int:
        return len(self.cell_channel[0])

    @property
    def array(self) -> np.ndarray:
        return np.array(self.cell_channel, dtype=np.int64)

    def channel_map(self, height: int, width: int) -> np.ndarray:
        """Channel index of every pixel of a ``height x width`` frame."""
        rows = np.arange(height) % self.tile_rows
        cols = np.arange(width) % self.tile_cols
        return self.array[rows[:, None], cols[None, :]]

    def to_list(self) -> list:
        return [list(r) for r in self.cell_channel]


def channel_at(pattern: MosaickPattern, row, col):
    """Channel index of pixel ``(row, col)``; scalars or integer arrays."""
    r = np.asarray(row) % pattern.tile_rows
    c = np.asarray(col) % pattern.tile_cols
    out = pattern.array[r, c]
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: str
    channels: tuple[ChannelSpec, ...]
    pattern: MosaickPattern | None
    bit_depth: int
    output_slice: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.kind not in (RADIANCE, POLARIZATION):
            raise InvalidSpec(f"unknown modality kind {self.kind!r}")
        if self.bit_depth not in (12, 16):
            raise InvalidSpec(f"bit depth must be 12 or 16, got {self.bit_depth}")
        if not self.channels:
            raise InvalidSpec(f"modality {self.name!r} declares no channels")
        if self.kind == POLARIZATION:
            angles = sorted(c.filter_angle_deg for c in self.channels if c.filter_angle_deg is not None)
            if len(self.channels) != 4 or tuple(angles) != POLARIZER_ANGLES:
                raise InvalidSpec("polarization modality needs exactly the filter angles 0/45/90/135")
        if self.pattern is not None:
            top = max(v for r in self.pattern.cell_channel for v in r)
            if top >= len(self.channels):
                raise InvalidSpec(f"pattern of {self.name!r} references channel {top} of {len(self.channels)}")
        if self.output_slice is not None:
            start, end = self.output_slice
            if end - start != self.output_width or start < 0:
                raise InvalidSpec(f"output slice of {self.name!r} must have width {self.output_width}")
            object.__setattr__(self, "output_slice", (int(start), int(end)))

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def output_width(self) -> int:
        return 3 if self.kind == POLARIZATION else len(self.channels)

    @property
    def max_raw(self) -> int:
        return (1 << self.bit_depth) - 1

    @property
    def filter_angles(self) -> np.ndarray:
        return np.array([c.filter_angle_deg or 0.0 for c in self.channels])

    @property
    def is_polarization(self) -> bool:
        return self.kind == POLARIZATION

    def channel_map(self, height: int, width: int) -> np.ndarray | None:
        return None if self.pattern is None else self.pattern.channel_map(height, width)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "channels": [c.to_dict() for c in self.channels],
            "pattern": None if self.pattern is None else self.pattern.to_list(),
            "bit_depth": self.bit_depth,
            "output_slice": None if self.output_slice is None else list(self.output_slice),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModalitySpec":
        pattern = d.get("pattern")
        sl = d.get("output_slice")
        return cls(
            name=d["name"],
            kind=d["kind"],
            channels=tuple(ChannelSpec.from_dict(c) for c in d["channels"]),
            pattern=None if pattern is None else MosaickPattern(pattern),
            bit_depth=int(d["bit_depth"]),
            output_slice=None if sl is None else (int(sl[0]), int(sl[1])),
        )


# --------------------------------------------------------------------------
# default sensors


def rgb(name: str = "rgb") -> ModalitySpec:
    chans = (ChannelSpec("R", 600.0), ChannelSpec("G", 540.0), ChannelSpec("B", 460.0))
    return ModalitySpec(name, RADIANCE, chans, MosaickPattern(((0, 1), (1, 2))), 12)


def mono(name: str = "mono") -> ModalitySpec:
    return ModalitySpec(name, RADIANCE, (ChannelSpec("Y"),), MosaickPattern(((0,),)), 12)


def nir(name: str = "nir") -> ModalitySpec:
    return ModalitySpec(name, RADIANCE, (ChannelSpec("NIR", 850.0),), MosaickPattern(((0,),)), 12)


def polarization(name: str = "pol") -> ModalitySpec:
    chans = tuple(ChannelSpec(f"P{int(a)}", None, a) for a in POLARIZER_ANGLES)
    # cells: [[90, 45], [135, 0]] degrees
    return ModalitySpec(name, POLARIZATION, chans, MosaickPattern(((2, 1), (3, 0))), 16)


def multispectral(name: str = "ms", ninth_cell_channel: int = 7) -> ModalitySpec:
    chans = tuple(ChannelSpec(f"MS{i}", w) for i, w in enumerate(MS_WAVELENGTHS))
    cells = ((0, 1, 2), (3, 4, 5), (6, 7, ninth_cell_channel))
    return ModalitySpec(name, RADIANCE, chans, MosaickPattern(cells), 12)


DEFAULT_SENSORS = {"rgb": rgb, "mono": mono, "nir": nir, "pol": polarization, "ms": multispectral}


def default_modality(name: str) -> ModalitySpec:
    try:
        return DEFAULT_SENSORS[name]()
    except KeyError:
        raise InvalidSpec(f"no default sensor named {name!r}; known: {sorted(DEFAULT_SENSORS)}") from None


def assign_output_slices(specs: Sequence[ModalitySpec]) -> list[ModalitySpec]:
    """Give each modality a contiguous slice of the shared output, in order."""
    out, start = [], 0
    for spec in specs:
        end = start + spec.output_width
        out.append(replace(spec, output_slice=(start, end)))
        start = end
    check_partition(out)
    return out


def partition_violations(specs: Sequence[ModalitySpec]) -> list[str]:
    problems = []
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        problems.append("duplicate modality names")
    owner: dict[int, str] = {}
    for s in specs:
        if s.output_slice is None:
            problems.append(f"{s.name}: no output slice")
            continue
        for i in range(*s.output_slice):
            if i in owner:
                problems.append(f"slice overlap: output {i} claimed by {owner[i]} and {s.name}")
            owner[i] = s.name
    if owner and sorted(owner) != list(range(len(owner))):
        problems.append("output slices are not contiguous from 0")
    return problems


def check_partition(specs: Sequence[ModalitySpec]) -> None:
    problems = partition_violations(specs)
    if problems:
        raise InvalidSpec("; ".join(problems))


def total_outputs(specs: Sequence[ModalitySpec]) -> int:
    return sum(s.output_width for s in specs)


# --------------------------------------------------------------------------
# Stokes vectors


class StokesVector(NamedTuple):
    s0: float
    s1: float
    s2: float


_QUARTER_COS = np.array([1.0, 0.0, -1.0, 0.0])
_QUARTER_SIN = np.array([0.0, 1.0, 0.0, -1.0])


def polarizer_cos_sin(angle_deg):
    """``(cos 2θ, sin 2θ)`` for polarizer angles in degrees; exact at multiples of 45°."""
    a = np.mod(2.0 * np.asarray(angle_deg, dtype=np.float64), 360.0)
    rad = np.deg2rad(a)
    c, s = np.cos(rad), np.sin(rad)
    q = a / 90.0
    exact = q == np.round(q)
    qi = np.round(q).astype(np.int64) % 4
    return np.where(exact, _QUARTER_COS[qi], c), np.where(exact, _QUARTER_SIN[qi], s)


def stokes_to_intensity(s, filter_angle_deg, camera_roll_deg=0.0):
    """Intensity behind a linear polarizer: ``½(S0 + S1 cos 2θ' + S2 sin 2θ')``.

    ``θ'`` is the filter angle plus the camera roll about the ray, i.e. the
    filter orientation in the fixed world reference frame.
    """
    arr = np.asarray(s, dtype=np.float64)
    c, sn = polarizer_cos_sin(np.asarray(filter_angle_deg) + np.asarray(camera_roll_deg))
    out = 0.5 * (arr[..., 0] + arr[..., 1] * c + arr[..., 2] * sn)
    return float(out) if np.ndim(out) == 0 else out


def polarizer_response(stokes, cos2, sin2):
    """Array-generic (numpy or torch) polarizer intensity from precomputed angle terms."""
    return 0.5 * (stokes[..., 0] + stokes[..., 1] * cos2 + stokes[..., 2] * sin2)


def intensities_to_stokes(i0, i45, i90, i135) -> StokesVector | np.ndarray:
    i0, i45, i90, i135 = (np.asarray(v, dtype=np.float64) for v in (i0, i45, i90, i135))
    s0 = (i0 + i45 + i90 + i135) / 2.0
    s1 = i0 - i90
    s2 = i45 - i135
    if s0.ndim == 0:
        return StokesVector(float(s0), float(s1), float(s2))
    return np.stack([s0, s1, s2], axis=-1)


def dolp_aolp(s):
    """Degree (0..1) and angle (degrees in [0, 180)) of linear polarization."""
    arr = np.asarray(s, dtype=np.float64)
    s0, s1, s2 = arr[..., 0], arr[..., 1], arr[..., 2]
    if np.any(s0 <= 0):
        raise ZeroIntensity("DoLP/AoLP undefined for non-positive S0")
    dolp = np.hypot(s1, s2) / s0
    aolp = np.mod(0.5 * np.degrees(np.arctan2(s2, s1)), 180.0)
    aolp = np.where(aolp >= 180.0, aolp - 180.0, aolp)
    if dolp.ndim == 0:
        return float(dolp), float(aolp)
    return dolp, aolp


def _roll(camera_x: np.ndarray, dirs: np.ndarray, reference: np.ndarray) -> np.ndarray:
    e1 = reference - np.sum(reference * dirs, axis=-1, keepdims=True) * dirs
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    cx = camera_x - np.sum(camera_x * dirs, axis=-1, keepdims=True) * dirs
    cx /= np.linalg.norm(cx, axis=-1, keepdims=True)
    sin = np.sum(np.cross(e1, cx) * dirs, axis=-1)
    cos = np.sum(e1 * cx, axis=-1)
    return np.degrees(np.arctan2(sin, cos))


def camera_roll_about_ray(pose, direction) -> float:
    """Signed angle (degrees, about the ray) from the projected world reference
    axis to the camera's image-plane horizontal axis."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    if abs(float(d @ WORLD_REFERENCE_AXIS)) > 1.0 - 1e-9:
        raise DegenerateReference("ray is parallel to the world polarization reference axis")
    return float(_roll(pose.rotation[:, 0], d, WORLD_REFERENCE_AXIS))


def camera_roll_about_rays(rotation: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Vectorized roll; rays parallel to the reference axis use the fallback axis."""
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    degenerate = np.abs(d @ WORLD_REFERENCE_AXIS) > 1.0 - 1e-9
    ref = np.where(degenerate[:, None], WORLD_FALLBACK_AXIS, WORLD_REFERENCE_AXIS)
    cam_x = np.broadcast_to(np.asarray(rotation)[:, 0], d.shape)
    return _roll(cam_x, d, ref)


def reference_frame(directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray Stokes reference axes ``(e1, e2)`` with ``e1 × e2 = d``."""
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    degenerate = np.abs(d @ WORLD_REFERENCE_AXIS) > 1.0 - 1e-9
    ref = np.where(degenerate[:, None], WORLD_FALLBACK_AXIS, WORLD_REFERENCE_AXIS)
    e1 = ref - np.sum(ref * d, axis=-1, keepdims=True) * d
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    return e1, np.cross(d, e1)


def normalize_raw(raw, bit_depth: int) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / float((1 << bit_depth) - 1)


def quantize(values, bit_depth: int) -> np.ndarray:
    top = (1 << bit_depth) - 1
    return np.clip(np.round(np.asarray(values, dtype=np.float64) * top), 0, top).astype(np.uint16)


def angle_between_deg(a: float, b: float) -> float:
    """Smallest difference between two axial angles (180° periodic)."""
    d = math.fmod(a - b, 180.0)
    d = d + 180.0 if d < 0 else d
    return min(d, 180.0 - d)
