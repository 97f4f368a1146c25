"""Learnable scene representation.

* :class:`HashGrid` - multi-resolution spatial hash encoding (dense where the
  level fits the table, XOR-of-primes hashed otherwise).
* :class:`SDFNetwork` - geometry: grid + shallow MLP -> (sdf, geometric feature).
* :class:`RadianceNetwork` - shared radiance: grid + MLP -> one sigmoid output
  per shared channel (sum of all modality slice widths).
* :class:`BackgroundNetwork` - small NeRF over inverted-sphere coordinates,
  consulted only outside the unit region of interest.
* :class:`SceneModel` - the three networks plus the modality slice registry,
  with a versioned binary checkpoint format.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from ._fpu import flush_denormals
from . import autodiff as ad
from .errors import CheckpointMismatch, ZeroGradient
from .modality import ModalitySpec, check_partition, total_outputs

PRIMES = (1, 2654435761, 805459861)
GEO_FEATURE_DIM = 13
SH_C0 = 0.28209479177387814


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    base_resolution: int = 16
    growth: float = 1.5
    features_per_level: int = 2
    table_size_log2: int = 19

    def __post_init__(self):
        if self.levels < 1 or self.base_resolution < 1 or self.features_per_level < 1:
            raise ValueError("hash grid counts must be positive")
        if self.growth <= 1.0:
            raise ValueError("hash grid growth must exceed 1")

    @property
    def resolutions(self) -> list[int]:
        return [int(math.floor(self.base_resolution * self.growth**l)) for l in range(self.levels)]

    @property
    def dense(self) -> list[bool]:
        cap = 1 << self.table_size_log2
        return [(n + 1) ** 3 <= cap for n in self.resolutions]

    @property
    def level_rows(self) -> list[int]:
        cap = 1 << self.table_size_log2
        return [(n + 1) ** 3 if d else cap for n, d in zip(self.resolutions, self.dense)]

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level


_CORNERS = torch.tensor([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=torch.int64)


class HashGrid(nn.Module):
    def __init__(self, config: HashGridConfig, init_scale: float = 1e-4):
        super().__init__()
        self.config = config
        rows = config.level_rows
        self.register_buffer("offsets", torch.tensor([0] + list(np.cumsum(rows)[:-1]), dtype=torch.int64),
                             persistent=False)
        self.table = nn.Parameter(torch.empty(sum(rows), config.features_per_level).uniform_(-init_scale, init_scale))
        self._meta = (np.array(config.resolutions, dtype=np.int64), np.array(config.dense, dtype=np.bool_),
                      self.offsets.numpy().copy(), np.int64((1 << config.table_size_log2) - 1))

    def corner_indices(self, positions: torch.Tensor):
        """Per-level corner rows ``(N, L, 8)`` and trilinear weights ``(N, L, 8)``."""
        cfg = self.config
        u = (positions.clamp(-1.0, 1.0) + 1.0) * 0.5
        idx_levels, w_levels = [], []
        mask = (1 << cfg.table_size_log2) - 1
        for level, (res, dense) in enumerate(zip(cfg.resolutions, cfg.dense)):
            scaled = u * res
            base = torch.clamp(torch.floor(scaled.detach()), 0, res - 1).to(torch.int64)
            frac = scaled - base.to(scaled.dtype)  # (N, 3)
            corner = base.unsqueeze(1) + _CORNERS.unsqueeze(0)  # (N, 8, 3)
            cw = torch.where(_CORNERS.unsqueeze(0).bool(), frac.unsqueeze(1), 1.0 - frac.unsqueeze(1))
            w = cw[..., 0] * cw[..., 1] * cw[..., 2]
            if dense:
                side = res + 1
                idx = corner[..., 0] + corner[..., 1] * side + corner[..., 2] * side * side
            else:
                idx = (corner[..., 0] * PRIMES[0]) ^ (corner[..., 1] * PRIMES[1]) ^ (corner[..., 2] * PRIMES[2])
                idx = idx & mask
            idx_levels.append(idx + self.offsets[level])
            w_levels.append(w)
        return torch.stack(idx_levels, dim=1), torch.stack(w_levels, dim=1)

    def forward(self, positions: torch.Tensor) -> torch.Tensor:
        return ad.hash_interpolate(self.table, positions, self._meta)

    def forward_reference(self, positions: torch.Tensor) -> torch.Tensor:
        """Unfused path through explicit corner rows and :func:`gather_interpolate`."""
        n = positions.shape[0]
        idx, w = self.corner_indices(positions)
        L = self.config.levels
        feats = ad.gather_interpolate(self.table, idx.reshape(n * L, 8), w.reshape(n * L, 8).to(self.table.dtype))
        return feats.reshape(n, L * self.config.features_per_level)


def hash_encode(grid: HashGrid, positions: torch.Tensor) -> torch.Tensor:
    return grid(positions)


def direction_encode(directions: torch.Tensor, degree: int = 4) -> torch.Tensor:
    """Real spherical harmonics up to ``degree`` (at most 4): ``(degree+1)^2`` values."""
    x, y, z = directions[..., 0], directions[..., 1], directions[..., 2]
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        c1 = 0.4886025119029199
        out += [-c1 * y, c1 * z, -c1 * x]
    if degree >= 2:
        xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
        out += [1.0925484305920792 * xy, -1.0925484305920792 * yz, 0.31539156525252005 * (2 * zz - xx - yy),
                -1.0925484305920792 * xz, 0.5462742152960396 * (xx - yy)]
    if degree >= 3:
        out += [-0.5900435899266435 * y * (3 * xx - yy), 2.890611442640554 * xy * z,
                -0.4570457994644658 * y * (4 * zz - xx - yy), 0.3731763325901154 * z * (2 * zz - 3 * xx - 3 * yy),
                -0.4570457994644658 * x * (4 * zz - xx - yy), 1.445305721320277 * z * (xx - yy),
                -0.5900435899266435 * x * (xx - 3 * yy)]
    if degree >= 4:
        out += [2.5033429417967046 * xy * (xx - yy), -1.7701307697799304 * yz * (3 * xx - yy),
                0.9461746957575601 * xy * (7 * zz - 1), -0.6690465435572892 * yz * (7 * zz - 3),
                0.10578554691520431 * (zz * (35 * zz - 30) + 3), -0.6690465435572892 * xz * (7 * zz - 3),
                0.47308734787878004 * (xx - yy) * (7 * zz - 1), -1.7701307697799304 * xz * (xx - 3 * yy),
                0.6258357354491761 * (xx * (xx - 3 * yy) - yy * (3 * xx - yy))]
    return torch.stack(out, dim=-1)


def frequency_encode(x: torch.Tensor, octaves: int) -> torch.Tensor:
    parts = [x]
    for k in range(octaves):
        scaled = x * (2.0**k * math.pi)
        parts += [ad.sin(scaled), ad.cos(scaled)]
    return torch.cat(parts, dim=-1)


@dataclass(frozen=True)
class FieldConfig:
    sdf_grid: HashGridConfig = field(default_factory=HashGridConfig)
    radiance_grid: HashGridConfig = field(default_factory=HashGridConfig)
    hidden: int = 64
    hidden_layers: int = 2
    softplus_beta: float = 100.0
    init_radius: float = 0.5
    init_sharpness: float = 20.0
    sh_degree: int = 4
    use_normal: bool = True
    normal_step: float | None = None
    bg_samples: int = 16
    bg_hidden: int = 64
    bg_octaves: int = 4

    @property
    def step(self) -> float:
        if self.normal_step is not None:
            return self.normal_step
        return 2.0 / self.sdf_grid.resolutions[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        for key in ("sdf_grid", "radiance_grid"):
            if key in d and isinstance(d[key], dict):
                d[key] = HashGridConfig(**d[key])
        return cls(**d)


def _dense_stack(sizes: Sequence[int]) -> nn.ModuleList:
    return nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))


class SDFNetwork(nn.Module):
    """Grid-encoded SDF with geometric (sphere) initialization."""

    def __init__(self, config: FieldConfig):
        super().__init__()
        self.config = config
        self.grid = HashGrid(config.sdf_grid)
        in_dim = 3 + config.sdf_grid.output_dim
        sizes = [in_dim] + [config.hidden] * config.hidden_layers + [1 + GEO_FEATURE_DIM]
        self.layers = _dense_stack(sizes)
        self.log_sharpness = nn.Parameter(torch.tensor(math.log(config.init_sharpness), dtype=torch.float32))
        self._geometric_init()

    @torch.no_grad()
    def _geometric_init(self):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            out_dim, in_dim = layer.weight.shape
            if i == last:
                nn.init.normal_(layer.weight, mean=math.sqrt(math.pi) / math.sqrt(in_dim), std=1e-4)
                nn.init.constant_(layer.bias, -self.config.init_radius)
            else:
                nn.init.normal_(layer.weight, 0.0, math.sqrt(2.0) / math.sqrt(out_dim))
                nn.init.zeros_(layer.bias)
                if i == 0:
                    layer.weight[:, 3:] = 0.0

    @property
    def sharpness(self) -> torch.Tensor:
        return torch.exp(self.log_sharpness)

    def forward(self, positions: torch.Tensor):
        h = torch.cat([positions, self.grid(positions)], dim=-1)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = ad.linear(layer.weight, layer.bias, h)
            if i < last:
                h = ad.softplus(h, self.config.softplus_beta)
        return h[:, 0], h[:, 1:]


class RadianceNetwork(nn.Module):
    """Shared radiance MLP. The last layer is split into one head per modality
    so each modality's output rows are separate parameters; rows of modalities
    that are not supervised in a step can then be left out of the update."""

    def __init__(self, config: FieldConfig, registry: Sequence[ModalitySpec]):
        super().__init__()
        self.config = config
        self.n_outputs = total_outputs(registry)
        self.grid = HashGrid(config.radiance_grid)
        in_dim = 3 + config.radiance_grid.output_dim + (config.sh_degree + 1) ** 2 + GEO_FEATURE_DIM
        if config.use_normal:
            in_dim += 3
        sizes = [in_dim] + [config.hidden] * config.hidden_layers
        self.layers = _dense_stack(sizes)
        ordered = sorted(registry, key=lambda m: m.output_slice[0])
        self.heads = nn.ModuleDict({m.name: nn.Linear(config.hidden, m.output_width) for m in ordered})

    @property
    def output_layer(self) -> nn.Linear:
        """Concatenated (detached) view of the per-modality heads."""
        layer = nn.Linear(self.config.hidden, self.n_outputs)
        with torch.no_grad():
            layer.weight.copy_(torch.cat([h.weight for h in self.heads.values()], dim=0))
            layer.bias.copy_(torch.cat([h.bias for h in self.heads.values()], dim=0))
        return layer

    def forward(self, positions, directions, normals, geo_features):
        parts = [positions, self.grid(positions), direction_encode(directions, self.config.sh_degree)]
        if self.config.use_normal:
            parts.append(normals)
        parts.append(geo_features)
        h = torch.cat(parts, dim=-1)
        for layer in self.layers:
            h = ad.relu(ad.linear(layer.weight, layer.bias, h))
        out = torch.cat([ad.linear(head.weight, head.bias, h) for head in self.heads.values()], dim=-1)
        return ad.sigmoid(out)


class BackgroundNetwork(nn.Module):
    """Vanilla NeRF over inverted-sphere coordinates ``(x/|x|, 1/|x|)``."""

    def __init__(self, config: FieldConfig, n_outputs: int):
        super().__init__()
        self.config = config
        in_dim = 4 * (1 + 2 * config.bg_octaves)
        w = config.bg_hidden
        self.trunk = _dense_stack([in_dim, w, w])
        self.density = nn.Linear(w, 1)
        self.color = _dense_stack([w + (config.sh_degree + 1) ** 2, w // 2, n_outputs])

    def forward(self, positions: torch.Tensor, directions: torch.Tensor):
        r = positions.norm(dim=-1, keepdim=True).clamp_min(1e-6)
        h = frequency_encode(torch.cat([positions / r, 1.0 / r], dim=-1), self.config.bg_octaves)
        for layer in self.trunk:
            h = ad.relu(ad.linear(layer.weight, layer.bias, h))
        sigma = ad.softplus(ad.linear(self.density.weight, self.density.bias, h), 1.0)[:, 0]
        c = torch.cat([h, direction_encode(directions, self.config.sh_degree)], dim=-1)
        c = ad.relu(ad.linear(self.color[0].weight, self.color[0].bias, c))
        c = ad.sigmoid(ad.linear(self.color[1].weight, self.color[1].bias, c))
        return sigma, c


def sdf_gradient(sdf_fn, positions: torch.Tensor, step: float) -> torch.Tensor:
    """Central-difference gradient of ``sdf_fn`` (6 extra queries per point)."""
    n = positions.shape[0]
    offsets = torch.eye(3, dtype=positions.dtype) * step
    probes = torch.cat([positions + o for o in offsets] + [positions - o for o in offsets], dim=0)
    s = sdf_fn(probes)
    if isinstance(s, tuple):
        s = s[0]
    s = s.reshape(6, n)
    return ((s[:3] - s[3:]) / (2.0 * step)).T


_FALLBACK_NORMAL = (0.0, 0.0, 1.0)


def normalize_gradient(grad: torch.Tensor, strict: bool = False):
    norm = grad.norm(dim=-1, keepdim=True)
    zero = norm[:, 0] < 1e-12
    if strict and bool(zero.any()):
        raise ZeroGradient(f"{int(zero.sum())} sample(s) have a vanishing SDF gradient")
    fallback = torch.tensor(_FALLBACK_NORMAL, dtype=grad.dtype).expand_as(grad)
    normals = torch.where(zero[:, None], fallback, grad / norm.clamp_min(1e-12))
    return normals, zero


def sdf_normal(sdf_fn, positions: torch.Tensor, step: float, strict: bool = False):
    """Unit normals from the numerical SDF gradient, plus a vanishing-gradient flag."""
    return normalize_gradient(sdf_gradient(sdf_fn, positions, step), strict=strict)


class SceneModel(nn.Module):
    """All learnable scene parameters plus the modality slice registry."""

    def __init__(self, registry: Sequence[ModalitySpec], config: FieldConfig | None = None):
        super().__init__()
        registry = list(registry)
        check_partition(registry)
        self.registry = registry
        self.config = config or FieldConfig()
        self.n_outputs = total_outputs(registry)
        self.sdf = SDFNetwork(self.config)
        self.radiance = RadianceNetwork(self.config, registry)
        self.background = BackgroundNetwork(self.config, self.n_outputs)

    # -- scene-field protocol consumed by the renderer --
    needs_normals = property(lambda self: self.config.use_normal)
    normal_step = property(lambda self: self.config.step)
    bg_samples = property(lambda self: self.config.bg_samples)

    def query_sdf(self, positions):
        return self.sdf(positions)

    def sharpness(self) -> torch.Tensor:
        return self.sdf.sharpness

    def query_radiance(self, positions, directions, normals, geo):
        return self.radiance(positions, directions, normals, geo)

    def query_background(self, positions, directions):
        return self.background(positions, directions)

    # --
    def modality(self, name: str) -> ModalitySpec:
        for m in self.registry:
            if m.name == name:
                return m
        raise KeyError(f"modality {name!r} not registered; have {[m.name for m in self.registry]}")

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {"tables": [], "mlp": [], "sharpness": []}
        for name, p in self.named_parameters():
            if name.endswith("table"):
                groups["tables"].append((name, p))
            elif name.endswith("log_sharpness"):
                groups["sharpness"].append((name, p))
            else:
                groups["mlp"].append((name, p))
        return groups

    def output_rows(self, modality: str) -> slice:
        start, end = self.modality(modality).output_slice
        return slice(start, end)


@flush_denormals()
def sphere_pretrain(model: SceneModel, steps: int = 1000, radius: float | None = None,
                    batch: int = 2048, lr: float = 1e-3, seed: int = 0) -> float:
    """Fit the SDF network to an analytic sphere; returns the final L1 error."""
    radius = model.config.init_radius if radius is None else radius
    gen = torch.Generator().manual_seed(seed)
    params = list(model.sdf.layers.parameters()) + [model.sdf.grid.table]
    opt = torch.optim.Adam(params, lr=lr)
    err = float("nan")
    for _ in range(steps):
        x = torch.rand(batch, 3, generator=gen) * 2.0 - 1.0
        sdf, _ = model.sdf(x)
        loss = (sdf - (x.norm(dim=-1) - radius)).abs().mean()
        opt.zero_grad(set_to_none=False)
        loss.backward()
        opt.step()
        err = float(loss.detach())
    return err


# --------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"MMRFCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: SceneModel, path, extra: dict | None = None) -> None:
    """Write a deterministic binary checkpoint (header JSON + raw little-endian arrays)."""
    arrays, entries, offset = [], [], 0
    for name, tensor in sorted(model.state_dict().items()):
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        arrays.append(data)
        offset += len(data)
    header = {
        "version": CHECKPOINT_VERSION,
        "field_config": model.config.to_dict(),
        "registry": [m.to_dict() for m in model.registry],
        "arrays": entries,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for data in arrays:
            f.write(data)


def read_checkpoint_header(path) -> tuple[dict, int]:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointMismatch(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise CheckpointMismatch(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(n).decode())
        return header, len(_MAGIC) + 12 + n


def load_checkpoint(path, expected_registry: Sequence[ModalitySpec] | None = None) -> tuple[SceneModel, dict]:
    header, start = read_checkpoint_header(path)
    registry = [ModalitySpec.from_dict(d) for d in header["registry"]]
    if expected_registry is not None:
        want = [m.to_dict() for m in expected_registry]
        if want != header["registry"]:
            raise CheckpointMismatch("checkpoint modality registry does not match the requested configuration")
    model = SceneModel(registry, FieldConfig.from_dict(header["field_config"]))
    raw = Path(path).read_bytes()[start:]
    state = {}
    for e in header["arrays"]:
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, header.get("extra", {})
