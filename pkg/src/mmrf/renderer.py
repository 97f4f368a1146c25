"""Volume rendering of SDF scene fields.

Any object with the scene-field protocol can be rendered: the trained
:class:`~mmrf.field.SceneModel` or an analytic stand-in (see
:mod:`mmrf.synth`). The protocol is::

    query_sdf(points) -> (sdf (N,), geo_feature (N, G))
    sharpness() -> scalar tensor
    query_radiance(points, dirs, normals, geo) -> (N, C_total) in (0, 1)
    needs_normals, normal_step
    and either background_color(origins, dirs) -> (R, C_total)
    or query_background(points, dirs) -> (density (N,), color (N, C_total)) + bg_samples

Per ray, ``n`` samples ``t_0 < ... < t_{n-1}`` cover ``[near, far]``; the SDF
is also read at one extra point one interval past the last sample, giving
``α_i = max(1 - Φ_s(sdf(t_{i+1})) / Φ_s(sdf(t_i)), 0)`` with ``Φ_s`` the
logistic CDF of sharpness ``s``.

Polarization: the modality's three shared outputs ``(u0, u1, u2) ∈ (0, 1)``
are composited like any other channel and then mapped to a Stokes vector
``s0 = u0, s1 = s0 (2 u1 - 1), s2 = s0 (2 u2 - 1)``, with ``(s1, s2)``
rescaled onto the disc ``|(s1, s2)| <= s0`` if needed. DoLP <= 1 and
non-negative intensities hold by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ._fpu import flush_denormals
from .field import normalize_gradient
from .geometry import CameraModel, Ray, camera_rays, frame_pixels
from .modality import (ModalitySpec, camera_roll_about_rays, channel_at, polarizer_cos_sin,
                       polarizer_response, quantize)

DEPTH_EPS = 1e-10
MIN_DEPTH_WEIGHT = 1e-3
FAR_DELTA = 1e10


@dataclass(frozen=True)
class RenderOptions:
    n_samples: int = 64
    stratified: bool = False
    importance_samples: int = 0
    # Radiance is skipped for samples whose (detached) weight is below this;
    # 0 evaluates every sample.
    weight_prune: float = 0.0
    normals: bool = False


@dataclass
class RenderOutput:
    color: torch.Tensor       # (R, C) composited shared vector incl. background
    w_fg: torch.Tensor        # (R,)
    depth: torch.Tensor       # (R,), 0 where w_fg < MIN_DEPTH_WEIGHT
    normal: torch.Tensor | None
    background: torch.Tensor  # (R, C) background field's own composite
    weights: torch.Tensor     # (R, n)
    t: torch.Tensor           # (R, n)


# --------------------------------------------------------------------------
# sampling and compositing primitives


def sample_along_rays(near, far, n: int, stratified: bool = False, generator: torch.Generator | None = None):
    """``n`` samples per ray, one per uniform interval of ``[near, far]``.

    Returns ``(t, edges)`` with shapes ``(R, n)`` and ``(R, n + 1)``.
    """
    near = torch.as_tensor(near)
    far = torch.as_tensor(far, dtype=near.dtype)
    u = torch.linspace(0.0, 1.0, n + 1, dtype=near.dtype)
    edges = near[:, None] + (far - near)[:, None] * u[None, :]
    if stratified:
        jitter = torch.rand(edges.shape[0], n, generator=generator, dtype=near.dtype)
    else:
        jitter = torch.full((edges.shape[0], n), 0.5, dtype=near.dtype)
    t = edges[:, :-1] + (edges[:, 1:] - edges[:, :-1]) * jitter
    return t, edges


def sample_ray(ray: Ray, n: int, stratified: bool = False, seed: int = 0):
    """Sample one ray: ``(positions (n, 3), intervals (n, 2), t (n,))`` as numpy."""
    if not ray.near < ray.far:
        raise ValueError("ray needs near < far")
    gen = torch.Generator().manual_seed(seed)
    t, edges = sample_along_rays(torch.tensor([ray.near], dtype=torch.float64),
                                 torch.tensor([ray.far], dtype=torch.float64), n, stratified, gen)
    t = t[0].numpy()
    e = edges[0].numpy()
    pos = ray.origin[None, :] + t[:, None] * ray.direction[None, :]
    return pos, np.stack([e[:-1], e[1:]], axis=-1), t


def sdf_to_alpha(sdf_i, sdf_next, s):
    """Opacity of the interval between two SDF readings under sharpness ``s``."""
    sdf_i = torch.as_tensor(sdf_i, dtype=torch.float64) if not torch.is_tensor(sdf_i) else sdf_i
    sdf_next = torch.as_tensor(sdf_next, dtype=sdf_i.dtype) if not torch.is_tensor(sdf_next) else sdf_next
    s = torch.as_tensor(s, dtype=sdf_i.dtype)
    log_ratio = torch.nn.functional.logsigmoid(s * sdf_next) - torch.nn.functional.logsigmoid(s * sdf_i)
    return -torch.expm1(torch.clamp(log_ratio, max=0.0))


def transmittance_weights(alpha: torch.Tensor):
    """Compositing weights ``w_i = α_i ∏_{j<i} (1 - α_j)`` and final transmittance."""
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    before = torch.cat([torch.ones_like(alpha[..., :1]), trans[..., :-1]], dim=-1)
    return alpha * before, trans[..., -1]


def composite(alphas, values, t=None, background=None):
    """Composite per-sample ``values (R, n, C)`` with opacities ``alphas (R, n)``.

    Returns a dict with ``color``, ``w_fg``, ``weights``, ``transmittance`` and
    (when ``t`` is given) ``depth``. ``background`` ``(R, C)`` is added with the
    leftover transmittance.
    """
    alphas = torch.as_tensor(alphas, dtype=torch.float64) if not torch.is_tensor(alphas) else alphas
    values = torch.as_tensor(values, dtype=alphas.dtype) if not torch.is_tensor(values) else values
    weights, trans = transmittance_weights(alphas)
    color = (weights[..., None] * values).sum(dim=-2)
    if background is not None:
        color = color + trans[..., None] * torch.as_tensor(background, dtype=alphas.dtype)
    out = {"color": color, "w_fg": 1.0 - trans, "weights": weights, "transmittance": trans}
    if t is not None:
        t = torch.as_tensor(t, dtype=alphas.dtype)
        w_fg = out["w_fg"]
        depth = (weights * t).sum(dim=-1) / torch.clamp(w_fg, min=DEPTH_EPS)
        out["depth"] = torch.where(w_fg < MIN_DEPTH_WEIGHT, torch.zeros_like(depth), depth)
    return out


def stokes_from_unit(u: torch.Tensor) -> torch.Tensor:
    """Bounded Stokes parameterization of the composited polarization slice."""
    s0 = u[..., 0]
    s1 = s0 * (2.0 * u[..., 1] - 1.0)
    s2 = s0 * (2.0 * u[..., 2] - 1.0)
    rho = torch.sqrt(s1 * s1 + s2 * s2 + 1e-20)
    scale = torch.where(rho > s0, s0 / rho, torch.ones_like(rho))
    return torch.stack([s0, s1 * scale, s2 * scale], dim=-1)


def unit_from_stokes(s) -> np.ndarray:
    """Inverse of :func:`stokes_from_unit` on the valid disc (s0 > 0)."""
    s = np.asarray(s, dtype=np.float64)
    s0 = s[..., 0]
    safe = np.where(s0 > 0, s0, 1.0)
    return np.stack([s0, 0.5 * (s[..., 1] / safe + 1.0), 0.5 * (s[..., 2] / safe + 1.0)], axis=-1)


# --------------------------------------------------------------------------
# background


def _background_radii(origins, dirs, n: int, stratified: bool, generator):
    """Inverted-sphere sample distances beyond the ROI: radii 1/u for u in (0, 1)."""
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1)
    closest = torch.sqrt(torch.clamp(c - b * b, min=0.0))
    base = torch.clamp(closest, min=1.0) + 1e-4
    if stratified:
        jitter = torch.rand(origins.shape[0], n, generator=generator, dtype=origins.dtype)
    else:
        jitter = torch.full((origins.shape[0], n), 0.5, dtype=origins.dtype)
    # (n - i - jitter) / n rather than 1 - (i + jitter) / n: the latter rounds to
    # exactly 0 in float32 for jitter near 1 and sends the last radius to inf.
    u = (n - torch.arange(n, dtype=origins.dtype)[None, :] - jitter) / n  # (R, n) descending in (0, 1]
    radius = base[:, None] / torch.clamp(u, min=1e-6)
    t = -b[:, None] + torch.sqrt(torch.clamp(b[:, None] ** 2 - c[:, None] + radius**2, min=0.0))
    return t


def background_composite(fields, origins, dirs, stratified=False, generator=None):
    if hasattr(fields, "background_color"):
        return fields.background_color(origins, dirs)
    n = fields.bg_samples
    t = _background_radii(origins, dirs, n, stratified, generator)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    sigma, color = fields.query_background(pts.reshape(-1, 3), dirs[:, None, :].expand(-1, n, -1).reshape(-1, 3))
    sigma = sigma.reshape(-1, n)
    color = color.reshape(-1, n, color.shape[-1])
    delta = torch.cat([t[:, 1:] - t[:, :-1], torch.full_like(t[:, :1], FAR_DELTA)], dim=-1)
    alpha = 1.0 - torch.exp(-sigma * delta)
    weights, _ = transmittance_weights(alpha)
    return (weights[..., None] * color).sum(dim=1)


# --------------------------------------------------------------------------
# ray rendering


def _importance_t(t, edges, weights, n_extra):
    """Inverse-CDF resampling of ``n_extra`` points from detached weights."""
    w = weights.detach() + 1e-5
    pdf = w / w.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, -1)], -1)
    u = (torch.arange(n_extra, dtype=t.dtype) + 0.5) / n_extra
    u = u.expand(t.shape[0], n_extra).contiguous()
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, cdf.shape[-1] - 1)
    c0, c1 = cdf.gather(-1, idx - 1), cdf.gather(-1, idx)
    e0, e1 = edges.gather(-1, idx - 1), edges.gather(-1, idx)
    frac = (u - c0) / torch.clamp(c1 - c0, min=1e-12)
    extra = e0 + frac * (e1 - e0)
    merged, _ = torch.sort(torch.cat([t, extra], -1), -1)
    return merged


def _field_dtype(fields) -> torch.dtype:
    if hasattr(fields, "dtype"):
        return fields.dtype
    if hasattr(fields, "parameters"):
        return next(iter(fields.parameters())).dtype
    return torch.float32


def render_rays(fields, origins, dirs, near, far, hit=None, options: RenderOptions = RenderOptions(),
                generator: torch.Generator | None = None) -> RenderOutput:
    dtype = _field_dtype(fields)
    origins = torch.as_tensor(origins, dtype=dtype)
    dirs = torch.as_tensor(dirs, dtype=dtype)
    near = torch.as_tensor(near, dtype=dtype)
    far = torch.as_tensor(far, dtype=dtype)
    R = origins.shape[0]
    hit = torch.ones(R, dtype=torch.bool) if hit is None else torch.as_tensor(hit, dtype=torch.bool)
    # Rays missing the ROI get a degenerate segment; their alphas are zeroed below.
    far = torch.where(hit, far, near + 1e-3)

    t, edges = sample_along_rays(near, far, options.n_samples, options.stratified, generator)
    s = fields.sharpness()

    def geometry(t):
        n = t.shape[1]
        delta_last = (far - near) / options.n_samples
        t_ext = torch.cat([t, t[:, -1:] + delta_last[:, None]], dim=-1)
        pts = origins[:, None, :] + t_ext[..., None] * dirs[:, None, :]
        flat = pts.reshape(-1, 3)
        want_normals = fields.needs_normals or options.normals
        if want_normals:
            step = fields.normal_step
            offsets = torch.eye(3, dtype=dtype) * step
            probes = torch.cat([flat] + [flat + o for o in offsets] + [flat - o for o in offsets], dim=0)
            sdf_all, geo_all = fields.query_sdf(probes)
            m = flat.shape[0]
            sdf, geo = sdf_all[:m], geo_all[:m]
            d = sdf_all[m:].reshape(6, m)
            grad = ((d[:3] - d[3:]) / (2.0 * step)).T
            normals, _ = normalize_gradient(grad)
            normals = normals.reshape(R, n + 1, 3)[:, :n]
        else:
            sdf, geo = fields.query_sdf(flat)
            normals = None
        sdf = sdf.reshape(R, n + 1)
        alpha = sdf_to_alpha(sdf[:, :-1], sdf[:, 1:], s) * hit[:, None].to(dtype)
        # The surface crossing of interval i lies between t_i and t_{i+1}.
        t_mid = 0.5 * (t_ext[:, :-1] + t_ext[:, 1:])
        return pts[:, :n], geo.reshape(R, n + 1, -1)[:, :n], normals, alpha, t_mid

    if options.importance_samples > 0:
        with torch.no_grad():
            alpha0 = geometry(t)[3]
            w0, _ = transmittance_weights(alpha0)
        t = _importance_t(t, edges, w0, options.importance_samples)

    pts, geo, normals, alpha, t_mid = geometry(t)
    weights, trans = transmittance_weights(alpha)
    n = t.shape[1]
    view = dirs[:, None, :].expand(-1, n, -1)
    radiance_normals = normals if normals is not None else torch.zeros_like(pts)
    if options.weight_prune > 0:
        keep = (weights.detach() > options.weight_prune).reshape(-1)
        idx = torch.nonzero(keep)[:, 0]
        vals = fields.query_radiance(pts.reshape(-1, 3)[idx], view.reshape(-1, 3)[idx],
                                     radiance_normals.reshape(-1, 3)[idx], geo.reshape(-1, geo.shape[-1])[idx])
        values = torch.zeros(R * n, vals.shape[-1], dtype=vals.dtype).index_copy(0, idx, vals)
        values = values.reshape(R, n, -1)
    else:
        values = fields.query_radiance(pts.reshape(-1, 3), view.reshape(-1, 3), radiance_normals.reshape(-1, 3),
                                       geo.reshape(-1, geo.shape[-1])).reshape(R, n, -1)
    fg = (weights[..., None] * values).sum(dim=1)
    bg = background_composite(fields, origins, dirs, options.stratified, generator)
    w_fg = 1.0 - trans
    depth = (weights * t_mid).sum(-1) / torch.clamp(w_fg, min=DEPTH_EPS)
    depth = torch.where(w_fg < MIN_DEPTH_WEIGHT, torch.zeros_like(depth), depth)
    normal_map = None
    if normals is not None:
        acc = (weights[..., None] * normals).sum(1)
        normal_map = acc / torch.clamp(acc.norm(dim=-1, keepdim=True), min=1e-12)
    return RenderOutput(fg + trans[:, None] * bg, w_fg, depth, normal_map, bg, weights, t)


# --------------------------------------------------------------------------
# per-modality pixel values


def modality_values(color: torch.Tensor, modality: ModalitySpec, channel=None, cos2=None, sin2=None):
    """Pixel values of ``modality`` from composited shared vectors ``color (R, C)``.

    With ``channel`` (R,) the value of that channel per ray (mosaicked); without
    it, all channels ``(R, n_channels)``. Polarization needs the per-ray
    ``cos 2θ'``/``sin 2θ'`` of the (roll-compensated) filter angle, shape
    ``(R,)`` for mosaicked or ``(R, 4)`` for all channels.
    """
    start, end = modality.output_slice
    block = color[:, start:end]
    if modality.is_polarization:
        stokes = stokes_from_unit(block)
        if channel is None:
            return polarizer_response(stokes[:, None, :], cos2, sin2)
        return polarizer_response(stokes, cos2, sin2)
    if channel is None:
        return block
    return block.gather(1, torch.as_tensor(channel, dtype=torch.int64)[:, None])[:, 0]


def polarizer_terms(modality: ModalitySpec, rotation: np.ndarray, dirs: np.ndarray, channel=None):
    """Per-ray ``(cos 2θ', sin 2θ')`` with θ' = filter angle + camera roll about the ray."""
    roll = camera_roll_about_rays(rotation, dirs)
    angles = modality.filter_angles
    if channel is None:
        theta = angles[None, :] + roll[:, None]
    else:
        theta = angles[np.asarray(channel)] + roll
    c, s = polarizer_cos_sin(theta)
    return c, s


def render_pixel(fields, camera: CameraModel, modality: ModalitySpec, row: int, col: int,
                 options: RenderOptions = RenderOptions(), mosaicked: bool = True):
    o, d, near, far, hit = camera_rays(camera, np.array([[col, row]]))
    with torch.no_grad():
        out = render_rays(fields, o, d, near, far, hit, options)
    channel = None
    if mosaicked and modality.pattern is not None:
        channel = np.array([channel_at(modality.pattern, row, col)])
    cos2 = sin2 = None
    if modality.is_polarization:
        c, s = polarizer_terms(modality, camera.pose.rotation, d, channel)
        cos2 = torch.as_tensor(c, dtype=out.color.dtype)
        sin2 = torch.as_tensor(s, dtype=out.color.dtype)
    vals = modality_values(out.color, modality, None if channel is None else torch.as_tensor(channel), cos2, sin2)
    return vals[0].numpy()


@flush_denormals()
def render_frame(fields, camera: CameraModel, modality: ModalitySpec, mode: str = "mosaicked", stride: int = 1,
                 options: RenderOptions = RenderOptions(normals=True), chunk: int = 4096) -> dict:
    """Render a full (or strided) frame of one modality.

    ``mode`` is ``"mosaicked"`` (one pattern channel per pixel) or
    ``"full-channel"`` (every channel of the modality at every pixel).
    Returns ``image``, ``depth``, ``normal``, ``w_fg`` arrays, row-major.
    """
    if mode not in ("mosaicked", "full-channel"):
        raise ValueError(f"unknown render mode {mode!r}")
    k = camera.intrinsics
    pix = frame_pixels(k.width, k.height, stride)
    h = len(range(0, k.height, stride))
    w = len(range(0, k.width, stride))
    o, d, near, far, hit = camera_rays(camera, pix)
    mosaicked = mode == "mosaicked" and modality.pattern is not None
    channel = channel_at(modality.pattern, pix[:, 1], pix[:, 0]) if mosaicked else None
    images, depths, normals, wfg = [], [], [], []
    with torch.no_grad():
        for a in range(0, len(pix), chunk):
            b = slice(a, a + chunk)
            out = render_rays(fields, o[b], d[b], near[b], far[b], hit[b], options)
            ch = None if channel is None else channel[b]
            cos2 = sin2 = None
            if modality.is_polarization:
                c, s = polarizer_terms(modality, camera.pose.rotation, d[b], ch)
                cos2 = torch.as_tensor(c, dtype=out.color.dtype)
                sin2 = torch.as_tensor(s, dtype=out.color.dtype)
            vals = modality_values(out.color, modality, None if ch is None else torch.as_tensor(ch), cos2, sin2)
            images.append(vals.numpy())
            depths.append(out.depth.numpy())
            wfg.append(out.w_fg.numpy())
            if out.normal is not None:
                normals.append(out.normal.numpy())
    image = np.concatenate(images, axis=0)
    image = image.reshape(h, w) if image.ndim == 1 else image.reshape(h, w, -1)
    return {
        "image": image,
        "depth": np.concatenate(depths).reshape(h, w),
        "normal": np.concatenate(normals).reshape(h, w, 3) if normals else None,
        "w_fg": np.concatenate(wfg).reshape(h, w),
        "hit": hit.reshape(h, w),
    }


def mosaick_from_full(full: np.ndarray, modality: ModalitySpec, stride: int = 1) -> np.ndarray:
    """Sample a full-channel render down to the pattern channel per pixel."""
    h, w = full.shape[:2]
    rows = (np.arange(h) * stride)[:, None]
    cols = (np.arange(w) * stride)[None, :]
    ch = channel_at(modality.pattern, np.broadcast_to(rows, (h, w)), np.broadcast_to(cols, (h, w)))
    return np.take_along_axis(full, ch[..., None], axis=-1)[..., 0]


# --------------------------------------------------------------------------
# image files


def write_pfm(path, data: np.ndarray) -> None:
    """32-bit float PFM (little-endian; rows stored bottom-up per the format)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM holds one or three channels")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_png16(path, image: np.ndarray, bit_depth: int = 16) -> list[Path]:
    """Quantize ``[0, 1]`` values to 16-bit PNG(s).

    One file for 1, 3 or 4 channels (3/4 written in RGB(A) order), otherwise
    one file per channel with a ``_c<k>`` suffix. Returns the written paths.
    """
    import cv2

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = quantize(np.clip(image, 0.0, 1.0), bit_depth)
    if img.ndim == 2 or img.shape[2] == 1:
        cv2.imwrite(str(path), img.reshape(img.shape[:2]))
        return [path]
    if img.shape[2] == 3:
        cv2.imwrite(str(path), img[..., ::-1])
        return [path]
    if img.shape[2] == 4:
        cv2.imwrite(str(path), img[..., [2, 1, 0, 3]])
        return [path]
    out = []
    for c in range(img.shape[2]):
        p = path.with_name(f"{path.stem}_c{c}{path.suffix}")
        cv2.imwrite(str(p), img[..., c])
        out.append(p)
    return out


def save_render(result: dict, prefix) -> list:
    """Write a :func:`render_frame` result: image PNG(s), depth/normal PFM, W_fg 8-bit PNG."""
    import cv2

    prefix = Path(prefix)
    paths = write_png16(prefix.with_name(prefix.name + "_image.png"), result["image"])
    depth = prefix.with_name(prefix.name + "_depth.pfm")
    write_pfm(depth, result["depth"])
    paths.append(depth)
    if result.get("normal") is not None:
        normal = prefix.with_name(prefix.name + "_normal.pfm")
        write_pfm(normal, result["normal"])
        paths.append(normal)
    wfg = prefix.with_name(prefix.name + "_wfg.png")
    cv2.imwrite(str(wfg), np.round(np.clip(result["w_fg"], 0, 1) * 255).astype(np.uint8))
    paths.append(wfg)
    return paths
