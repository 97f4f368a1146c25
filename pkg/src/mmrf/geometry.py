"""Camera models, Brown-Conrady distortion and world-space ray generation.

Camera frame convention (used by every module): +x right, +y down, +z forward.
Poses are camera-to-world. Pixel coordinates are continuous ``(x, y)`` with
``x`` along columns; the center of pixel ``(col, row)`` sits at
``(col + 0.5, row + 0.5)``.

The scene region of interest (ROI) is the unit sphere at the world origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, MissesROI, NonConvergence, PoseCompositionError

ROI_RADIUS = 1.0
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidSpec(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidSpec("principal point outside the sensor")
        if self.skew != 0.0:
            raise InvalidSpec("skew is fixed at zero")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class DistortionCoefficients:
    """Radial (k1, k2) and tangential (p1, p2) Brown-Conrady terms.

    ``max_radius`` bounds the normalized radius over which the radial map must
    stay monotone; cameras tighten it to their own corner radius.
    """

    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    max_radius: float = field(default=1.0, compare=False)

    def __post_init__(self):
        vals = (self.k1, self.k2, self.p1, self.p2)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidSpec("distortion coefficients must be finite")
        r = np.linspace(0.0, self.max_radius, 512)
        slope = 1.0 + 3.0 * self.k1 * r**2 + 5.0 * self.k2 * r**4
        if np.any(slope <= 0):
            raise InvalidSpec("radial distortion is not monotone over the sensor range")

    @property
    def is_zero(self) -> bool:
        return self.k1 == 0 and self.k2 == 0 and self.p1 == 0 and self.p2 == 0

    def to_dict(self) -> dict:
        return {"k1": self.k1, "k2": self.k2, "p1": self.p1, "p2": self.p2}

    @classmethod
    def from_dict(cls, d: dict, max_radius: float = 1.0) -> "DistortionCoefficients":
        return cls(float(d.get("k1", 0.0)), float(d.get("k2", 0.0)),
                   float(d.get("p1", 0.0)), float(d.get("p2", 0.0)), max_radius=max_radius)


def _check_rotation(rot: np.ndarray, tol: float = _ORTHO_TOL) -> str | None:
    if rot.shape != (3, 3) or not np.all(np.isfinite(rot)):
        return "rotation must be a finite 3x3 matrix"
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > tol:
        return "rotation is not orthonormal"
    if abs(np.linalg.det(rot) - 1.0) > tol:
        return "rotation determinant is not +1"
    return None


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        problem = _check_rotation(rot)
        if problem:
            raise PoseCompositionError(problem)
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["rotation"], dtype=np.float64), np.array(d["translation"], dtype=np.float64))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


@dataclass(frozen=True)
class CameraModel:
    intrinsics: Intrinsics
    distortion: DistortionCoefficients
    pose: Pose

    def with_pose(self, pose: Pose) -> "CameraModel":
        return CameraModel(self.intrinsics, self.distortion, pose)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``eye`` looking at ``target`` with image-up ≈ ``up``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise InvalidSpec("look_at: up vector parallel to viewing direction")
    right /= norm
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    # Re-orthonormalize so the 1e-9 pose check holds after float roundoff.
    u, _, vt = np.linalg.svd(rot)
    return Pose(u @ vt, eye)


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle_rad) * k + (1 - math.cos(angle_rad)) * (k @ k)


# --------------------------------------------------------------------------
# distortion


def distort(points, coeffs: DistortionCoefficients) -> np.ndarray:
    """Forward Brown-Conrady map on normalized image coordinates ``(..., 2)``."""
    p = np.asarray(points, dtype=np.float64)
    x, y = p[..., 0], p[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + coeffs.k1 * r2 + coeffs.k2 * r2 * r2
    xd = x * radial + 2.0 * coeffs.p1 * x * y + coeffs.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + coeffs.p1 * (r2 + 2.0 * y * y) + 2.0 * coeffs.p2 * x * y
    return np.stack([xd, yd], axis=-1)


def _distort_jacobian(x, y, c: DistortionCoefficients):
    r2 = x * x + y * y
    radial = 1.0 + c.k1 * r2 + c.k2 * r2 * r2
    dr = c.k1 + 2.0 * c.k2 * r2  # d(radial)/dx = 2 x dr
    jxx = radial + 2.0 * x * x * dr + 2.0 * c.p1 * y + 6.0 * c.p2 * x
    jxy = 2.0 * x * y * dr + 2.0 * c.p1 * x + 2.0 * c.p2 * y
    jyx = 2.0 * x * y * dr + 2.0 * c.p1 * x + 2.0 * c.p2 * y
    jyy = radial + 2.0 * y * y * dr + 6.0 * c.p1 * y + 2.0 * c.p2 * x
    return jxx, jxy, jyx, jyy


def undistort(points, coeffs: DistortionCoefficients, tol: float = 1e-6, max_iters: int = 10) -> np.ndarray:
    """Invert :func:`distort` with damped Newton iterations.

    A point has converged once its residual and its Newton correction (the
    error estimate in undistorted coordinates, which strong barrel distortion
    stretches relative to the residual) are both below ``tol``; that final
    correction is still applied. Raises NonConvergence otherwise after
    ``max_iters`` steps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.asarray(points, dtype=np.float64)
    if coeffs.is_zero:
        return q.copy()
    shape = q.shape
    q = q.reshape(-1, 2)
    x = q.copy()
    resid = distort(x, coeffs) - q
    for _ in range(max_iters):
        jxx, jxy, jyx, jyy = _distort_jacobian(x[:, 0], x[:, 1], coeffs)
        det = jxx * jyy - jxy * jyx
        det = np.where(np.abs(det) < 1e-15, 1e-15, det)
        step = np.stack([(jyy * resid[:, 0] - jxy * resid[:, 1]) / det,
                         (-jyx * resid[:, 0] + jxx * resid[:, 1]) / det], axis=-1)
        err = np.max(np.abs(resid), axis=-1)
        converged = (err <= tol) & (np.max(np.abs(step), axis=-1) <= tol)
        active = ~converged
        if converged.all():
            x = x - step
            resid = distort(x, coeffs) - q
            break
        # Halve the step wherever a full Newton step increases the residual.
        scale = np.ones(len(x))
        for _ in range(4):
            trial = x - scale[:, None] * step
            trial_resid = distort(trial, coeffs) - q
            worse = np.linalg.norm(trial_resid, axis=-1) > np.linalg.norm(resid, axis=-1)
            if not (worse & active).any():
                break
            scale = np.where(worse & active, scale * 0.5, scale)
        x, resid = trial, trial_resid
    err = np.max(np.abs(resid), axis=-1)
    if np.any(~np.isfinite(err)) or np.any(err > tol):
        bad = int(np.sum(~(err <= tol)))
        raise NonConvergence(f"undistort did not converge for {bad} point(s); max residual {np.nanmax(err):.3g}")
    return x.reshape(shape)


# --------------------------------------------------------------------------
# rays


def ray_sphere(origins, directions, radius: float = ROI_RADIUS):
    """Analytic ray/sphere intersection. Returns ``(near, far, hit)``; near clamped at 0."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    b = np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = -b + root
    hit &= far > 0
    return near, far, hit


def pixel_directions(camera: CameraModel, pixels, jitter=(0.5, 0.5), tol: float = 1e-9, max_iters: int = 10):
    """Unit world directions for continuous pixel positions ``pixels + jitter`` ``(N, 2)``.

    The undistortion tolerance is in normalized coordinates, so it is scaled
    by the focal length in pixels; 1e-9 keeps reprojection far below 1e-4 px.
    """
    k = camera.intrinsics
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2) + np.asarray(jitter, dtype=np.float64)
    nd = np.stack([(uv[:, 0] - k.cx) / k.fx, (uv[:, 1] - k.cy) / k.fy], axis=-1)
    n = undistort(nd, camera.distortion, tol=tol, max_iters=max_iters)
    d = np.concatenate([n, np.ones((len(n), 1))], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ camera.pose.rotation.T


def camera_rays(camera: CameraModel, pixels, jitter=(0.5, 0.5), roi_radius: float = ROI_RADIUS):
    """Vectorized ray generation: ``(origins, directions, near, far, hit)``."""
    dirs = pixel_directions(camera, pixels, jitter)
    origins = np.broadcast_to(camera.pose.translation, dirs.shape).copy()
    near, far, hit = ray_sphere(origins, dirs, roi_radius)
    return origins, dirs, near, far, hit


def frame_pixels(width: int, height: int, stride: int = 1) -> np.ndarray:
    """Integer ``(col, row)`` coordinates of a frame in row-major order."""
    rows, cols = np.meshgrid(np.arange(0, height, stride), np.arange(0, width, stride), indexing="ij")
    return np.stack([cols.ravel(), rows.ravel()], axis=-1)


def pixel_to_ray(camera: CameraModel, pixel, jitter=(0.5, 0.5), roi_radius: float = ROI_RADIUS) -> Ray:
    px = np.asarray(pixel, dtype=np.float64)
    k = camera.intrinsics
    if not (0 <= px[0] <= k.width and 0 <= px[1] <= k.height):
        raise InvalidSpec(f"pixel {tuple(px)} outside sensor bounds")
    o, d, near, far, hit = camera_rays(camera, px[None], jitter, roi_radius)
    if not hit[0]:
        raise MissesROI(f"ray through pixel {tuple(px)} misses the region of interest")
    return Ray(o[0], d[0], float(near[0]), float(far[0]))


def project(camera: CameraModel, points) -> np.ndarray:
    """World points ``(..., 3)`` to continuous pixel positions ``(..., 2)``."""
    p = np.asarray(points, dtype=np.float64)
    cam = (p - camera.pose.translation) @ camera.pose.rotation
    n = cam[..., :2] / cam[..., 2:3]
    dn = distort(n, camera.distortion)
    k = camera.intrinsics
    return np.stack([dn[..., 0] * k.fx + k.cx, dn[..., 1] * k.fy + k.cy], axis=-1)


def corner_radius(intrinsics: Intrinsics, margin: float = 1.05) -> float:
    """Largest normalized radius reached on the sensor, with a small margin."""
    k = intrinsics
    xs = np.array([0.0, k.width]) - k.cx
    ys = np.array([0.0, k.height]) - k.cy
    return float(margin * np.sqrt(np.max(xs**2) / k.fx**2 + np.max(ys**2) / k.fy**2))


# --------------------------------------------------------------------------
# star-topology rig


def compose_star_pose(reference_pose: Pose, stereo_extrinsic: Pose) -> Pose:
    """World pose of a secondary sensor calibrated against the reference camera.

    ``stereo_extrinsic`` maps secondary-camera coordinates into the reference
    camera frame.
    """
    pose = reference_pose.compose(stereo_extrinsic)
    problem = _check_rotation(pose.rotation)
    if problem:
        raise PoseCompositionError(problem)
    return pose


def relative_pose(reference_pose: Pose, world_pose: Pose) -> Pose:
    """Inverse of :func:`compose_star_pose`: recover the stereo extrinsic."""
    return reference_pose.inverse().compose(world_pose)
