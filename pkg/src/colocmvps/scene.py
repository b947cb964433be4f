"""Cameras, images and per-pixel surface state in the reference frame.

Pixel convention: pixel centres sit at integer coordinates ``(u, v)`` with
``u`` the column and ``v`` the row, origin at the top-left pixel centre.
Flat pixel index ``k = v * width + u``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidProjection(ValueError):
    """Raised when a point is behind the camera or at its centre."""


@dataclass(frozen=True)
class Camera:
    """Calibrated perspective camera with a point light at its centre.

    Parameters
    ----------
    projection : (3, 4) array
        World to homogeneous image coordinates.
    center : (3,) array
        Camera centre, which is also the light position.
    unit_depth_matrix, unit_depth_translation
        Affine map ``p -> A @ [u, v, 1] + b`` taking a pixel to its point on
        the unit-depth plane in world coordinates.
    width, height : int
        Image size in pixels.
    """

    projection: np.ndarray
    center: np.ndarray
    unit_depth_matrix: np.ndarray
    unit_depth_translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        for name, shape in (
            ("projection", (3, 4)),
            ("center", (3,)),
            ("unit_depth_matrix", (3, 3)),
            ("unit_depth_translation", (3,)),
        ):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.width < 2 or self.height < 2:
            raise ValueError("image must be at least 2x2")
        # the centre must not lie on the unit-depth plane
        ray = self.unit_depth_translation - self.center
        if np.linalg.norm(ray) < 1e-12 and np.linalg.norm(self.unit_depth_matrix) < 1e-12:
            raise ValueError("degenerate unit-depth map")

    @classmethod
    def from_krt(cls, K, R, t, width: int, height: int) -> "Camera":
        """Build from intrinsics ``K`` and world-to-camera pose ``x_c = R x + t``."""
        K = np.asarray(K, dtype=np.float64)
        R = np.asarray(R, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64).reshape(3)
        P = K @ np.hstack([R, t[:, None]])
        center = -R.T @ t
        A = R.T @ np.linalg.inv(K)
        return cls(P, center, A, center, int(width), int(height))

    @classmethod
    def look_at(
        cls,
        eye,
        target,
        up=(0.0, 1.0, 0.0),
        focal: float = 256.0,
        width: int = 64,
        height: int = 64,
        principal=None,
    ) -> "Camera":
        """Pinhole camera at ``eye`` looking at ``target``.

        Camera axes follow the usual vision convention: x right, y down,
        z forward.
        """
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        t = -R @ eye
        if principal is None:
            principal = ((width - 1) / 2.0, (height - 1) / 2.0)
        K = np.array(
            [[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]]
        )
        return cls.from_krt(K, R, t, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_grid(self) -> np.ndarray:
        """All pixel centres as an ``(H*W, 2)`` array of ``(u, v)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)

    def unit_depth_points(self, pixels) -> np.ndarray:
        """Map pixels ``(..., 2)`` to their unit-depth-plane world points."""
        pixels = np.asarray(pixels, dtype=np.float64)
        homo = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1)
        return homo @ self.unit_depth_matrix.T + self.unit_depth_translation

    def rays(self, pixels) -> np.ndarray:
        """Ray vectors ``v = P+ p - o`` such that ``x = z v + o``."""
        return self.unit_depth_points(pixels) - self.center


@dataclass(frozen=True)
class ViewImage:
    """Linear-radiometry single-channel image bound to its camera."""

    intensities: np.ndarray
    camera: Camera

    def __post_init__(self):
        img = np.asarray(self.intensities, dtype=np.float64)
        if img.ndim == 3:
            img = to_luminance(img)
        if img.shape != self.camera.shape:
            raise ValueError(
                f"image shape {img.shape} does not match camera {self.camera.shape}"
            )
        if not np.all(np.isfinite(img)) or np.any(img < 0):
            raise ValueError("intensities must be finite and non-negative")
        img = img.copy()
        img.setflags(write=False)
        object.__setattr__(self, "intensities", img)


def to_luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.2126 + rgb[..., 1] * 0.7152 + rgb[..., 2] * 0.0722


@dataclass(frozen=True)
class Dataset:
    views: tuple
    reference_index: int = 0
    mask: np.ndarray | None = None

    def __post_init__(self):
        views = tuple(self.views)
        if not views:
            raise ValueError("dataset needs at least one view")
        if not 0 <= self.reference_index < len(views):
            raise ValueError("reference_index out of range")
        object.__setattr__(self, "views", views)
        if self.mask is None:
            mask = self.reference.intensities > 0
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != self.reference.camera.shape:
                raise ValueError("mask shape does not match the reference view")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def reference(self) -> ViewImage:
        return self.views[self.reference_index]

    def __len__(self):
        return len(self.views)

    def ordered(self) -> list:
        """Views with the reference first."""
        idx = [self.reference_index] + [
            i for i in range(len(self.views)) if i != self.reference_index
        ]
        return [self.views[i] for i in idx]


@dataclass
class SurfaceEstimate:
    """Depth and unit-normal maps over the reference view.

    ``depth`` is the ray parameter ``z`` of ``x = z (P+ p - o) + o``, i.e.
    camera-axis depth for a standard pinhole.
    """

    depth: np.ndarray
    normals: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.normals.shape != self.depth.shape + (3,):
            raise ValueError("normals must be (H, W, 3) matching depth")
        if self.mask.shape != self.depth.shape:
            raise ValueError("mask must match depth")

    def check(self, z_min: float | None = None, z_max: float | None = None, tol=1e-9):
        m = self.mask
        norms = np.linalg.norm(self.normals[m], axis=-1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ValueError("normals are not unit length on the mask")
        z = self.depth[m]
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite depth on the mask")
        if z_min is not None and np.any(z < z_min - tol):
            raise ValueError("depth below z_min")
        if z_max is not None and np.any(z > z_max + tol):
            raise ValueError("depth above z_max")

    def points(self, camera: Camera) -> np.ndarray:
        """World points for every pixel, ``(H, W, 3)``."""
        rays = camera.rays(camera.pixel_grid()).reshape(self.depth.shape + (3,))
        return self.depth[..., None] * rays + camera.center


def unproject(camera: Camera, pixel, z: float) -> np.ndarray:
    """World point at ray parameter ``z`` through ``pixel``.

    ``x = z (P+ p - o) + o``; ``z = 1`` lands on the unit-depth plane and
    ``z = 0`` collapses to the camera centre.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    base = camera.unit_depth_points(pixel)
    return z * (base - camera.center) + camera.center


def project(camera: Camera, point) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64)
    h = camera.projection[:, :3] @ point + camera.projection[:, 3]
    if not h[2] > 1e-12 * max(1.0, float(np.abs(h[:2]).max())):
        raise InvalidProjection("point is behind the camera or at its centre")
    return h[:2] / h[2]


def project_many(projection: np.ndarray, points: np.ndarray):
    """Vectorised projection; returns ``(uv, valid)`` with ``valid`` for w > 0."""
    h = points @ projection[:, :3].T + projection[:, 3]
    w = h[..., 2]
    valid = w > 1e-12
    safe = np.where(valid, w, 1.0)
    return h[..., :2] / safe[..., None], valid


def sample_bilinear(image, pixel):
    """Bilinear lookup at a continuous pixel; ``None`` when out of bounds."""
    img = image.intensities if isinstance(image, ViewImage) else np.asarray(image)
    val, ok = bilinear_many(img, np.asarray(pixel, dtype=np.float64)[None, :])
    return float(val[0]) if ok[0] else None


BORDER_EPS = 1e-9


def bilinear_many(img: np.ndarray, uv: np.ndarray):
    """Vectorised bilinear sampling of ``img`` at ``uv`` of shape ``(..., 2)``.

    Returns ``(values, in_bounds)``; values are 0 where out of bounds.
    """
    h, w = img.shape
    u = uv[..., 0]
    v = uv[..., 1]
    # tolerate round-off on the border so reprojected edge nodes stay valid
    eps = BORDER_EPS
    ok = (u >= -eps) & (u <= w - 1 + eps) & (v >= -eps) & (v <= h - 1 + eps)
    u = np.where(ok, np.clip(u, 0.0, w - 1), 0.0)
    v = np.where(ok, np.clip(v, 0.0, h - 1), 0.0)
    u0 = np.minimum(np.floor(u).astype(np.intp), w - 2)
    v0 = np.minimum(np.floor(v).astype(np.intp), h - 2)
    fu = u - u0
    fv = v - v0
    flat = img.ravel()
    i00 = v0 * w + u0
    a = flat[i00]
    b = flat[i00 + 1]
    c = flat[i00 + w]
    d = flat[i00 + w + 1]
    top = a + fu * (b - a)
    bot = c + fu * (d - c)
    val = top + fv * (bot - top)
    return np.where(ok, val, 0.0), ok


def incident_angle(camera: Camera, point, normal):
    """Angle between ``normal`` and the direction to the camera/light.

    Returns ``None`` for back-facing configurations (cosine <= 0).
    """
    d = camera.center - np.asarray(point, dtype=np.float64)
    dist = np.linalg.norm(d)
    if dist == 0:
        raise ValueError("point coincides with the camera centre")
    cos = float(np.dot(normal, d) / dist)
    if cos <= 0:
        return None
    return float(np.arccos(min(cos, 1.0)))


def neighbors4(k: int, mask: np.ndarray) -> list:
    """In-mask 4-neighbours of flat pixel index ``k`` (up, down, left, right)."""
    h, w = mask.shape
    r, c = divmod(int(k), w)
    out = []
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w and mask[rr, cc]:
            out.append(rr * w + cc)
    return out


# (row, col) offsets in the order used throughout: up, down, left, right
NEIGHBOR_OFFSETS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def neighbor_table(mask: np.ndarray) -> np.ndarray:
    """``(H*W, 4)`` flat neighbour indices, -1 where absent or unmasked."""
    h, w = mask.shape
    rows, cols = np.mgrid[0:h, 0:w]
    table = np.full((h * w, 4), -1, dtype=np.intp)
    flat_mask = mask.ravel()
    for i, (dr, dc) in enumerate(NEIGHBOR_OFFSETS):
        rr = rows + dr
        cc = cols + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        idx = np.where(ok, rr * w + cc, 0).ravel()
        ok = ok.ravel() & flat_mask[idx] & flat_mask
        table[:, i] = np.where(ok, idx, -1)
    return table


def ring_cameras(
    n_views: int,
    distance: float = 1.0,
    tilt_deg: float = 20.0,
    target=(0.0, 0.0, 0.0),
    focal: float = 256.0,
    width: int = 64,
    height: int = 64,
) -> list:
    """A reference camera on the +z axis plus ``n_views - 1`` on a ring.

    All cameras look at ``target`` from ``distance``; ring cameras are
    tilted ``tilt_deg`` off the axis and spread evenly in azimuth.
    """
    target = np.asarray(target, dtype=np.float64)
    cams = [
        Camera.look_at(target + [0, 0, distance], target, focal=focal, width=width, height=height)
    ]
    tilt = np.radians(tilt_deg)
    for i in range(n_views - 1):
        az = 2 * np.pi * i / max(n_views - 1, 1)
        eye = target + distance * np.array(
            [np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), np.cos(tilt)]
        )
        cams.append(Camera.look_at(eye, target, focal=focal, width=width, height=height))
    return cams
