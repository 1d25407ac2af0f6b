"""Pinhole depth rendering by sphere tracing the analytic SDF oracle,
plus the rectangular occlusion generator used by the robustness protocol."""

from dataclasses import dataclass

import numpy as np

from ..errors import DataError, StructuralError
from ..geometry import Pose, look_at
from ..rng import substream

HIT_THRESHOLD = 1e-4
STEP_RELAXATION = 0.9
MAX_STEPS = 256


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise StructuralError("focal lengths must be positive")
        return self

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["fx"], doc["fy"], doc["cx"], doc["cy"]).validate()


def default_intrinsics(width, height, fov_deg=50.0):
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


@dataclass
class DepthImage:
    """Per-pixel z-depth (meters, 0 where invalid) with the camera model.

    `camera_pose` maps canonical-frame points into the camera frame.
    """

    depth: np.ndarray  # (H, W) float64
    mask: np.ndarray  # (H, W) bool
    intrinsics: Intrinsics
    camera_pose: Pose

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def height(self):
        return self.depth.shape[0]

    def validate(self):
        if self.depth.shape != self.mask.shape:
            raise StructuralError("depth and mask shapes differ")
        if (self.depth[self.mask] <= 0).any():
            raise StructuralError("masked pixels must have positive depth")
        self.intrinsics.validate()
        return self

    def copy(self):
        return DepthImage(self.depth.copy(), self.mask.copy(), self.intrinsics, self.camera_pose)


def render_depth(shape, camera_pose, intrinsics, resolution, noise_sigma=0.0, seed=0):
    """Sphere-trace the shape's SDF to a DepthImage at (width, height).

    Depth is the camera-frame z coordinate of the first hit, so lifting a
    pixel through the intrinsics reproduces the hit point exactly.
    """
    width, height = resolution
    intrinsics.validate()
    rot = camera_pose.matrix()
    origin = -rot.T @ camera_pose.translation  # camera center, canonical frame
    if np.linalg.norm(origin) <= shape.bounding_radius():
        raise StructuralError("camera must be outside the shape's bounding sphere")

    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    rays_cam = np.stack(
        [(uu - intrinsics.cx) / intrinsics.fx, (vv - intrinsics.cy) / intrinsics.fy, np.ones_like(uu)],
        axis=-1,
    ).reshape(-1, 3)
    ray_norms = np.linalg.norm(rays_cam, axis=1)
    dirs = (rays_cam / ray_norms[:, None]) @ rot  # R^T applied row-wise

    n = dirs.shape[0]
    t = np.zeros(n)
    t_max = np.linalg.norm(origin) + shape.bounding_radius() + 0.5
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    # skip ahead to the bounding sphere to save steps
    b = dirs @ origin
    disc = b * b - (origin @ origin - shape.bounding_radius() ** 2)
    misses = disc < 0
    active[misses] = False
    t_enter = -b - np.sqrt(np.maximum(disc, 0.0))
    t[active] = np.maximum(t_enter[active], 0.0)

    for _ in range(MAX_STEPS):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        pts = origin + t[idx, None] * dirs[idx]
        d = shape.sdf(pts)
        hits_now = d < HIT_THRESHOLD
        hit[idx[hits_now]] = True
        active[idx[hits_now]] = False
        t[idx] += STEP_RELAXATION * np.maximum(d, 0.0)
        escaped = t[idx] > t_max
        active[idx[escaped]] = False

    # polish hits onto the zero level set with damped Newton along the ray
    idx = np.flatnonzero(hit)
    h = 1e-6
    for _ in range(6):
        pts = origin + t[idx, None] * dirs[idx]
        d = shape.sdf(pts)
        slope = (shape.sdf(pts + h * dirs[idx]) - d) / h
        # approaching from outside, slope < 0; Newton step t -= d / slope
        t[idx] += d / np.clip(-slope, 0.25, None)

    depth = np.zeros(n)
    depth[hit] = t[hit] / ray_norms[hit]
    if noise_sigma > 0:
        rng = substream(seed, "depth-noise")
        depth[hit] += rng.normal(0.0, noise_sigma, size=int(hit.sum()))
        np.clip(depth, 1e-6, None, out=depth)
        depth[~hit] = 0.0
    return DepthImage(
        depth.reshape(height, width), hit.reshape(height, width), intrinsics, camera_pose
    ).validate()


def hemisphere_camera(rng, distance=(1.8, 2.6), elevation_deg=(15.0, 70.0)):
    """Random camera on the upper viewing hemisphere, looking at the origin."""
    azimuth = rng.uniform(0.0, 2 * np.pi)
    elevation = np.radians(rng.uniform(*elevation_deg))
    d = rng.uniform(*distance)
    eye = d * np.array(
        [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
    )
    return look_at(eye)


def occlude(depth, ratio, seed):
    """Invalidate a random axis-aligned rectangle covering `ratio` of the
    masked pixels (within 2%). ratio == 0 is an internal bypass returning
    an unchanged copy."""
    if ratio == 0:
        return depth.copy()
    if not 0.05 <= ratio <= 0.85:
        raise StructuralError(f"occlusion ratio {ratio} outside [0.05, 0.85]")
    rng = substream(seed, "occlude")
    mask = depth.mask
    valid = int(mask.sum())
    if valid == 0:
        raise DataError("cannot occlude an empty mask")
    target = ratio * valid
    tol = 0.02 * valid
    rows, cols = np.nonzero(mask)
    for _ in range(64):
        k = rng.integers(len(rows))
        cy, cx = rows[k], cols[k]
        aspect = np.exp(rng.uniform(-0.7, 0.7))
        rect = _fit_rectangle(mask, cy, cx, aspect, target, tol)
        if rect is not None:
            y0, y1, x0, x1 = rect
            out = depth.copy()
            out.depth[y0:y1, x0:x1] = 0.0
            out.mask[y0:y1, x0:x1] = False
            return out
    raise DataError(f"could not place an occluder covering {ratio:.0%} of the mask")


def _fit_rectangle(mask, cy, cx, aspect, target, tol):
    """Binary-search a half-size so the rectangle at (cy, cx) covers ~target
    masked pixels. Returns (y0, y1, x0, x1) or None."""
    h, w = mask.shape

    def count(s):
        y0 = max(0, int(np.floor(cy - s * aspect)))
        y1 = min(h, int(np.ceil(cy + s * aspect)) + 1)
        x0 = max(0, int(np.floor(cx - s / aspect)))
        x1 = min(w, int(np.ceil(cx + s / aspect)) + 1)
        return mask[y0:y1, x0:x1].sum(), (y0, y1, x0, x1)

    lo, hi = 0.0, float(max(h, w))
    best = None
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        c, rect = count(mid)
        if abs(c - target) <= tol:
            best = rect
            break
        if c < target:
            lo = mid
        else:
            hi = mid
    return best
