"""Depth lifting and canonical-frame initialization.

The learned prior lives in a canonical frame; observations arrive in the
camera frame. A pluggable estimator produces a noisy initial pose into
*its own* canonical frame; `frame_align` measures the fixed transform
between that frame and the prior's frame by feeding the complete template
cloud through the estimator once.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, StructuralError
from .geometry import Pose, rotation_about_axis
from .rng import substream


@dataclass
class PointCloud:
    points: np.ndarray
    frame: str = "camera"  # camera | canonical | estimator-canonical

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def validate(self):
        if len(self.points) == 0:
            raise StructuralError("point cloud is empty")
        if not np.isfinite(self.points).all():
            raise StructuralError("point cloud has non-finite entries")
        return self


def lift_depth(depth):
    """Back-project the masked pixels of a DepthImage to the camera frame."""
    mask = depth.mask
    if not mask.any():
        raise DataError("depth image has an empty mask")
    ys, xs = np.nonzero(mask)
    d = depth.depth[ys, xs]
    intr = depth.intrinsics
    pts = np.stack(
        [d * (xs - intr.cx) / intr.fx, d * (ys - intr.cy) / intr.fy, d], axis=1
    )
    return PointCloud(pts, "camera").validate()


# ---------------------------------------------------------------------------
# pose estimators


class PcaEstimator:
    """Axis alignment by PCA with third-moment sign disambiguation."""

    name = "pca"
    own_frame = True  # outputs live in the estimator's own canonical frame

    def estimate(self, points, template_points=None):
        points = np.asarray(points, dtype=np.float64)
        mu = points.mean(axis=0)
        centered = points - mu
        cov = centered.T @ centered / len(points)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals = evals[order]
        evecs = evecs[:, order]
        if evals[0] <= 0 or evals[2] / evals[0] < 1e-12:
            axis = int(np.argmin(evals))
            raise StructuralError(
                f"degenerate point covariance: principal axis {axis} has no extent"
            )
        # resolve each axis sign by the skewness of projections; ties keep +
        proj = centered @ evecs
        skew = (proj**3).sum(axis=0)
        flip = skew < 0
        evecs[:, flip] *= -1.0
        skew = np.abs(skew)
        if np.linalg.det(evecs) < 0:
            weakest = int(np.argmin(skew))
            evecs[:, weakest] *= -1.0
        rot = evecs.T  # x_est = E^T (x - mu)
        return Pose.from_matrix(rot, -rot @ mu).validate()


class IcpEstimator:
    """Point-to-point ICP against the prior's template cloud, seeded by PCA.

    Registers observations directly into the template's frame, so its
    canonical frame coincides with the prior's.
    """

    name = "icp"
    own_frame = False

    def __init__(self, max_iterations=50, rejection_factor=3.0, tol=1e-6):
        self.max_iterations = max_iterations
        self.rejection_factor = rejection_factor
        self.tol = tol

    def estimate(self, points, template_points=None):
        if template_points is None:
            raise StructuralError("ICP needs the prior template cloud")
        points = np.asarray(points, dtype=np.float64)
        target = np.asarray(template_points, dtype=np.float64)
        init_src = PcaEstimator().estimate(points)
        init_tgt = PcaEstimator().estimate(target)
        # seed: map camera -> source PCA frame -> target PCA frame ~ canonical
        pose = init_tgt.inverse().compose(init_src)
        tree = cKDTree(target)
        prev = np.inf
        for _ in range(self.max_iterations):
            moved = pose.transform(points)
            dists, idx = tree.query(moved, k=1)
            keep = dists <= self.rejection_factor * np.median(dists)
            if keep.sum() < 3:
                break
            src = moved[keep]
            dst = target[idx[keep]]
            resid = float(np.mean(dists[keep] ** 2))
            rot, t = _kabsch(src, dst)
            step = Pose.from_matrix(rot, t)
            pose = step.compose(pose)
            if prev < np.inf and abs(prev - resid) <= self.tol * max(prev, 1e-30):
                break
            prev = resid
        return pose.validate()


class NoisyOracleEstimator:
    """Ground-truth pose perturbed by a fixed-magnitude random rotation and
    translation; reproduces a controlled initialization-error level."""

    name = "noisy-oracle"
    own_frame = False

    def __init__(self, gt_pose, rot_noise_deg=0.0, trans_noise=0.0, seed=0):
        self.gt_pose = gt_pose
        self.rot_noise_deg = rot_noise_deg
        self.trans_noise = trans_noise
        self.seed = seed

    def estimate(self, points, template_points=None):
        rng = substream(self.seed, "pose-noise")
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        delta_rot = rotation_about_axis(axis, np.radians(self.rot_noise_deg))
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        rot = delta_rot @ self.gt_pose.matrix()
        t = self.gt_pose.translation + self.trans_noise * direction
        return Pose.from_matrix(rot, t).validate()


def _kabsch(src, dst):
    """Least-squares rigid transform aligning src onto dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    diag = np.diag([1.0, 1.0, d])
    rot = vt.T @ diag @ u.T
    return rot, mu_d - rot @ mu_s


def estimate_pose(estimator, cloud, template_points=None):
    """Pose mapping the cloud's (camera) frame into the estimator's
    canonical frame."""
    cloud.validate()
    return estimator.estimate(cloud.points, template_points)


def frame_align(estimator, template_cloud, cache=None, category=None):
    """Fixed transform from the estimator's canonical frame to the prior's.

    Computed by running the complete template cloud (already in the
    prior's frame) through the estimator once and inverting the result;
    cached per (estimator name, category) when a cache dict is supplied.
    """
    key = (getattr(estimator, "name", estimator.__class__.__name__), category)
    if cache is not None and key in cache:
        return cache[key]
    template_cloud.validate()
    pose = estimator.estimate(template_cloud.points, template_cloud.points)
    correction = pose.inverse()
    if cache is not None:
        cache[key] = correction
    return correction


def canonicalize(estimator, cloud, template_points=None, template_cloud=None, cache=None,
                 category=None):
    """Full initial pose: camera frame -> prior canonical frame."""
    pose = estimate_pose(estimator, cloud, template_points)
    if getattr(estimator, "own_frame", False):
        if template_cloud is None:
            raise StructuralError("estimator needs frame alignment but no template given")
        correction = frame_align(estimator, template_cloud, cache=cache, category=category)
        pose = correction.compose(pose)
    return pose
