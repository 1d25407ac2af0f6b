"""Point-cloud evaluation: bidirectional chamfer distance (x1e4) and
F-score at a distance threshold, plus pose error reporting.

Nearest neighbors come from a k-d tree, but distances are recomputed from
the matched pairs with plain vectorized arithmetic so results are
bit-identical to an O(N^2) scan.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import StructuralError

CHAMFER_SCALE = 1e4
DEFAULT_TAU = 0.01


def _check_cloud(pts, name):
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise StructuralError(f"{name} must be a non-empty (N, 3) point cloud")
    return pts


def _nn_sq_dists(a, b):
    """Squared distance from each point of `a` to its nearest point in `b`,
    recomputed exactly from the matched pairs."""
    tree = cKDTree(b)
    _, idx = tree.query(a, k=1)
    return np.sum((a - b[idx]) ** 2, axis=1)


def chamfer(a, b):
    """Bidirectional chamfer distance, squared-distance convention, x1e4."""
    a = _check_cloud(a, "cloud A")
    b = _check_cloud(b, "cloud B")
    return float((_nn_sq_dists(a, b).mean() + _nn_sq_dists(b, a).mean()) * CHAMFER_SCALE)


def fscore(pred, gt, tau=DEFAULT_TAU):
    """F1 of point matches within `tau` (strict inequality)."""
    pred = _check_cloud(pred, "prediction")
    gt = _check_cloud(gt, "ground truth")
    if tau <= 0:
        raise StructuralError("tau must be positive")
    tau_sq = tau * tau
    precision = float(np.mean(_nn_sq_dists(pred, gt) < tau_sq))
    recall = float(np.mean(_nn_sq_dists(gt, pred) < tau_sq))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def pose_error(est, gt):
    """(geodesic rotation error in degrees, translation error)."""
    r_est = est.matrix()
    r_gt = gt.matrix()
    cos = (np.trace(r_est.T @ r_gt) - 1.0) / 2.0
    deg = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    trans = float(np.linalg.norm(est.translation - gt.translation))
    return deg, trans


def normalize_pair(pred, gt):
    """Scale and center both clouds by the ground-truth bounding cube so a
    threshold of 0.01 reads as 1% of the cube side."""
    gt = _check_cloud(gt, "ground truth")
    pred = _check_cloud(pred, "prediction")
    lo = gt.min(axis=0)
    hi = gt.max(axis=0)
    center = (lo + hi) / 2
    side = float((hi - lo).max())
    if side <= 0:
        raise StructuralError("ground-truth cloud is degenerate")
    return (pred - center) / side, (gt - center) / side


@dataclass
class ShapeRecord:
    name: str
    chamfer_x1e4: float
    f1: float
    pose_deg: float | None = None
    pose_trans: float | None = None

    def to_json(self):
        return {
            "name": self.name,
            "chamfer_x1e4": self.chamfer_x1e4,
            "f1": self.f1,
            "pose_deg": self.pose_deg,
            "pose_trans": self.pose_trans,
        }


@dataclass
class EvalReport:
    """Aggregate metrics over a set of shapes."""

    tau: float = DEFAULT_TAU
    records: list = field(default_factory=list)

    def add(self, name, pred_points, gt_points, est_pose=None, gt_pose=None, normalize=True):
        pred, gt = (normalize_pair(pred_points, gt_points) if normalize
                    else (np.asarray(pred_points), np.asarray(gt_points)))
        deg = trans = None
        if est_pose is not None and gt_pose is not None:
            deg, trans = pose_error(est_pose, gt_pose)
        rec = ShapeRecord(name, chamfer(pred, gt), fscore(pred, gt, self.tau), deg, trans)
        self.records.append(rec)
        return rec

    @property
    def chamfer_x1e4(self):
        return float(np.mean([r.chamfer_x1e4 for r in self.records])) if self.records else 0.0

    @property
    def f1(self):
        return float(np.mean([r.f1 for r in self.records])) if self.records else 0.0

    def median_f1(self):
        return float(np.median([r.f1 for r in self.records])) if self.records else 0.0

    def median_pose(self):
        degs = [r.pose_deg for r in self.records if r.pose_deg is not None]
        trans = [r.pose_trans for r in self.records if r.pose_trans is not None]
        if not degs:
            return None, None
        return float(np.median(degs)), float(np.median(trans))

    def to_json(self):
        med_deg, med_trans = self.median_pose()
        return {
            "tau": self.tau,
            "chamfer_x1e4": self.chamfer_x1e4,
            "f1": self.f1,
            "median_f1": self.median_f1(),
            "median_pose_deg": med_deg,
            "median_pose_trans": med_trans,
            "count": len(self.records),
            "records": [r.to_json() for r in self.records],
        }

    def table(self):
        """Aligned text table, one row per shape plus a mean row."""
        header = f"{'shape':<24} {'CD(x1e4)':>10} {'F@' + format(self.tau, '.0%'):>8}"
        has_pose = any(r.pose_deg is not None for r in self.records)
        if has_pose:
            header += f" {'rot(deg)':>9} {'trans':>8}"
        lines = [header, "-" * len(header)]
        for r in self.records:
            line = f"{r.name:<24} {r.chamfer_x1e4:>10.3f} {r.f1:>8.3f}"
            if has_pose:
                deg = f"{r.pose_deg:>9.2f}" if r.pose_deg is not None else f"{'-':>9}"
                tr = f"{r.pose_trans:>8.4f}" if r.pose_trans is not None else f"{'-':>8}"
                line += f" {deg} {tr}"
            lines.append(line)
        mean = f"{'mean':<24} {self.chamfer_x1e4:>10.3f} {self.f1:>8.3f}"
        lines.append("-" * len(header))
        lines.append(mean)
        return "\n".join(lines)
