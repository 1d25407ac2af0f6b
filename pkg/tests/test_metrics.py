import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapefit import metrics
from shapefit.errors import StructuralError
from shapefit.geometry import Pose, random_rotation, rotation_about_axis
from shapefit.rng import substream

from oracles import brute_force_chamfer, brute_force_fscore, quat_angle_deg


def test_chamfer_identical_clouds_zero():
    pts = substream(0, "a").uniform(-1, 1, (100, 3))
    assert metrics.chamfer(pts, pts) == 0.0


def test_chamfer_hand_computed():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[0.01, 0.0, 0.0]])
    assert metrics.chamfer(a, b) == pytest.approx(2.0, abs=1e-12)


def test_chamfer_matches_brute_force_bit_exact():
    rng = substream(1, "clouds")
    for _ in range(50):
        a = rng.uniform(-1, 1, (200, 3))
        b = rng.uniform(-1, 1, (200, 3))
        assert metrics.chamfer(a, b) == brute_force_chamfer(a, b)


def test_chamfer_symmetry():
    rng = substream(2, "sym")
    a = rng.uniform(-1, 1, (150, 3))
    b = rng.uniform(-1, 1, (130, 3))
    assert abs(metrics.chamfer(a, b) - metrics.chamfer(b, a)) < 1e-12


def test_chamfer_empty_raises():
    with pytest.raises(StructuralError):
        metrics.chamfer(np.zeros((0, 3)), np.zeros((5, 3)))


def test_fscore_identical_clouds():
    pts = substream(3, "f").uniform(-1, 1, (80, 3))
    assert metrics.fscore(pts, pts, 0.01) == 1.0
    assert metrics.fscore(pts, pts, 1e-9) == 1.0


def test_fscore_disjoint_zero():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert metrics.fscore(a, b, 0.01) == 0.0


def test_fscore_hand_computed():
    a = np.array([[0.0, 0, 0], [0.005, 0, 0]])
    b = np.array([[0.0, 0, 0]])
    assert metrics.fscore(a, b, 0.01) == 1.0


def test_fscore_strict_inequality():
    a = np.array([[0.0, 0, 0]])
    b = np.array([[0.01, 0, 0]])
    # distance exactly tau: strict < excludes the match
    assert metrics.fscore(a, b, 0.01) == 0.0


def test_fscore_matches_brute_force():
    rng = substream(4, "fb")
    for _ in range(50):
        a = rng.uniform(-1, 1, (200, 3))
        b = rng.uniform(-1, 1, (200, 3))
        tau = rng.uniform(0.05, 0.5)
        assert metrics.fscore(a, b, tau) == brute_force_fscore(a, b, tau)


def test_metrics_rigid_invariance():
    rng = substream(5, "rigid")
    a = rng.uniform(-1, 1, (120, 3))
    b = rng.uniform(-1, 1, (110, 3))
    cd0 = metrics.chamfer(a, b)
    f0 = metrics.fscore(a, b, 0.2)
    for _ in range(5):
        rot = random_rotation(rng)
        t = rng.uniform(-1, 1, 3)
        a2 = a @ rot.T + t
        b2 = b @ rot.T + t
        assert metrics.chamfer(a2, b2) == pytest.approx(cd0, abs=1e-9)
        assert metrics.fscore(a2, b2, 0.2) == f0


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=60), st.integers(min_value=0, max_value=2**31))
def test_fscore_self_is_one_property(n, seed):
    pts = substream(seed, "hyp").uniform(-1, 1, (n, 3))
    assert metrics.fscore(pts, pts, 0.001) == 1.0


def test_pose_error_identity():
    p = Pose.identity()
    assert metrics.pose_error(p, p) == (0.0, 0.0)


def test_pose_error_ninety_about_z():
    gt = Pose.identity()
    est = Pose.from_matrix(rotation_about_axis([0, 0, 1], np.pi / 2), np.zeros(3))
    deg, trans = metrics.pose_error(est, gt)
    assert deg == pytest.approx(90.0, abs=1e-9)
    assert trans == 0.0


def test_pose_error_matches_quaternion_oracle():
    rng = substream(6, "quat")
    for _ in range(30):
        ra = random_rotation(rng)
        rb = random_rotation(rng)
        est = Pose.from_matrix(ra, rng.uniform(-1, 1, 3))
        gt = Pose.from_matrix(rb, rng.uniform(-1, 1, 3))
        deg, _ = metrics.pose_error(est, gt)
        assert deg == pytest.approx(quat_angle_deg(ra, rb), abs=1e-8)


def test_normalize_pair_scales_by_gt_cube():
    rng = substream(7, "norm")
    gt = rng.uniform(-2, 2, (100, 3))
    pred = gt + 0.1
    p2, g2 = metrics.normalize_pair(pred, gt)
    side = (g2.max(axis=0) - g2.min(axis=0)).max()
    assert side == pytest.approx(1.0)


def test_eval_report_identical_clouds():
    rng = substream(8, "rep")
    report = metrics.EvalReport(tau=0.01)
    pts = rng.uniform(-1, 1, (500, 3))
    rec = report.add("shape0", pts, pts)
    assert rec.chamfer_x1e4 == 0.0
    assert rec.f1 == 1.0
    doc = report.to_json()
    assert doc["count"] == 1
    assert "shape0" in report.table()
