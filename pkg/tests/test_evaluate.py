import csv

import numpy as np
import pytest

from dynamap.evaluate import (AlignmentError, compute_drift, evaluate_files,
                              write_report)
from dynamap.geometry import Pose, Twist, se3_exp
from dynamap.io import write_trajectory


def straight_trajectory(n=100, step=0.05):
    stamps = np.arange(n) * 0.1
    poses = [Pose(np.array([0, 0, 0, 1.0]), np.array([k * step, 0.0, 0.0]))
             for k in range(n)]
    return stamps, poses


def test_identical_trajectories_zero_drift():
    stamps, poses = straight_trajectory()
    rep = compute_drift(stamps, poses, stamps, poses)
    assert rep.atde_cm == 0.0 and rep.mtde_cm == 0.0


def test_constant_offset_absorbed_by_alignment():
    stamps, poses = straight_trajectory()
    offset = np.array([0.01, 0.0, 0.0])  # 1 cm
    shifted = [Pose(p.q, p.t + offset) for p in poses]
    rep = compute_drift(stamps, shifted, stamps, poses)
    assert rep.atde_cm < 1e-9 and rep.mtde_cm < 1e-9


def test_single_spike_atde_mtde():
    stamps, gt = straight_trajectory(100)
    est = [Pose(p.q, p.t.copy()) for p in gt]
    est[50] = Pose(est[50].q, est[50].t + np.array([0.0, 0.05, 0.0]))  # 5 cm
    rep = compute_drift(stamps, est, stamps, gt)
    assert abs(rep.mtde_cm - 5.0) < 1e-9
    assert abs(rep.atde_cm - 0.05) < 1e-9  # 5 cm / 100 frames
    assert rep.mtde_cm >= rep.atde_cm >= 0.0


def test_invariant_to_global_rigid_transform():
    rng = np.random.default_rng(0)
    stamps, gt = straight_trajectory(50)
    est = [Pose(p.q, p.t + rng.normal(0, 0.01, 3)) for p in gt]
    base = compute_drift(stamps, est, stamps, gt)
    g = se3_exp(Twist(rng.normal(0, 1, 3), rng.uniform(-5, 5, 3)))
    est_g = [g.compose(p) for p in est]
    gt_g = [g.compose(p) for p in gt]
    moved = compute_drift(stamps, est_g, stamps, gt_g)
    assert abs(base.atde_cm - moved.atde_cm) < 1e-9
    assert abs(base.mtde_cm - moved.mtde_cm) < 1e-9
    assert np.max(np.abs(base.drift_cm - moved.drift_cm)) < 1e-9


def test_mtde_at_least_atde_random():
    rng = np.random.default_rng(1)
    stamps, gt = straight_trajectory(40)
    est = [Pose(p.q, p.t + rng.normal(0, 0.02, 3)) for p in gt]
    rep = compute_drift(stamps, est, stamps, gt)
    assert rep.mtde_cm >= rep.atde_cm >= 0.0


def test_alignment_error_on_disjoint_stamps():
    stamps, poses = straight_trajectory(10)
    with pytest.raises(AlignmentError):
        compute_drift(stamps, poses, stamps + 500.0, poses)


def test_association_tolerates_jitter():
    stamps, poses = straight_trajectory(30)
    jittered = stamps + 0.01  # well inside half the 0.1 s period
    rep = compute_drift(jittered, poses, stamps, poses)
    assert rep.atde_cm == 0.0


def test_evaluate_files_and_report(tmp_path):
    stamps, gt = straight_trajectory(30)
    est = [Pose(p.q, p.t + np.array([0, 0.002, 0])) for p in gt]
    est[7] = Pose(est[7].q, est[7].t + np.array([0.03, 0, 0]))
    write_trajectory(tmp_path / "est.txt", stamps, est)
    write_trajectory(tmp_path / "gt.txt", stamps, gt)
    rep = evaluate_files(tmp_path / "est.txt", tmp_path / "gt.txt")
    fig = write_report(rep, tmp_path / "drift.csv")
    assert (tmp_path / "drift.csv").exists()
    assert (tmp_path / "drift.png").exists()
    assert str(fig).endswith("drift.png")
    with open(tmp_path / "drift.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["timestamp", "drift_cm"]
    assert len([r for r in rows if len(r) == 2 and r[0] != "timestamp"
                and not r[0].startswith(("atde", "mtde"))]) == 30
    assert any(r and r[0] == "atde_cm" for r in rows)
