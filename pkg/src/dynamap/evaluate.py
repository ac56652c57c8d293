"""Trajectory drift evaluation against ground truth: per-frame translational
drift after rigid first-pose alignment, summarized as ATDE (mean) and MTDE
(max), both in centimeters. The report writer emits a per-frame CSV and a
drift-curve figure next to it."""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .geometry import Pose
from .io import read_trajectory


class AlignmentError(RuntimeError):
    pass


@dataclass
class DriftReport:
    atde_cm: float
    mtde_cm: float
    drift_cm: np.ndarray  # per associated frame
    stamps: np.ndarray


def associate(stamps_a, stamps_b, max_dt: float):
    """Greedy nearest-timestamp matching within ``max_dt``; returns index
    pairs sorted by time."""
    cand = []
    for i, sa in enumerate(stamps_a):
        j = int(np.argmin(np.abs(stamps_b - sa)))
        dt = abs(stamps_b[j] - sa)
        if dt <= max_dt:
            cand.append((dt, i, j))
    cand.sort()
    used_a, used_b, matches = set(), set(), []
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches.append((i, j))
    matches.sort()
    return matches


def compute_drift(est_stamps, est_poses, gt_stamps, gt_poses,
                  max_dt: float | None = None) -> DriftReport:
    """Per-frame drift = ||t_est - t_gt|| after aligning the first associated
    pose pair exactly (drift is measured from a known start)."""
    est_stamps = np.asarray(est_stamps, dtype=float)
    gt_stamps = np.asarray(gt_stamps, dtype=float)
    if len(est_stamps) == 0 or len(gt_stamps) == 0:
        raise AlignmentError("empty trajectory")
    if max_dt is None:
        diffs = np.diff(np.sort(gt_stamps))
        period = float(np.median(diffs)) if len(diffs) else 0.1
        max_dt = period / 2.0
    matches = associate(est_stamps, gt_stamps, max_dt)
    if len(matches) < 1:
        raise AlignmentError(
            f"no timestamp associations within {max_dt:.4f} s")
    if len(matches) < len(est_stamps) // 2:
        raise AlignmentError(
            f"only {len(matches)} of {len(est_stamps)} frames associate "
            f"within {max_dt:.4f} s")
    i0, j0 = matches[0]
    align = gt_poses[j0].compose(est_poses[i0].invert())
    drift = np.empty(len(matches))
    stamps = np.empty(len(matches))
    for k, (i, j) in enumerate(matches):
        t_est = align.compose(est_poses[i]).t
        drift[k] = np.linalg.norm(t_est - gt_poses[j].t)
        stamps[k] = est_stamps[i]
    drift_cm = drift * 100.0
    return DriftReport(float(drift_cm.mean()), float(drift_cm.max()),
                       drift_cm, stamps)


def evaluate_files(est_path, gt_path, max_dt: float | None = None) -> DriftReport:
    est_stamps, est_poses = read_trajectory(est_path)
    gt_stamps, gt_poses = read_trajectory(gt_path)
    return compute_drift(est_stamps, est_poses, gt_stamps, gt_poses, max_dt)


def write_report(report: DriftReport, csv_path):
    """Write the per-frame drift CSV and render the drift curve as a PNG
    alongside it."""
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["timestamp", "drift_cm"])
        for s, d in zip(report.stamps, report.drift_cm):
            wr.writerow([f"{s:.6f}", f"{d:.6f}"])
        wr.writerow([])
        wr.writerow(["atde_cm", f"{report.atde_cm:.6f}"])
        wr.writerow(["mtde_cm", f"{report.mtde_cm:.6f}"])
    fig_path = os.path.splitext(csv_path)[0] + ".png"
    plot_drift(report, fig_path)
    return fig_path


def plot_drift(report: DriftReport, fig_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(report.stamps, report.drift_cm, lw=1.0, color="tab:blue")
    ax.axhline(report.atde_cm, color="tab:orange", ls="--", lw=0.9,
               label=f"ATDE {report.atde_cm:.3f} cm")
    ax.axhline(report.mtde_cm, color="tab:red", ls=":", lw=0.9,
               label=f"MTDE {report.mtde_cm:.3f} cm")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("drift [cm]")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=130)
    plt.close(fig)
