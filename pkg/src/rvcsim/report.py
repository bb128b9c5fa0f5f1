"""Report figures rendered from a trial log.

The export path writes these next to the delimited trial.csv: the 3D tip
trajectory colored by workflow step, velocity/force strips with norms, and
the grouped per-step duration bars.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .telemetry import TrialLog, TrialSummary  # noqa: E402
from .workflow import Step  # noqa: E402

STEP_COLORS = {
    Step.PREPARATION: "tab:gray",
    Step.NAVIGATION: "tab:blue",
    Step.PUNCTURE: "m",
    Step.VERIFY_RETRACT: "c",
    Step.INFUSION: "tab:red",
    Step.RETRACTION: "tab:green",
    Step.DONE: "k",
    Step.FAILED: "k",
}


def figure_trajectory(log: TrialLog, path: str):
    tips = np.array([s.tip for s in log.samples])
    steps = [s.step for s in log.samples]
    fig = plt.figure(figsize=(6, 5))
    ax = fig.add_subplot(111, projection="3d")
    start = 0
    for i in range(1, len(steps) + 1):
        if i == len(steps) or steps[i] is not steps[start]:
            seg = tips[start:i]
            if len(seg) > 1:
                ax.plot(seg[:, 0], seg[:, 1], seg[:, 2],
                        color=STEP_COLORS[steps[start]],
                        label=steps[start].value)
            start = i
    handles, labels = ax.get_legend_handles_labels()
    seen = dict(zip(labels, handles))
    ax.legend(seen.values(), seen.keys(), fontsize=7, loc="upper left")
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    ax.set_zlabel("z (mm)")
    ax.set_title("Needle tip trajectory")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def figure_velocity_force(log: TrialLog, path: str):
    t = np.array([s.t for s in log.samples])
    vel = np.array([s.tip_velocity for s in log.samples])
    force = np.array([s.force_mn for s in log.samples])
    fig, axes = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for i, name in enumerate("xyz"):
        axes[0].plot(t, vel[:, i], lw=0.6, label=f"v{name}")
        axes[1].plot(t, force[:, i], lw=0.6, label=f"f{name}")
    axes[0].plot(t, np.linalg.norm(vel, axis=1), "k", lw=0.9, label="|v|")
    axes[1].plot(t, np.linalg.norm(force, axis=1), "k", lw=0.9, label="|f|")
    axes[0].set_ylabel("tip velocity (mm/s)")
    axes[1].set_ylabel("handle force (mN)")
    axes[1].set_xlabel("t (s)")
    for ax in axes:
        ax.legend(fontsize=7, ncol=4)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def figure_step_durations(summary: TrialSummary, path: str):
    names = list(summary.per_step_durations_s.keys())
    values = [summary.per_step_durations_s[n] for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(names, values, color="tab:blue")
    ax.set_ylabel("duration (s)")
    ax.set_title("Per-step durations")
    plt.setp(ax.get_xticklabels(), rotation=15, ha="right", fontsize=8)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def render_report(log: TrialLog, summary: TrialSummary, out_dir: str) -> list:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, fn in (
        ("trajectory.png", lambda p: figure_trajectory(log, p)),
        ("velocity_force.png", lambda p: figure_velocity_force(log, p)),
        ("step_durations.png", lambda p: figure_step_durations(summary, p)),
    ):
        path = os.path.join(out_dir, name)
        fn(path)
        paths.append(path)
    return paths
