"""Static figure rendering from run CSVs.

Pure re-rendering: plots are built only from samples.csv / trajectories.csv,
never from model state, so re-running `plot` on the same inputs yields
byte-identical SVGs (fixed hashsalt, no embedded timestamps).
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "flowlab"

_COLORMAP = "viridis"


def _read_samples(path):
    kinds = {"source": [], "generated": [], "target": []}
    cs = {"source": [], "generated": [], "target": []}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            kinds[row["kind"]].append((float(row["x"]), float(row["y"])))
            cs[row["kind"]].append(float(row["c"]))
    return kinds, cs


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_scatter(samples_csv, out_path):
    """Sources as x, generated as filled dots, targets as open circles."""
    kinds, cs = _read_samples(samples_csv)
    all_c = [c for v in cs.values() for c in v]
    vmin, vmax = (min(all_c), max(all_c)) if all_c else (0.0, 1.0)
    if vmin == vmax:
        vmax = vmin + 1.0
    fig, ax = plt.subplots(figsize=(6, 6))
    for kind, marker, kwargs in (
            ("target", "o", dict(facecolors="none", s=14, linewidths=0.6)),
            ("source", "x", dict(s=14, linewidths=0.8)),
            ("generated", ".", dict(s=14))):
        if not kinds[kind]:
            continue
        xs = [p[0] for p in kinds[kind]]
        ys = [p[1] for p in kinds[kind]]
        if kind == "target":
            ax.scatter(xs, ys, marker=marker, edgecolors="0.7", **kwargs)
        else:
            ax.scatter(xs, ys, marker=marker, c=cs[kind], cmap=_COLORMAP,
                       vmin=vmin, vmax=vmax, **kwargs)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    _save(fig, out_path)
    return out_path


def render_trajectories(trajectories_csv, out_path, max_paths: int = 128):
    """Condition-colored polylines; returns None if the file has no rows."""
    paths = {}
    conds = {}
    with open(trajectories_csv) as fh:
        for row in csv.DictReader(fh):
            sid = int(row["sample_id"])
            paths.setdefault(sid, []).append((float(row["x"]), float(row["y"])))
            conds[sid] = float(row["c"])
    if not paths:
        return None
    vmin, vmax = min(conds.values()), max(conds.values())
    if vmin == vmax:
        vmax = vmin + 1.0
    cmap = plt.get_cmap(_COLORMAP)
    fig, ax = plt.subplots(figsize=(6, 6))
    for sid in sorted(paths)[:max_paths]:
        pts = paths[sid]
        color = cmap((conds[sid] - vmin) / (vmax - vmin))
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                color=color, linewidth=0.6, alpha=0.7)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    _save(fig, out_path)
    return out_path


def render_run_plots(run_dir):
    """Render plots/*.svg from the CSVs in a run directory."""
    run_dir = Path(run_dir)
    samples = run_dir / "samples.csv"
    trajectories = run_dir / "trajectories.csv"
    if not samples.exists():
        raise FileNotFoundError(f"{samples} missing")
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    out = [render_scatter(samples, plots / "scatter.svg")]
    if trajectories.exists():
        p = render_trajectories(trajectories, plots / "trajectories.svg")
        if p is None:
            print(f"notice: {trajectories} is empty, trajectory plot skipped")
        else:
            out.append(p)
    return out
