"""Figures for benchmark reports and run directories (headless Agg backend)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path: Path) -> Path:
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    fig.savefig(tmp, dpi=120, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_trajectories(rows: Sequence[Mapping], path: str | os.PathLike,
                      title: str = "") -> Path:
    """Best-so-far error per iteration, one faint line per replicate.

    Demand events show up as jumps; a dashed line marks the iteration of the
    last one when the rows carry ``demand_at``.
    """
    path = Path(path)
    fig, (ax, hist) = plt.subplots(1, 2, figsize=(10, 3.8),
                                   gridspec_kw={"width_ratios": [3, 2]})
    by_lam: dict[float, list] = {}
    for r in rows:
        by_lam.setdefault(float(r["lam"]), []).append(r)
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for k, (lam, group) in enumerate(sorted(by_lam.items(), reverse=True)):
        color = colors[k % len(colors)]
        for i, r in enumerate(group):
            traj = r["trajectory"]
            ax.step(range(1, len(traj) + 1), traj, where="post", color=color, alpha=0.25,
                    lw=0.8, label=f"λ={lam:g}" if i == 0 else None)
        wins = [r["iterations"] for r in group if r["success"]]
        if wins:
            hist.hist(wins, bins=20, alpha=0.6, color=color, label=f"λ={lam:g}")
    demand = next((r.get("demand_at") for r in rows if r.get("demand_at")), None)
    if demand:
        ax.axvline(demand, color="k", ls="--", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("best error so far")
    ax.set_ylim(bottom=0)
    ax.legend(frameon=False)
    hist.set_xlabel("iterations to success")
    hist.set_ylabel("replicates")
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_run(records: Sequence, path: str | os.PathLike) -> Path:
    """Per-iteration summary of a single run: best and pool errors, cache hits."""
    path = Path(path)
    ts = [r.t for r in records]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for r in records:
        top.scatter([r.t] * len(r.deltas), list(r.deltas.values()), s=6, color="0.6")
    top.step(ts, [r.best_delta for r in records], where="post", color="C0", label="best")
    top.set_ylabel("error")
    top.set_ylim(bottom=0)
    top.legend(frameon=False)
    bottom.bar(ts, [r.cache_hits for r in records], color="C2", label="cache hits")
    bottom.plot(ts, [r.proposals for r in records], "o-", color="C1", ms=3, label="proposals")
    bottom.set_xlabel("iteration")
    bottom.legend(frameon=False)
    return _save(fig, path)
