"""Report figures rendered to PNG files with the non-interactive backend."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no timestamps or version strings, so reruns give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def metrics_figure(aggregate: Mapping[str, float], path) -> Path:
    """Bar chart of RelDet / RelTag metrics in percent."""
    names = ["mAP", "R@50", "R@100", "P@1", "P@5", "P@10"]
    fig, ax = plt.subplots(figsize=(6, 3))
    vals = [100 * aggregate.get(n, 0.0) for n in names]
    colors = ["tab:blue"] * 3 + ["tab:orange"] * 3
    ax.bar(names, vals, color=colors)
    for i, v in enumerate(vals):
        ax.text(i, v + 1, f"{v:.1f}", ha="center", fontsize=8)
    ax.set_ylim(0, 105)
    ax.set_ylabel("%")
    ax.set_title("Relation detection (blue) and tagging (orange)")
    return _save(fig, path)


def fraction_recall_figure(aggregate: Mapping[str, float], path, ks: Sequence[int] = (50, 100, 150)) -> Path:
    """fR_S vs fR_M at each K."""
    fig, ax = plt.subplots(figsize=(5, 3))
    width = 0.38
    xs = range(len(ks))
    single = [100 * aggregate.get(f"fR_S@{k}", 0.0) for k in ks]
    multi = [100 * aggregate.get(f"fR_M@{k}", 0.0) for k in ks]
    ax.bar([x - width / 2 for x in xs], single, width, label="single-instance")
    ax.bar([x + width / 2 for x in xs], multi, width, label="multi-instance")
    ax.set_xticks(list(xs), [f"@{k}" for k in ks])
    ax.set_ylim(0, 105)
    ax.set_ylabel("fraction recall (%)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def loss_figure(curves: Mapping[str, Sequence[float]], path) -> Path:
    """One line per training stage, loss against epoch."""
    fig, ax = plt.subplots(figsize=(5, 3))
    for name, values in sorted(curves.items()):
        ax.plot(range(1, len(values) + 1), values, marker=".", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    if curves:
        ax.legend(fontsize=8)
    return _save(fig, path)


def instance_figure(stats: Mapping[str, float], path) -> Path:
    """Instance-count distribution of predicate nodes and bin collisions."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(7, 3))
    shares = [stats["single"], stats["double"], stats["triple_plus"]]
    left.pie(shares, labels=["1", "2", ">=3"], autopct="%1.1f%%", startangle=90, counterclock=False)
    left.set_title("instances per predicate node")
    coll = stats.get("collision_share", 0.0)
    right.bar(["single target", "collided"], [100 * (1 - coll), 100 * coll], color=["tab:green", "tab:red"])
    right.set_ylim(0, 105)
    right.set_title(f"occupied bins, K={stats.get('bins', '?')}")
    right.set_ylabel("%")
    return _save(fig, path)
