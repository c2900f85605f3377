"""Static charts: loss curves, embedding scatter and ablation bars."""

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, out_png):
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_losses(log_csv, out_png):
    rows = _read_csv(log_csv)
    fig, ax = plt.subplots(figsize=(7, 4))
    for col in ("l_clip", "l_con", "l_ce", "l_trp"):
        for stage in ("1", "2"):
            pts = [(int(r["step"]), float(r[col])) for r in rows if r.get(col) and r["stage"] == stage]
            if pts:
                ax.plot(*zip(*pts), label=f"{col} (stage {stage})", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return _save(fig, out_png)


def plot_embeddings(points_csv, out_png):
    rows = _read_csv(points_csv)
    fig, ax = plt.subplots(figsize=(5, 5))
    groups = defaultdict(list)
    for r in rows:
        groups[r["kind"]].append((float(r["x"]), float(r["y"])))
    styles = {"image": dict(s=6, alpha=0.5, c="tab:blue"), "text": dict(s=30, marker="*", c="tab:red")}
    for kind, pts in groups.items():
        ax.scatter(*zip(*pts), label=kind, **styles.get(kind, {}))
    ax.legend()
    ax.set_title("2-D PCA of image and text embeddings")
    return _save(fig, out_png)


def plot_ablation(table_csv, out_png):
    rows = _read_csv(table_csv)
    names = [r["variant"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    x = range(len(rows))
    ax.bar([i - 0.2 for i in x], [100 * float(r["map_mean"]) for r in rows], 0.4,
           yerr=[100 * float(r["map_sd"]) for r in rows], label="mAP")
    ax.bar([i + 0.2 for i in x], [100 * float(r["rank1_mean"]) for r in rows], 0.4,
           yerr=[100 * float(r["rank1_sd"]) for r in rows], label="Rank-1")
    ax.set_xticks(list(x), names)
    ax.set_ylabel("%")
    ax.legend()
    return _save(fig, out_png)
