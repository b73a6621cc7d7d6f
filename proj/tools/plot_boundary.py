#!/usr/bin/env python3
"""Render decision-boundary grids written by `airl export-boundary`.

Each grid CSV (`x1,x2,pred`) becomes one panel. With --data, samples of the
panel's target domain from a dataset CSV (`domain,y,x1,x2`) are drawn on top.

    python3 tools/plot_boundary.py airl.csv erm.csv --data circle-hard.csv --out fig.png
"""

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd


def load_grid(path: Path):
    frame = pd.read_csv(path)
    xs = np.sort(frame["x1"].unique())
    ys = np.sort(frame["x2"].unique())
    pred = frame.sort_values(["x2", "x1"])["pred"].to_numpy().reshape(len(ys), len(xs))
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    return xs, ys, pred, meta


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("grids", nargs="+", type=Path, help="boundary CSV files")
    parser.add_argument("--data", type=Path, help="dataset CSV with domain,y,x1,x2 columns")
    parser.add_argument("--labels", nargs="*", help="panel titles (default: file stems)")
    parser.add_argument("--out", type=Path, default=Path("boundary.png"))
    args = parser.parse_args()

    data = pd.read_csv(args.data) if args.data else None
    labels = args.labels or [g.stem for g in args.grids]
    if len(labels) != len(args.grids):
        parser.error("--labels needs one title per grid")

    fig, axes = plt.subplots(1, len(args.grids), figsize=(4 * len(args.grids), 4), squeeze=False)
    for ax, path, label in zip(axes[0], args.grids, labels):
        xs, ys, pred, meta = load_grid(path)
        n_classes = max(int(pred.max()) + 1, 2)
        ax.contourf(xs, ys, pred, levels=np.arange(n_classes + 1) - 0.5, cmap="coolwarm", vmin=0, vmax=n_classes - 1,
                    alpha=0.35)
        domain = meta.get("domain")
        if data is not None and domain is not None:
            points = data[data["domain"] == domain]
            ax.scatter(points["x1"], points["x2"], c=points["y"], cmap="coolwarm", vmin=0, vmax=n_classes - 1, s=6,
                       edgecolors="none")
        title = label if domain is None else f"{label} (domain {domain})"
        ax.set_title(title)
        ax.set_xlim(xs[0], xs[-1])
        ax.set_ylim(ys[0], ys[-1])
        ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
