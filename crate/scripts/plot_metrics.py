#!/usr/bin/env python3
"""Plot a training run's metrics.csv and rewards.csv.

usage: plot_metrics.py RUN_DIR [--out plot.png]
"""
import argparse
import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: [float(r[k]) for r in rows] for k in rows[0]} if rows else {}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    m = read(os.path.join(args.run, "metrics.csv"))
    r = read(os.path.join(args.run, "rewards.csv"))
    fig, ax = plt.subplots(2, 2, figsize=(11, 7))

    ax[0, 0].errorbar(m["step"], m["eval_iou"], yerr=m["eval_iou_std"], capsize=2)
    ax[0, 0].set_title("eval mask IoU")
    ax[0, 1].errorbar(m["step"], m["eval_displacement"], yerr=m["eval_displacement_std"], capsize=2)
    ax[0, 1].set_title("eval displacement (m)")
    ax[1, 0].plot(m["step"], m["eval_return"], label="eval")
    ax[1, 0].plot(m["step"], m["train_return"], label="train")
    ax[1, 0].set_title("episode return")
    ax[1, 0].legend()

    if r:
        window = 125
        for col in ("s_v", "s_m", "p_total"):
            v = r[col]
            smooth = [sum(v[max(0, i - window + 1) : i + 1]) / (i - max(0, i - window + 1) + 1) for i in range(len(v))]
            ax[1, 1].plot(smooth, label=col)
        ax[1, 1].set_title(f"reward terms (running mean of {window} frames)")
        ax[1, 1].set_xlabel("scored frame")
        ax[1, 1].legend()

    for a in ax.flat[:3]:
        a.set_xlabel("env step")
    fig.tight_layout()
    fig.savefig(args.out or os.path.join(args.run, "metrics.png"), dpi=110)


if __name__ == "__main__":
    main()
