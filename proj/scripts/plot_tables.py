#!/usr/bin/env python3
"""Plot `fqbert sweep` or `fqbert perf` text output.

  fqbert sweep ... > sweep.txt && plot_tables.py sweep sweep.txt -o sweep.png
  fqbert perf --pes 4,8,16 > perf.txt && plot_tables.py perf perf.txt -o perf.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_rows(path, header):
    rows, on = [], False
    for line in open(path, encoding="utf-8"):
        if line.startswith(header):
            on = True
            continue
        if on and line.strip() and not line.startswith("#"):
            rows.append(line.split())
    return rows


def plot_sweep(path, ax):
    rows = [(int(k), float(e)) for k, e in read_rows(path, "# k ")]
    quant = [(k, e) for k, e in rows if k != 32]
    ax.plot([k for k, _ in quant], [e for _, e in quant], marker="o")
    ax.set_xlabel("weight bits")
    ax.set_ylabel("mean relative logit error")
    ax.set_yscale("log")


def plot_perf(path, ax):
    rows = read_rows(path, "# pus ")
    labels = [f"PU{r[0]} N{r[1]} M{r[2]} bw{r[3]}" for r in rows]
    ax.bar(range(len(rows)), [float(r[6]) for r in rows])
    ax.set_xticks(range(len(rows)), labels, rotation=30, ha="right")
    ax.set_ylabel("latency (ms)")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("kind", choices=["sweep", "perf"])
    ap.add_argument("table")
    ap.add_argument("-o", "--out", default="plot.png")
    a = ap.parse_args()
    fig, ax = plt.subplots(figsize=(6, 4))
    (plot_sweep if a.kind == "sweep" else plot_perf)(a.table, ax)
    fig.tight_layout()
    fig.savefig(a.out, dpi=120)


if __name__ == "__main__":
    main()
