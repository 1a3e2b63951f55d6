"""Static SVG figures drawn from the CSV artifacts of a run."""

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "cutflow"


def _read(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in (rows[0] if rows else {})}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def tail_survival(csv_path, svg_path, slope_ref=None):
    t = _read(csv_path)
    fig, ax = plt.subplots(figsize=(5, 4))
    keep = t["survival"] > 0
    ax.loglog(t["n"][keep], t["survival"][keep], "o-", ms=3, label="P[T > n]")
    if slope_ref is not None and keep.any():
        n0, s0 = t["n"][keep][0], t["survival"][keep][0]
        ax.loglog(t["n"][keep], s0 * (t["n"][keep] / n0) ** slope_ref, "--", label=f"slope {slope_ref:g}")
    ax.set_xlabel("n")
    ax.set_ylabel("survival")
    ax.legend()
    _save(fig, svg_path)


def covariance_heatmap(csv_path, svg_path):
    t = _read(csv_path)
    d = int(t["i"].max()) + 1
    m = np.zeros((d, d))
    m[t["i"].astype(int), t["j"].astype(int)] = t["value"]
    fig, ax = plt.subplots(figsize=(5, 4))
    lim = max(abs(m).max(), 1e-12)
    im = ax.imshow(m, cmap="RdBu_r", vmin=-lim, vmax=lim)
    fig.colorbar(im, ax=ax)
    ax.set_title("covariance A")
    _save(fig, svg_path)


def variance_scan(csv_path, svg_path):
    t = _read(csv_path)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(t["n"], t["variance"], yerr=t["se"], fmt="o-", ms=3, capsize=2)
    ax.set_xscale("log", base=2)
    pos = t["variance"] > 0
    if pos.all():
        ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("variance of quenched mean")
    _save(fig, svg_path)
