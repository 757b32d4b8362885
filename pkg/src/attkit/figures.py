"""Matplotlib renderers for the report command.

Figures are written straight to files; no interactive backend is touched.
"""

from __future__ import annotations

from typing import List, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

ESTIMATOR_COLORS = {
    "oracle": "tab:green",
    "naive": "tab:gray",
    "uncorrected": "tab:orange",
    "debiased": "tab:blue",
    "debiased_true_sigma": "tab:purple",
}


def _color(name: str) -> str:
    return ESTIMATOR_COLORS.get(name, "tab:red")


def mise_summary_figure(summary: List[dict], path) -> str:
    """Mean integrated squared error vs noise level, one line per estimator."""
    estimators = sorted({r["estimator"] for r in summary})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name in estimators:
        rows = sorted((r for r in summary if r["estimator"] == name),
                      key=lambda r: r["sigma"])
        sig = [r["sigma"] for r in rows]
        mean = [r["mean_mise"] for r in rows]
        sd = [r["sd_mise"] for r in rows]
        ax.errorbar(sig, mean, yerr=sd, marker="o", capsize=3,
                    label=name, color=_color(name))
    ax.set_xlabel("covariate noise level")
    ax.set_ylabel("mean integrated squared error")
    ax.set_title("Treatment-effect estimation error by noise level")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)


def mise_distribution_figure(replicates: List[dict],
                             estimators: Sequence[str], path) -> str:
    """Per-replicate MISE distributions, boxed per estimator and noise level."""
    sigmas = sorted({r["sigma"] for r in replicates})
    fig, axes = plt.subplots(1, len(sigmas), figsize=(3.2 * len(sigmas), 4.2),
                             sharey=False, squeeze=False)
    for ax, sigma in zip(axes[0], sigmas):
        data, labels = [], []
        for name in estimators:
            vals = [r[name] for r in replicates
                    if r["sigma"] == sigma and np.isfinite(r[name])]
            if vals:
                data.append(vals)
                labels.append(name)
        ax.boxplot(data, tick_labels=labels)
        ax.set_title(f"noise level {sigma:g}")
        ax.tick_params(axis="x", rotation=60, labelsize=7)
    axes[0][0].set_ylabel("integrated squared error")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)


def cumulative_effect_figure(coeff_rows: List[dict], coef_name: str, path,
                             title: str) -> str:
    """Integrated coefficient curves over time, one line per estimator."""
    estimators = sorted({r["estimator"] for r in coeff_rows})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name in estimators:
        rows = sorted((r for r in coeff_rows
                       if r["estimator"] == name and r["coef_name"] == coef_name),
                      key=lambda r: r["t_index"])
        if not rows:
            continue
        t = [rows[0]["t"]] + [r["t"] + 1 for r in rows]
        cum = [0.0] + [r["cumulative"] for r in rows]
        ax.plot(t, cum, marker=".", label=name, color=_color(name))
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_xlabel("time")
    ax.set_ylabel(f"cumulative {coef_name} coefficient")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)


def coefficient_paths_figure(coeff_rows: List[dict], estimator: str, path) -> str:
    """Small multiples of every per-interval coefficient path of one fit."""
    rows = [r for r in coeff_rows if r["estimator"] == estimator]
    names = sorted({r["coef_name"] for r in rows})
    ncols = min(3, len(names))
    nrows = (len(names) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.4 * ncols, 2.6 * nrows),
                             squeeze=False)
    for ax, name in zip(axes.flat, names):
        sel = sorted((r for r in rows if r["coef_name"] == name),
                     key=lambda r: r["t_index"])
        ax.plot([r["t"] for r in sel], [r["value"] for r in sel], marker=".")
        ax.set_title(name, fontsize=9)
        ax.axhline(0.0, color="k", lw=0.5)
    for ax in axes.flat[len(names):]:
        ax.set_visible(False)
    fig.suptitle(f"per-interval coefficients: {estimator}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)
