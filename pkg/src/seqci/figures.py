"""Figure rendering for the CLI report path.

The harness itself only emits plot-ready records and summaries; the
functions here turn those into PNG files written next to the delimited
output.  Rendering is headless (Agg backend).
"""

from __future__ import annotations

import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evalue import StepRecord
from .simharness import PowerSummary

_METHOD_COLORS = {
    "ecrt": "tab:blue",
    "ecrt-oracle": "tab:cyan",
    "rmle": "tab:green",
    "crt": "tab:orange",
    "crt-corr": "tab:red",
    "lrt": "tab:purple",
}


def _color(method: str) -> str:
    return _METHOD_COLORS.get(method, "tab:gray")


def calibration_figure(rows: Sequence[dict], path) -> None:
    """Grouped bars of rejection rate per method and alpha, with SE bars."""
    alphas = sorted({row["alpha"] for row in rows})
    methods = sorted({row["method"] for row in rows})
    width = 0.8 / max(len(alphas), 1)
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(methods), 3.6))
    for k, alpha in enumerate(alphas):
        xs, rates, errs = [], [], []
        for i, method in enumerate(methods):
            row = next(r for r in rows if r["method"] == method and r["alpha"] == alpha)
            xs.append(i + (k - (len(alphas) - 1) / 2) * width)
            rates.append(row["rate"])
            errs.append(row["se"])
        ax.bar(xs, rates, width=width * 0.9, yerr=errs, capsize=3, label=f"alpha={alpha:g}")
        ax.axhline(alpha, color="k", linestyle=":", linewidth=0.8)
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels(methods)
    ax.set_ylabel("rejection rate")
    ax.set_title("Null rejection rates (dotted: nominal levels)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def power_figure(summary: PowerSummary, path) -> None:
    """Required (upper row) and average stopped (lower row) sample sizes
    per effect size, one column per target power."""
    etas = summary.etas
    fig, axes = plt.subplots(2, len(etas), figsize=(4.2 * len(etas), 6.4), squeeze=False)
    methods = sorted({c.method for c in summary.cells})
    betas = sorted({c.beta for c in summary.cells})
    for col, eta in enumerate(etas):
        top, bottom = axes[0][col], axes[1][col]
        for method in methods:
            pts_hat = [(b, summary.cell(method, b).n_hat.get(eta)) for b in betas]
            pts_hat = [(b, v) for b, v in pts_hat if v is not None]
            if pts_hat:
                top.plot(*zip(*pts_hat), marker="o", color=_color(method), label=method)
            cells_av = [(b, summary.cell(method, b).n_av.get(eta)) for b in betas]
            cells_av = [(b, v) for b, v in cells_av if v is not None]
            if cells_av:
                bottom.plot(*zip(*cells_av), marker="s", color=_color(method), label=method)
            elif pts_hat:
                # fixed-n methods have no stopping times; repeat N_hat dashed
                bottom.plot(*zip(*pts_hat), linestyle="--", color=_color(method), label=method)
        top.set_title(f"minimum n for power {1 - eta:g}")
        top.set_xlabel("effect size")
        top.set_ylabel("n required")
        bottom.set_xlabel("effect size")
        bottom.set_ylabel("average n at stop")
        top.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def robustness_figure(rows: Sequence[dict], alpha: float, path) -> None:
    """Rejection rate along the sweep, one line per method."""
    methods = sorted({row["method"] for row in rows})
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for method in methods:
        pts = sorted((r["sweep"], r["rate"], r["se"]) for r in rows if r["method"] == method)
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        es = [p[2] for p in pts]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, color=_color(method), label=method)
    ax.axhline(alpha, color="k", linestyle=":", linewidth=0.8)
    ax.set_xlabel("sweep value")
    ax.set_ylabel("rejection rate")
    ax.set_title(f"Null rejection along the sweep (nominal {alpha:g})")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def trace_figure(trace: Sequence[StepRecord], alpha: float, path) -> None:
    """Accumulated log e-value over the stream with the rejection line."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ns = [rec.n for rec in trace]
    logs = [rec.log_s for rec in trace]
    ax.plot(ns, logs, color="tab:blue", linewidth=1.0)
    ax.axhline(math.log(1 / alpha), color="tab:red", linestyle="--", linewidth=0.9, label=f"log(1/{alpha:g})")
    crossing = next((rec.n for rec in trace if rec.crossed), None)
    if crossing is not None:
        ax.axvline(crossing, color="tab:red", linestyle=":", linewidth=0.9)
    ax.set_xlabel("observation")
    ax.set_ylabel("log e-value")
    ax.set_title("Evidence against conditional independence")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
