"""Figure rendering for sweep outputs (saved next to the CSV)."""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .benchmarks import ExperimentRecord, summarize  # noqa: E402


def plot_sweep(records: Sequence[ExperimentRecord], out_path: str,
               title: Optional[str] = None, targets: Optional[dict] = None) -> str:
    """Render mean n*err^2 against n per estimator, with 95% CI bars.

    ``targets`` optionally maps estimator name to the asymptotic variance
    to draw as a horizontal reference line. Returns ``out_path``.
    """
    summary = summarize(records)
    by_est: dict = {}
    for row in summary:
        by_est.setdefault(row["estimator"], []).append(row)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for est, rows in sorted(by_est.items()):
        rows = sorted(rows, key=lambda r: r["n"])
        ns = [r["n"] for r in rows]
        means = [r["mean_n_sq_error"] for r in rows]
        errs = [1.96 * r["sem"] for r in rows]
        ax.errorbar(ns, means, yerr=errs, marker="o", capsize=3, label=est)
    if targets:
        for est, val in targets.items():
            ax.axhline(val, linestyle="--", linewidth=1.0, alpha=0.6)
            ax.annotate(f"{est}: {val:g}", xy=(1.02, val), xycoords=("axes fraction", "data"),
                        fontsize=8, va="center")
    ax.set_xscale("log")
    ax.set_xlabel("trajectories n")
    ax.set_ylabel(r"mean $n\,(\hat V - V)^2$")
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_error_decay(ns: Sequence[int], errors: Sequence[float], out_path: str,
                     label: str = "estimator", slope_ref: float = -0.5) -> str:
    """Log-log error decay with a reference slope line."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.loglog(ns, errors, marker="o", label=label)
    if len(ns) >= 2 and errors[0] > 0:
        ref = [errors[0] * (n / ns[0]) ** slope_ref for n in ns]
        ax.loglog(ns, ref, linestyle="--", alpha=0.6, label=f"slope {slope_ref:g}")
    ax.set_xlabel("trajectories n")
    ax.set_ylabel("error")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
