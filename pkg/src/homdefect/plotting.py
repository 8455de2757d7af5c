"""Static SVG log-log plots for sweep results."""

from __future__ import annotations

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loglog_plot(path, eps, values, label: str, fit=None, reference_slopes=(), title: str = "") -> None:
    """Values against eps on log-log axes, with the fitted line and reference slopes."""
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    ok = np.isfinite(values) & (values > 0)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(eps[ok], values[ok], "o-", label=label)
    if fit is not None and ok.any():
        xs = np.array([eps[ok].min(), eps[ok].max()])
        ax.loglog(xs, np.exp(fit.intercept) * xs**fit.slope, "--",
                  label=f"fit slope {fit.slope:.3f} (R² {fit.r2:.3f})")
    if ok.any():
        anchor_x, anchor_y = eps[ok][0], values[ok][0]
        for s in reference_slopes:
            ax.loglog(eps[ok], anchor_y * (eps[ok] / anchor_x) ** s, ":", color="gray", label=f"slope {s:g}")
    ax.set_xlabel("eps")
    ax.set_ylabel(label)
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
