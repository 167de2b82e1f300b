"""Figure rendering for the report path: a PNG next to each delimited output."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["render_sweep_figure", "render_counterexample_figure"]


def render_sweep_figure(rows, out_path, theoretical_rate=None, title=""):
    """Log-log plot of e_total against n with fitted and predicted slopes."""
    ok = [r for r in rows if not r.get("error") and float(r["e_total"]) > 0]
    if len(ok) < 2:
        return None
    n = np.array([float(r["n"]) for r in ok])
    e = np.array([float(r["e_total"]) for r in ok])
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.loglog(n, e, "o-", label="measured e(n)")
    slope, intercept = np.polyfit(np.log(n), np.log(e), 1)
    ax.loglog(n, np.exp(intercept) * n**slope, "--", label=f"fit slope {slope:.3f}")
    if theoretical_rate is not None:
        anchor = e[0] * (n / n[0]) ** (-theoretical_rate)
        ax.loglog(n, anchor, ":", label=f"predicted slope {-theoretical_rate:.3f}")
    ax.set_xlabel("n")
    ax.set_ylabel("e(n)")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def render_counterexample_figure(kind, rows, out_path):
    """Curve plots for the degenerate-diffusion examples."""
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    if kind == "zhang":
        t = np.array([float(r["t"]) for r in rows])
        v = np.array([float(r["gradient"]) for r in rows])
        ax.loglog(1.0 - t, np.abs(v), "o-")
        ax.set_xlabel("1 - t")
        ax.set_ylabel("|grad u(t,0) sigma(t)|")
        ax.set_title("gradient blow-up near the noise cutoff")
    else:
        t = np.array([float(r["t"]) for r in rows])
        d1 = np.array([float(r["du_dx1"]) for r in rows])
        d2 = np.array([float(r["du_dx2"]) for r in rows])
        ax.semilogy(t, np.abs(d1) + 1e-300, "o-", label="|du/dx1| (bounded)")
        ax.semilogy(t, np.abs(d2) + 1e-300, "s-", label="|du/dx2| (blows up)")
        ax.set_xlabel("t")
        ax.legend()
        ax.set_title("bounded Z with an exploding companion derivative")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path
