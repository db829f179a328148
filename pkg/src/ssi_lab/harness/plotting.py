"""PNG previews of emitted tables.

The tables are the product; these figures are quick looks rendered with the
Agg backend next to them.
"""
from __future__ import annotations

import os
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["render"]

_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def _gain(rows, summary, path):
    L = np.array([r["L"] for r in rows], dtype=float)
    g = np.array([r["gain"] for r in rows], dtype=float)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax0.loglog(L, [r["tau_tied"] for r in rows], "o-", label="tied")
    ax0.loglog(L, [r["tau_untied"] for r in rows], "s-", label="untied")
    ax0.set_xlabel("L")
    ax0.set_ylabel("median recovery step")
    ax0.legend(frameon=False)
    ax1.loglog(L, g, "o", color="k")
    fit = (summary or {}).get("fit") or {}
    if fit.get("slope") is not None:
        xs = np.geomspace(L.min(), L.max(), 50)
        ax1.loglog(xs, np.exp(fit["intercept"]) * xs ** fit["slope"], "--", label=f"slope {fit['slope']:.2f}")
        ax1.legend(frameon=False)
    ax1.set_xlabel("L")
    ax1.set_ylabel("gain")
    return _save(fig, path)


def _phase(rows, summary, path):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    by_a = defaultdict(list)
    for r in rows:
        by_a[r["a"]].append((r["omega"], r["p_semantic"]))
    for a, pts in sorted(by_a.items()):
        pts.sort()
        ax.plot(*zip(*pts), "o-", label=f"a={a:g}")
    for a, w in ((summary or {}).get("transition_omega") or {}).items():
        if w is not None:
            ax.axvline(w, ls=":", color="gray")
    ax.axhline(0.5, lw=0.5, color="gray")
    ax.set_xlabel(r"$\omega$")
    ax.set_ylabel("P(semantic)")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(frameon=False)
    return _save(fig, path)


def _phase_diagram(rows, summary, path):
    labels = sorted({r["label"] for r in rows})
    code = {lab: i for i, lab in enumerate(labels)}
    fig, ax = plt.subplots(figsize=(6, 3.6))
    sc = ax.scatter([r["omega"] for r in rows], [r["a"] for r in rows], c=[code[r["label"]] for r in rows],
                    cmap="tab10", vmin=0, vmax=9, s=60)
    handles = [plt.Line2D([], [], marker="o", ls="", color=sc.cmap(sc.norm(code[lab]))) for lab in labels]
    ax.legend(handles, labels, fontsize=7, frameon=False, loc="center left", bbox_to_anchor=(1, 0.5))
    ax.set_xlabel(r"$\omega$")
    ax.set_ylabel("a")
    return _save(fig, path)


def _landscape(rows, summary, path):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    by = defaultdict(list)
    for r in rows:
        by[(r["omega"], r["a"])].append((r["theta"], r["loss"]))
    for (w, a), pts in sorted(by.items()):
        pts.sort()
        ax.plot(*zip(*pts), label=rf"$\omega$={w:g}, a={a:g}")
    ax.set_xlabel(r"$\theta$ ($\epsilon=\sin\theta$, $m=\cos\theta$)")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def _ode(rows, summary, path):
    ok = [r for r in rows if r["tau"] is not None]
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.semilogx([r["d"] for r in ok], [r["tau"] for r in ok], "o-")
    ax.set_xlabel("d")
    ax.set_ylabel(r"hitting time $\tau_\eta$")
    return _save(fig, path)


def _paths(rows, key, path, xlabel):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    by = defaultdict(list)
    for r in rows:
        by[r[key]].append((r["t"] if "t" in r else r["time"], r["overlap"]))
    for k, pts in sorted(by.items()):
        ax.plot(*zip(*pts), lw=1, label=f"{key}={k}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("overlap")
    if len(by) <= 8:
        ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def render(figure: str, rows: list[dict], out: str | os.PathLike, summary: dict | None = None) -> Path | None:
    """Render ``<out>/<figure>.png``; returns ``None`` for table-only figures."""
    path = Path(out) / f"{figure}.png"
    if figure == "gain":
        return _gain(rows, summary, path)
    if figure == "phase":
        return _phase(rows, summary, path)
    if figure == "phase-diagram":
        return _phase_diagram(rows, summary, path)
    if figure == "landscape":
        return _landscape(rows, summary, path)
    if figure == "ode":
        return _ode(rows, summary, path)
    if figure == "ode-paths":
        return _paths(rows, "d", path, "t")
    if figure == "sgd-run":
        return _paths(rows, "replica", path, r"time $\gamma\,$step$/d$")
    return None
