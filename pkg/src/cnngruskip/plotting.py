"""Optional PNG figures for the CLI (needs the ``plot`` extra).

matplotlib is imported lazily so the library itself depends on numpy only.
Every function returns the written path, or ``None`` when matplotlib is
missing.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

logger = logging.getLogger(__name__)

# no timestamps or version strings in the files, so reruns are byte-identical
_PNG_META = {"Software": None}


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        logger.warning("matplotlib is not installed; skipping figures (pip install 'artifact[plot]')")
        return None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, plt, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def loss_curve(history: Sequence[tuple], path, title: str = "loss") -> Path | None:
    plt = _pyplot()
    if plt is None:
        return None
    epochs = [h[0] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h[1] for h in history], label="train")
    ax.plot(epochs, [h[2] for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (normalised)")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    return _save(fig, plt, path)


def metrics_by_horizon(reports, path) -> Path | None:
    """RMSE and MAE against horizon, one line per report."""
    plt = _pyplot()
    if plt is None:
        return None
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for rep in reports:
        hs = [r.horizon_minutes for r in rep.rows]
        axes[0].plot(hs, [r.rmse for r in rep.rows], marker="o", label=rep.variant)
        axes[1].plot(hs, [r.mae for r in rep.rows], marker="o", label=rep.variant)
    for ax, name in zip(axes, ("RMSE", "MAE")):
        ax.set_xlabel("horizon (minutes)")
        ax.set_ylabel(name)
        ax.legend()
    return _save(fig, plt, path)


def forecast_trace(times, y_true, y_pred, path, limit: int = 576) -> Path | None:
    """Observed against predicted flow for the first ``limit`` points."""
    plt = _pyplot()
    if plt is None:
        return None
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.plot(range(min(limit, len(y_true))), y_true[:limit], label="observed", linewidth=1)
    ax.plot(range(min(limit, len(y_pred))), y_pred[:limit], label="predicted", linewidth=1)
    ax.set_xlabel("5-minute step")
    ax.set_ylabel("flow")
    ax.legend()
    return _save(fig, plt, path)


def ablation_bars(rows: Sequence[dict], path) -> Path | None:
    plt = _pyplot()
    if plt is None:
        return None
    names = [r["variant"] for r in rows]
    x = range(len(rows))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([i - 0.2 for i in x], [r["RMSE"] for r in rows], width=0.4, label="RMSE")
    ax.bar([i + 0.2 for i in x], [r["MAE"] for r in rows], width=0.4, label="MAE")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names)
    ax.legend()
    return _save(fig, plt, path)
