"""Figures and tables written next to each other in one output directory."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .train import DiceTable  # noqa: E402


def moving_average(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")


def plot_loss(losses, path, window: int = 10) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.8, alpha=0.5, label="per step")
    ma = moving_average(losses, window)
    if len(losses) >= window:
        ax.plot(steps[window - 1:], ma, lw=1.6, label=f"{window}-step mean")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_dice(tables: dict, path) -> Path:
    """Grouped bars, one group per foreground class plus the average."""
    names = list(tables)
    head = tables[names[0]].header()
    x = np.arange(len(head))
    width = 0.8 / len(names)
    fig, ax = plt.subplots(figsize=(1.2 * len(head) + 2, 3.5))
    for i, n in enumerate(names):
        ax.bar(x + (i - (len(names) - 1) / 2) * width, 100 * np.asarray(tables[n].row()), width, label=n)
    ax.set_xticks(x, head)
    ax.set_ylabel("Dice (%)")
    ax.set_ylim(0, 100)
    if len(names) > 1:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_tables(tables: dict, out_dir) -> list:
    """One csv with a row per run, plus the aligned text table."""
    out = Path(out_dir)
    names = list(tables)
    head = tables[names[0]].header()
    lines = ["run," + ",".join(head)]
    lines += [n + "," + ",".join(f"{100 * v:.2f}" for v in tables[n].row()) for n in names]
    (out / "dice.csv").write_text("\n".join(lines) + "\n")
    w = max(len(n) for n in names + ["run"])
    text = [f"{'run':<{w}}  " + "  ".join(h.rjust(8) for h in head)]
    text += [f"{n:<{w}}  " + "  ".join(f"{100 * v:8.2f}" for v in tables[n].row()) for n in names]
    (out / "dice.txt").write_text("\n".join(text) + "\n")
    return [out / "dice.csv", out / "dice.txt"]


def write_report(out_dir, tables: dict, losses: Optional[list] = None) -> list:
    """Tables, a Dice bar chart and (when a loss trace is given) the loss curve."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = write_tables(tables, out)
    written.append(plot_dice(tables, out / "dice.png"))
    if losses:
        written.append(plot_loss(losses, out / "loss.png"))
        np.savetxt(out / "loss.csv", np.asarray(losses), fmt="%.10g", header="loss", comments="")
        written.append(out / "loss.csv")
    return written
