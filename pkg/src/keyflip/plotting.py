"""Per-iteration series of an attack run: CSV data plus a PNG figure."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from .checkpoint import atomic_write_bytes  # noqa: E402


def attack_series(report) -> list[dict]:
    """Row 0 is the pre-attack state; row i is the state after flip i."""
    rows = [{"flip": 0, "target_loss": report.initial_target_loss, "aux_metric": report.initial_aux}]
    for it in report.iterations:
        rows.append({"flip": it.iteration, "target_loss": it.target_loss_after, "aux_metric": it.aux_metric})
    return rows


def series_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["flip", "target_loss", "aux_metric"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def plot_attack(report, path, title: str = "") -> None:
    rows = attack_series(report)
    x = [r["flip"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.0, 3.6), dpi=120)
    ax.plot(x, [r["target_loss"] for r in rows], marker="o", ms=3, color="tab:red", label="keyword loss")
    ax.set_xlabel("flips applied")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_ylabel("keyword loss")
    ax.grid(alpha=0.3)
    aux = [r["aux_metric"] for r in rows]
    if any(not math.isnan(v) for v in aux):
        ax2 = ax.twinx()
        ax2.plot(x, aux, marker="s", ms=3, color="tab:blue", label="aux metric")
        ax2.set_ylabel("aux metric")
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right", fontsize=8)
    else:
        ax.legend(loc="upper right", fontsize=8)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    buf = io.BytesIO()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(Path(path), buf.getvalue())


def write_series(report, csv_path, png_path=None, title: str = "") -> None:
    atomic_write_bytes(Path(csv_path), series_csv(attack_series(report)).encode())
    if png_path is not None:
        plot_attack(report, png_path, title)
