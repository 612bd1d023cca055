"""Loss-curve reporting: the CSV alongside rendered matplotlib figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_COLUMNS = ["stage", "step", "sds", "sdf_init", "sdf_global", "sdf_local",
                "normal_global", "normal_local", "lightness", "total"]


def write_loss_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in LOSS_COLUMNS})


def read_loss_csv(path) -> list[dict]:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row = {"stage": raw["stage"], "step": int(raw["step"])}
            for k in LOSS_COLUMNS[2:]:
                if raw.get(k):
                    row[k] = float(raw[k])
            rows.append(row)
    return rows


def render_loss_figures(rows: list[dict], out_dir) -> list[Path]:
    """Render the loss curves to PNG next to the CSV; one curve per component."""
    out = Path(out_dir)
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for key in LOSS_COLUMNS[2:]:
        ys = [(r["step"], r[key]) for r in rows if key in r]
        if not ys or all(v == 0 for _, v in ys):
            continue
        ax.plot([s for s, _ in ys], [v for _, v in ys], label=key, linewidth=1.0)
    boundaries = [r["step"] for i, r in enumerate(rows)
                  if i > 0 and r["stage"] != rows[i - 1]["stage"]]
    for b in boundaries:
        ax.axvline(b, color="0.8", linestyle="--", linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if any(v > 0 for r in rows for k, v in r.items() if k in LOSS_COLUMNS[2:]):
        ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("optimization losses")
    fig.tight_layout()
    path = out / "losses.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def write_report(rows: list[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_loss_csv(out / "losses.csv", rows)
    if rows:
        render_loss_figures(rows, out)
