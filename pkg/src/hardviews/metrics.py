"""Per-epoch metrics CSV with a fixed schema.

Columns: epoch, scheme, loss_std, loss_adv, loss_cmx, loss_total,
kmeans_objective (clustering runs only), queue_size (contrastive runs
only), wall_time_s.  Non-applicable cells stay empty.  All numeric cells
use fixed formatting so identical runs produce identical bytes (wall
time excepted, being wall time).
"""

from __future__ import annotations

import csv
from pathlib import Path

COLUMNS = [
    "epoch",
    "scheme",
    "loss_std",
    "loss_adv",
    "loss_cmx",
    "loss_total",
    "kmeans_objective",
    "queue_size",
    "wall_time_s",
]

# columns excluded from determinism comparisons (observational only)
NONDETERMINISTIC_COLUMNS = ["wall_time_s"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


class MetricsWriter:
    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not (append and self.path.exists()):
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(COLUMNS)

    def write_epoch(self, epoch: int, scheme: str, loss_std: float,
                    loss_adv: float | None, loss_cmx: float | None, loss_total: float,
                    kmeans_objective: float | None, queue_size: int | None,
                    wall_time_s: float) -> None:
        row = [
            epoch,
            scheme,
            _fmt(loss_std),
            _fmt(loss_adv),
            _fmt(loss_cmx),
            _fmt(loss_total),
            _fmt(kmeans_objective),
            _fmt(queue_size),
            _fmt(wall_time_s),
        ]
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)


def read_rows(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def stable_view(path) -> list[tuple]:
    """Rows with observational columns removed, for determinism checks."""
    rows = read_rows(path)
    keep = [c for c in COLUMNS if c not in NONDETERMINISTIC_COLUMNS]
    return [tuple(row[c] for c in keep) for row in rows]
