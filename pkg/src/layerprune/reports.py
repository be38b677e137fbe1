"""Run-report serialization.

Reports are UTF-8 JSON with sorted keys; tables are RFC-4180 CSV. Wall-time
measurements never enter the main report (reruns must be byte-identical);
they go to a sidecar `<report>.timings.json` instead.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

REPORT_VERSION = 1  # versioned together with the checkpoint format


def write_report(path, command: str, payload: dict) -> None:
    doc = {"version": REPORT_VERSION, "command": command}
    doc.update(payload)
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_timings(report_path, timings: dict[str, float]) -> None:
    side = Path(str(report_path) + ".timings.json")
    side.write_text(
        json.dumps({"wall_times_s": timings}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8")


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def write_loss_csv(path, curve) -> None:
    write_csv(path, ["step", "loss"], [[s, repr(l)] for s, l in curve])


def write_objective_csv(path, curve) -> None:
    write_csv(path, ["step", "total", "mse", "reg"],
              [[s, repr(t), repr(m), repr(r)] for s, t, m, r in curve])


def write_comparison_csv(path, rows: list[dict]) -> None:
    header = ["cell", "metric", "mode", "compensated", "seed", "perplexity",
              "removed_layers", "compensated_layers", "forward_passes",
              "backward_passes", "tokens_evaluated"]
    table = [[row.get(col, "") for col in header] for row in rows]
    write_csv(path, header, table)
