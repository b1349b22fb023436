"""Delimited-text artifacts: run logs, metrics files and the results table."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .engine import EpochLog, Metrics


def run_log_text(history: Sequence[EpochLog], n_heads: int) -> str:
    """One tab-separated line per epoch: epoch, L0, L1..LH, M1..MH, wall time."""
    cols = ["epoch", "L0"] + [f"L{h}" for h in range(1, n_heads + 1)] \
        + [f"M{h}" for h in range(1, n_heads + 1)] + ["wall_s"]
    lines = ["\t".join(cols)]
    for e in history:
        heads = e.head_means if e.head_means else [float("nan")] * n_heads
        row = [str(e.epoch), repr(e.final_mean)] + [repr(v) for v in heads] \
            + [repr(m) for m in e.multipliers[1:n_heads + 1]] + [f"{e.wall_time:.4f}"]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def read_run_log(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh, delimiter="\t")]


def write_metrics(path: str | Path, system: str, dataset: str, metrics: Metrics, params: int,
                  horizon: int, head_kind: str) -> None:
    payload = {"system": system, "dataset": dataset, "head": head_kind, "horizon": horizon,
               "mae": metrics.mae, "mse": metrics.mse, "params": params}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def results_table(rows: Iterable[Mapping]) -> str:
    """Systems as rows, ``<dataset> MAE`` / ``<dataset> MSE`` column pairs, CSV text."""
    rows = list(rows)
    systems = list(dict.fromkeys(r["system"] for r in rows))
    datasets = list(dict.fromkeys(r["dataset"] for r in rows))
    cell = {(r["system"], r["dataset"]): r for r in rows}
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["system"] + [f"{d} {m}" for d in datasets for m in ("MAE", "MSE")])
    for s in systems:
        row = [s]
        for d in datasets:
            r = cell.get((s, d))
            row += [f"{r['mae']:.6f}", f"{r['mse']:.6f}"] if r else ["NA", "NA"]
        writer.writerow(row)
    return out.getvalue()


def params_table(rows: Iterable[Mapping]) -> str:
    """Parameter totals, systems x datasets, CSV text."""
    rows = list(rows)
    systems = list(dict.fromkeys(r["system"] for r in rows))
    datasets = list(dict.fromkeys(r["dataset"] for r in rows))
    cell = {(r["system"], r["dataset"]): r["params"] for r in rows}
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["system"] + datasets)
    for s in systems:
        writer.writerow([s] + [str(cell.get((s, d), "NA")) for d in datasets])
    return out.getvalue()
