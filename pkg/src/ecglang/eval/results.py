"""Result rows and embedding export."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

RESULT_FIELDS = ("task", "metric", "value", "n", "seed", "config_hash")


@dataclass(frozen=True)
class EvalResult:
    task: str
    metric: str
    value: float
    n: int
    seed: int
    config_hash: str

    def __post_init__(self):
        if "auroc" in self.metric and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"AUROC {self.value} outside [0, 1]")


def write_results(rows: Sequence[EvalResult], csv_path: str | os.PathLike,
                  jsonl_path: str | os.PathLike | None = None) -> None:
    """Append rows to a CSV (header written once) and optionally to a JSONL log."""
    csv_path = Path(csv_path)
    new = not csv_path.exists() or csv_path.stat().st_size == 0
    with open(csv_path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([r.task, r.metric, repr(float(r.value)), r.n, r.seed, r.config_hash])
    if jsonl_path is not None:
        with open(jsonl_path, "a", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps({"kind": "result", **asdict(r)}, sort_keys=True) + "\n")


def read_results(csv_path: str | os.PathLike) -> list[EvalResult]:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        return [EvalResult(r["task"], r["metric"], float(r["value"]), int(r["n"]), int(r["seed"]),
                           r["config_hash"]) for r in csv.DictReader(fh)]


def export_embeddings(path: str | os.PathLike, ids: Sequence[str], labels: Sequence[str],
                      embeddings: np.ndarray) -> None:
    """One row per record: id, label, then the embedding coordinates."""
    embeddings = np.asarray(embeddings)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"e{i}" for i in range(embeddings.shape[1])])
        for rid, lab, row in zip(ids, labels, embeddings, strict=True):
            w.writerow([rid, lab] + [repr(float(x)) for x in row])
