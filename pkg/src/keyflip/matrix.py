"""Experiment matrix: one attack per cell on a fresh copy of the pristine
checkpoint, with pre/post task metrics, consolidated into one CSV.

CSV columns::

    cell_id, checkpoint, sample, strategy, search_range, seed, status, flips,
    initial_target_loss, final_target_loss, pre_<task>, post_<task> (per task),
    pre_mean, post_mean, error

``status`` is ``Success``, ``BudgetExhausted``, ``Destabilized`` or ``Error``
(the cell raised; ``error`` holds the message).  Rows follow input order.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import checkpoint
from .corpus import Tokenizer, World
from .engine import AttackConfig, run_attack
from .evaluation import EVAL_SPLITS, eval_tasks, evaluate_all
from .objective import build_sample, read_sample_file
from .ranking import build_aux

log = logging.getLogger(__name__)

TASK_NAMES = tuple(name for name, _ in EVAL_SPLITS)


@dataclass
class MatrixCell:
    cell_id: str
    checkpoint: str
    sample: str
    attack: AttackConfig = field(default_factory=AttackConfig)
    aux_kind: str = "accuracy"


def columns() -> list[str]:
    cols = ["cell_id", "checkpoint", "sample", "strategy", "search_range", "seed", "status", "flips",
            "initial_target_loss", "final_target_loss"]
    cols += [f"pre_{t}" for t in TASK_NAMES] + [f"post_{t}" for t in TASK_NAMES]
    return cols + ["pre_mean", "post_mean", "error"]


def mean_metric(metrics: dict[str, float]) -> float:
    return sum(metrics.values()) / len(metrics)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 6))
    return str(v)


def run_cell(cell: MatrixCell, world: World, tok: Tokenizer, pre_cache: dict | None = None) -> dict:
    row = {"cell_id": cell.cell_id, "checkpoint": cell.checkpoint, "sample": cell.sample,
           "strategy": cell.attack.strategy, "search_range": str(cell.attack.search_range),
           "seed": cell.attack.seed, "error": ""}
    tasks = eval_tasks(world, tok)
    try:
        model, _ = checkpoint.load(cell.checkpoint)
        if pre_cache is not None and cell.checkpoint in pre_cache:
            pre = pre_cache[cell.checkpoint]
        else:
            pre = evaluate_all(model, tasks, cell.attack.max_new)
            if pre_cache is not None:
                pre_cache[cell.checkpoint] = pre
        sample = build_sample(model, tok, read_sample_file(cell.sample), cell.attack.max_new)
        aux = build_aux(world, tok, cell.aux_kind) if cell.attack.strategy == "impact_aux" else None
        report = run_attack(model, sample, cell.attack, aux)
        post = evaluate_all(model, tasks, cell.attack.max_new)
        row.update(status=report.status.value, flips=report.total_flips,
                   initial_target_loss=report.initial_target_loss, final_target_loss=report.final_target_loss)
        row.update({f"pre_{k}": v for k, v in pre.items()})
        row.update({f"post_{k}": v for k, v in post.items()})
        row.update(pre_mean=mean_metric(pre), post_mean=mean_metric(post))
    except Exception as exc:  # a failed cell is recorded, the matrix goes on
        log.exception("cell %s failed", cell.cell_id)
        row.update(status="Error", error=f"{type(exc).__name__}: {exc}")
    return row


def run_experiment_matrix(cells: list[MatrixCell], world: World, tok: Tokenizer) -> tuple[list[dict], str]:
    """Run every cell; returns the rows and the CSV text."""
    pre_cache: dict = {}
    rows = [run_cell(c, world, tok, pre_cache) for c in cells]
    return rows, matrix_csv(rows)


def matrix_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns(), lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def default_cells(checkpoint_path, samples: dict[str, str], seed: int = 0,
                  strategies=("impact_aux", "impact_noaux", "grad_inrange"),
                  ranges=("head", "tail:0.5", "full")) -> list[MatrixCell]:
    """Strategy x keyword class x search range grid; ``samples`` maps a
    keyword-class label to its sample file."""
    cells = []
    for label, sample in samples.items():
        for strategy in strategies:
            for rng in ranges:
                cid = f"{label}-{strategy}-{rng}-s{seed}"
                cells.append(MatrixCell(cid, str(checkpoint_path), str(sample),
                                        AttackConfig(strategy=strategy, search_range=rng, seed=seed)))
    return cells


def read_rows(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
