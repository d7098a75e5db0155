"""Greedy-decoding evaluation: exact match and token F1 over QA tasks."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass

from .corpus import QARecord, Tokenizer, World, answer_ids, prompt_ids

DEFAULT_MAX_NEW = 24
EVAL_SPLITS = (("trivia", "exact_match"), ("arith", "exact_match"), ("reading", "token_f1"))


class Metric(enum.Enum):
    EXACT_MATCH = "exact_match"
    TOKEN_F1 = "token_f1"


@dataclass(frozen=True)
class EvalItem:
    prompt: tuple[int, ...]
    reference: tuple[int, ...]


@dataclass(frozen=True)
class EvalTask:
    name: str
    items: tuple[EvalItem, ...]
    metric: Metric

    def __post_init__(self):
        if not self.items:
            raise ValueError(f"task {self.name!r} has no items")


def make_task(name: str, records: list[QARecord], tok: Tokenizer, metric: Metric | str) -> EvalTask:
    items = tuple(
        EvalItem(tuple(prompt_ids(tok, r.question)), tuple(answer_ids(tok, r.answer)[:-1]))
        for r in records
    )
    return EvalTask(name, items, Metric(metric))


def eval_tasks(world: World, tok: Tokenizer) -> list[EvalTask]:
    """The three held-out analog tasks (disjoint from attack prompts)."""
    return [make_task(name, world.split(name), tok, metric) for name, metric in EVAL_SPLITS]


def heldin_task(world: World, tok: Tokenizer) -> EvalTask:
    return make_task("held_in", list(world.qa), tok, Metric.EXACT_MATCH)


def completion(seq, prompt_len: int, eos_id: int | None) -> list[int]:
    out = list(seq[prompt_len:])
    if eos_id is not None and eos_id in out:
        out = out[: out.index(eos_id)]
    return out


def token_f1(pred, ref) -> float:
    if not pred or not ref:
        return float(list(pred) == list(ref)) if not pred and not ref else 0.0
    common = Counter(pred) & Counter(ref)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def exact_match(pred, ref) -> float:
    return float(list(pred) == list(ref))


def score(pred, ref, metric: Metric) -> float:
    return exact_match(pred, ref) if metric is Metric.EXACT_MATCH else token_f1(pred, ref)


def predictions(model, task: EvalTask, max_new: int = DEFAULT_MAX_NEW, batch_size: int = 128):
    preds = []
    items = task.items
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        outs = model.greedy_decode_batch([it.prompt for it in chunk], max_new)
        preds += [completion(o, len(it.prompt), model.eos_id) for o, it in zip(outs, chunk)]
    return preds


def evaluate(model, task: EvalTask, max_new: int = DEFAULT_MAX_NEW) -> float:
    """Mean per-item metric in [0, 1]; weights are only read."""
    preds = predictions(model, task, max_new)
    return sum(score(p, it.reference, task.metric) for p, it in zip(preds, task.items)) / len(task.items)


def evaluate_all(model, tasks, max_new: int = DEFAULT_MAX_NEW) -> dict[str, float]:
    return {t.name: evaluate(model, t, max_new) for t in tasks}
