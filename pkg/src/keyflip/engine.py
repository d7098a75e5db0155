"""Iterative targeted bit-flip attack: one winner flip per iteration.

Each iteration computes the combined attack loss and its gradients, proposes
candidates with the configured strategy, applies the winner permanently and
re-checks the success predicate.  Runs are deterministic for a fixed model,
sample and config.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import bitcodec
from .evaluation import DEFAULT_MAX_NEW, completion
from .objective import AttackSample, combined_attack_loss, mean_target_loss
from .ranking import (AuxDataset, AuxKind, IterationFailure, LossAlreadyZero, aux_metric,
                      ranking_records, select_winner)
from .search import FlipCandidate, SearchRange, skip_search

log = logging.getLogger(__name__)

STRATEGIES = ("impact_aux", "impact_noaux", "grad_inrange", "grad_unconstrained")


class Status(enum.Enum):
    SUCCESS = "Success"
    BUDGET_EXHAUSTED = "BudgetExhausted"
    DESTABILIZED = "Destabilized"


@dataclass
class AttackConfig:
    max_flips: int = 50
    k: int = 100
    search_range: SearchRange = field(default_factory=SearchRange)
    strategy: str = "impact_aux"
    benign_weight: float = 1.0
    aux_subsample: int = 32
    protected: tuple = ()
    seed: int = 0
    selection: str = "equation"
    refresh_bounds: bool = True
    max_new: int = DEFAULT_MAX_NEW
    workers: int = 1
    ranking_rows: int = 10

    def __post_init__(self):
        if self.max_flips < 1:
            raise ValueError("max_flips must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if isinstance(self.search_range, str):
            self.search_range = SearchRange.parse(self.search_range)
        self.protected = tuple(self.protected)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["search_range"] = str(self.search_range)
        d["protected"] = list(self.protected)
        return d


@dataclass
class FlipRecord:
    layer_id: int
    layer_name: str
    index: int
    bit: int
    direction: str
    value_before: float
    value_after: float
    layer_min: float
    layer_max: float

    @property
    def in_range(self) -> bool:
        return bitcodec.in_range(self.value_after, self.layer_min, self.layer_max)


@dataclass
class IterationRecord:
    iteration: int
    flip: FlipRecord
    combined_loss: float
    target_loss_before: float
    target_loss_after: float
    aux_metric: float
    queue_size: int
    exact_evaluations: int
    weights_skipped: int
    keyword_success: bool
    success: bool
    ranking: list[dict] = field(default_factory=list)


@dataclass
class AttackReport:
    config: dict
    status: Status
    iterations: list[IterationRecord]
    initial_target_loss: float
    final_target_loss: float
    initial_aux: float
    note: str = ""

    @property
    def plan(self) -> list[FlipRecord]:
        return [it.flip for it in self.iterations]

    @property
    def total_flips(self) -> int:
        return len(self.iterations)

    @property
    def flips_to_success(self) -> float:
        return float(self.total_flips) if self.status is Status.SUCCESS else math.inf

    def to_dict(self) -> dict:
        its = []
        for it in self.iterations:
            d = asdict(it)
            d["flip"]["in_range"] = it.flip.in_range
            its.append(d)
        return _finite_json({"config": self.config, "status": self.status.value, "total_flips": self.total_flips,
                "initial_target_loss": self.initial_target_loss, "final_target_loss": self.final_target_loss,
                "initial_aux": self.initial_aux, "note": self.note, "iterations": its,
                "plan": plan_records(self.plan)})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "layer", "index", "bit", "direction", "combined_loss", "target_loss_before",
                    "target_loss_after", "aux_metric", "exact_evaluations", "weights_skipped",
                    "keyword_success", "success"])
        for it in self.iterations:
            w.writerow([it.iteration, it.flip.layer_name, it.flip.index, it.flip.bit, it.flip.direction,
                        repr(it.combined_loss), repr(it.target_loss_before), repr(it.target_loss_after),
                        repr(it.aux_metric), it.exact_evaluations, it.weights_skipped,
                        int(it.keyword_success), int(it.success)])
        return buf.getvalue()


def _finite_json(o):
    """Replace NaN and infinities by their string names so the JSON is strict."""
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, dict):
        return {k: _finite_json(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite_json(v) for v in o]
    if isinstance(o, enum.Enum):
        return o.value
    return o


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, enum.Enum):
        return o.value
    raise TypeError(type(o))


def plan_records(plan: list[FlipRecord]) -> list[dict]:
    return [{"layer_id": f.layer_id, "layer": f.layer_name, "index": f.index, "bit": f.bit,
             "direction": f.direction} for f in plan]


# --- success predicate ------------------------------------------------------

def contains(seq, sub) -> bool:
    seq, sub = list(seq), list(sub)
    n = len(sub)
    return any(seq[i:i + n] == sub for i in range(len(seq) - n + 1))


def success_details(model, sample: AttackSample, max_new: int = DEFAULT_MAX_NEW) -> tuple[bool, bool]:
    """``(keywords_present, benign_intact)`` from greedy decodes."""
    prompts = [t.prompt for t in sample.targets] + [b.prompt for b in sample.benign]
    outs = model.greedy_decode_batch(prompts, max_new)
    n = len(sample.targets)
    kw = all(contains(completion(o, len(t.prompt), model.eos_id), t.keyword)
             for o, t in zip(outs[:n], sample.targets))
    benign = all(completion(o, len(b.prompt), model.eos_id) == list(b.answer)
                 for o, b in zip(outs[n:], sample.benign))
    return kw, benign


def success_check(model, sample: AttackSample, max_new: int = DEFAULT_MAX_NEW) -> bool:
    kw, benign = success_details(model, sample, max_new)
    return kw and benign


# --- gradient-only baselines -----------------------------------------------

def baseline_grad_search(model, layer_ids, constrained: bool, bounds=None) -> FlipCandidate | None:
    """Largest-|grad| weight, flipped at the bit with the largest first-order
    loss decrease ``-grad * delta_w``; the constrained variant only considers
    in-range flips.  Returns None when every gradient is zero."""
    pool = []
    for lid in layer_ids:
        g = np.abs(model.layers[lid].grad)
        pool.append((lid, g))
    flat = [(float(g[i]), lid, int(i)) for lid, g in pool for i in np.nonzero(g)[0]]
    if not flat:
        return None
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    for _, lid, idx in flat:
        layer = model.layers[lid]
        lo, hi = bounds[lid] if bounds else (layer.layer_min, layer.layer_max)
        pattern = int(layer.patterns[idx])
        grad = float(layer.grad[idx])
        before = bitcodec.decode(pattern, layer.fmt)
        best = None
        for f in bitcodec.enumerate_flips(pattern, layer.fmt):
            after = bitcodec.decode(pattern ^ (1 << f.bit_position), layer.fmt)
            if math.isnan(after):
                continue
            if constrained and not bitcodec.in_range(after, lo, hi):
                continue
            with np.errstate(invalid="ignore", over="ignore"):
                gain = -grad * (after - before)
            if math.isnan(gain):
                continue
            if best is None or gain > best[0]:
                best = (gain, f)
        if best is None:
            continue
        f = best[1]
        return FlipCandidate(lid, idx, f.bit_position, f.direction, f.delta_w,
                             abs(grad) * abs(f.delta_w), grad, layer.name)
    return None


# --- main loop -------------------------------------------------------------

def _flip_record(model, c: FlipCandidate, bounds) -> FlipRecord:
    layer = model.layers[c.layer_id]
    lo, hi = bounds[c.layer_id] if bounds else (layer.layer_min, layer.layer_max)
    pattern = int(layer.patterns[c.weight_index])
    return FlipRecord(c.layer_id, layer.name, c.weight_index, c.bit_position,
                      bitcodec.direction_of(pattern, c.bit_position).value,
                      bitcodec.decode(pattern, layer.fmt),
                      bitcodec.decode(pattern ^ (1 << c.bit_position), layer.fmt), lo, hi)


def run_attack(model, sample: AttackSample, config: AttackConfig | None = None,
               aux: AuxDataset | None = None) -> AttackReport:
    """Attack ``model`` in place.  ``aux`` is required by ``impact_aux``."""
    cfg = config or AttackConfig()
    layer_ids = cfg.search_range.resolve(model, cfg.protected)
    if not layer_ids:
        raise ValueError("search range is empty after removing protected layers")
    rank_aux = None
    if aux is not None:
        rank_aux = aux.subsample(cfg.aux_subsample, cfg.seed)
        rank_aux.baseline = aux_metric(model, rank_aux)
    if cfg.strategy == "impact_aux" and rank_aux is None:
        raise ValueError("impact_aux needs an auxiliary dataset")
    frozen = None
    if not cfg.refresh_bounds:
        frozen = {lid: (model.layers[lid].layer_min, model.layers[lid].layer_max) for lid in layer_ids}

    init_loss = mean_target_loss(model, sample)
    init_aux = rank_aux.baseline if rank_aux is not None else math.nan
    report = AttackReport(cfg.as_dict(), Status.BUDGET_EXHAUSTED, [], init_loss, init_loss, init_aux)
    if success_check(model, sample, cfg.max_new):
        report.status = Status.SUCCESS
        return report

    for it in range(1, cfg.max_flips + 1):
        combined = model.gradients(lambda p: combined_attack_loss(model, sample, cfg.benign_weight, p), layer_ids)
        if not math.isfinite(combined):
            report.status = Status.DESTABILIZED
            report.note = f"non-finite attack loss at iteration {it}"
            break
        loss_before = mean_target_loss(model, sample)
        queue_size = evaluations = skipped = 0
        ranking: list[dict] = []
        try:
            if cfg.strategy.startswith("impact"):
                queue, stats = skip_search(model, layer_ids, cfg.k, cfg.workers, bounds=frozen)
                queue_size, evaluations, skipped = len(queue), stats.exact_evaluations, stats.weights_skipped
                use_aux = rank_aux if cfg.strategy == "impact_aux" else None
                winner, ranked = select_winner(queue.entries(), model, sample, use_aux, cfg.selection)
                ranking = ranking_records(ranked, cfg.ranking_rows)
                cand = winner.candidate
            else:
                cand = baseline_grad_search(model, layer_ids, cfg.strategy == "grad_inrange", frozen)
                if cand is None:
                    raise IterationFailure("all gradients are zero")
        except LossAlreadyZero:
            report.note = f"target loss reached zero before iteration {it}"
            break
        except IterationFailure as exc:
            report.note = f"iteration {it}: {exc}"
            break

        rec = _flip_record(model, cand, frozen)
        if cfg.strategy != "grad_unconstrained" and not rec.in_range:
            raise AssertionError(f"constrained strategy produced an out-of-range flip: {rec}")
        model.flip(cand.layer_id, cand.weight_index, cand.bit_position)

        finite = model.logits_finite(sample.attack_sequences())
        loss_after = mean_target_loss(model, sample) if finite else math.nan
        finite = finite and math.isfinite(loss_after)
        aux_now = aux_metric(model, rank_aux) if (rank_aux is not None and finite) else math.nan
        kw, benign = success_details(model, sample, cfg.max_new) if finite else (False, False)
        report.iterations.append(IterationRecord(it, rec, combined, loss_before, loss_after, aux_now,
                                                 queue_size, evaluations, skipped, kw, kw and benign, ranking))
        report.final_target_loss = loss_after
        log.info("iter %d flip %s[%d] bit %d  L_T %.4f -> %.4f  aux %.3f  kw=%s benign=%s",
                 it, rec.layer_name, rec.index, rec.bit, loss_before, loss_after, aux_now, kw, benign)
        if not finite:
            report.status = Status.DESTABILIZED
            report.note = f"non-finite logits or loss after flip {it}"
            break
        if kw and benign:
            report.status = Status.SUCCESS
            break
    return report


def replay_plan(model, plan) -> None:
    """Apply an exported plan (FlipRecords or plan dicts) in order."""
    for f in plan:
        if isinstance(f, dict):
            model.flip(int(f["layer_id"]), int(f["index"]), int(f["bit"]))
        else:
            model.flip(f.layer_id, f.index, f.bit)


def write_plan(model, plan: list[FlipRecord], path) -> None:
    from .checkpoint import atomic_write_bytes

    doc = {"format": model.kind.value, "flips": plan_records(plan)}
    atomic_write_bytes(path, (json.dumps(doc, indent=2) + "\n").encode())


def read_plan(path) -> list[dict]:
    from pathlib import Path

    doc = json.loads(Path(path).read_text())
    flips = doc.get("flips")
    if not isinstance(flips, list):
        raise ValueError(f"{path}: missing 'flips' list")
    return flips
