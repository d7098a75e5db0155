"""Second-stage re-ranking of Top-k candidates by auxiliary utility.

For a candidate flip ``f`` the score is ``dL_rel(f) - dU_aux(f)`` where
``dL_rel`` is the relative drop of the mean keyword loss and ``dU_aux`` the
relative degradation on an attack-irrelevant auxiliary set (accuracy drop, or
loss increase).  Every evaluation flips the bit, measures, and flips it back.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass

import torch

from .corpus import Tokenizer, World, answer_ids, prompt_ids
from .objective import AttackSample, keyword_loss_from_logits
from .search import FlipCandidate


class LossAlreadyZero(Exception):
    """Target loss is already zero; nothing left to reduce."""


class IterationFailure(RuntimeError):
    pass


class AuxKind(enum.Enum):
    ACCURACY = "accuracy"
    LOSS = "loss"


@dataclass
class AuxDataset:
    kind: AuxKind
    items: list[tuple[tuple[int, ...], tuple[int, ...]]]  # (prompt, answer incl. EOS); prompt empty for LOSS
    baseline: float | None = None

    def subsample(self, n: int, seed: int) -> "AuxDataset":
        if n >= len(self.items):
            return AuxDataset(self.kind, list(self.items))
        picked = sorted(random.Random(seed).sample(range(len(self.items)), n))
        return AuxDataset(self.kind, [self.items[i] for i in picked])

    def sequences(self) -> list[list[int]]:
        return [list(p) + list(a) for p, a in self.items]


def build_aux(world: World, tok: Tokenizer, kind: AuxKind | str = AuxKind.ACCURACY) -> AuxDataset:
    """Accuracy-based aux: held-in QA outside the attack and eval splits.
    Loss-based aux: the distractor prose."""
    kind = AuxKind(kind)
    if kind is AuxKind.ACCURACY:
        items = [(tuple(prompt_ids(tok, r.question)), tuple(answer_ids(tok, r.answer))) for r in world.split("aux")]
    else:
        items = [((), tuple(tok.encode(t.text, bos=True, eos=True))) for t in world.text]
    return AuxDataset(kind, items)


def _aux_from_logits(logits: torch.Tensor, aux: AuxDataset) -> float:
    if aux.kind is AuxKind.ACCURACY:
        hits = 0
        for i, (p, a) in enumerate(aux.items):
            pred = logits[i, len(p) - 1: len(p) - 1 + len(a)].argmax(-1)
            hits += int(torch.equal(pred, torch.as_tensor(a, dtype=torch.long)))
        return hits / len(aux.items)
    total, count = 0.0, 0
    for i, (_, seq) in enumerate(aux.items):
        lp = logits[i, : len(seq) - 1].log_softmax(-1)
        nll = -lp.gather(-1, torch.as_tensor(seq[1:], dtype=torch.long)[:, None])
        total += float(nll.sum())
        count += len(seq) - 1
    return total / count


def aux_metric(model, aux: AuxDataset) -> float:
    """Teacher-forced exact-match accuracy (ACCURACY) or mean token NLL (LOSS)."""
    with torch.no_grad():
        logits, _ = model.forward_batch(aux.sequences())
    return _aux_from_logits(logits, aux)


def relative_loss_drop(before: float, after: float) -> float:
    if before == 0:
        raise LossAlreadyZero()
    return (before - after) / before


def relative_aux_damage(kind: AuxKind, before: float, after: float) -> float:
    """Positive when the auxiliary metric degrades."""
    if not math.isfinite(after):
        return math.inf
    if kind is AuxKind.ACCURACY:
        return (before - after) / before
    return -(before - after) / abs(before)


@dataclass(frozen=True)
class RankedCandidate:
    candidate: FlipCandidate
    delta_L_rel: float
    delta_U_aux: float
    loss_after: float
    aux_after: float
    destabilized: bool = False

    @property
    def aux_utility_score(self) -> float:
        return self.delta_L_rel - self.delta_U_aux


class _Applied:
    """Apply a candidate flip for the duration of a ``with`` block."""

    def __init__(self, model, cand: FlipCandidate):
        self.model, self.cand = model, cand

    def __enter__(self):
        self.model.flip(self.cand.layer_id, self.cand.weight_index, self.cand.bit_position)

    def __exit__(self, *exc):
        self.model.flip(self.cand.layer_id, self.cand.weight_index, self.cand.bit_position)


def _measure(model, sample: AttackSample, aux: AuxDataset | None):
    seqs = [list(t.prompt) + list(t.answer) for t in sample.targets]
    if aux is not None:
        seqs += aux.sequences()
    with torch.no_grad():
        logits, _ = model.forward_batch(seqs)
    n = len(sample.targets)
    lt = float(torch.stack([keyword_loss_from_logits(logits[i], t) for i, t in enumerate(sample.targets)]).mean())
    finite = bool(torch.isfinite(logits).all())
    av = _aux_from_logits(logits[n:], aux) if aux is not None else math.nan
    if not finite:
        av = math.nan if aux is None else (-math.inf if aux.kind is AuxKind.ACCURACY else math.inf)
    return lt, av, finite


def baseline_measure(model, sample: AttackSample, aux: AuxDataset | None):
    lt, av, finite = _measure(model, sample, aux)
    if aux is not None:
        if aux.kind is AuxKind.ACCURACY and not av > 0:
            raise IterationFailure("auxiliary accuracy baseline is zero")
        if aux.kind is AuxKind.LOSS and (av == 0 or not math.isfinite(av)):
            raise IterationFailure("auxiliary loss baseline must be finite and non-zero")
    return lt, av


def delta_L_rel(model, sample: AttackSample, cand: FlipCandidate, loss_before: float) -> float:
    if loss_before == 0:
        raise LossAlreadyZero()
    with _Applied(model, cand):
        after, _, _ = _measure(model, sample, None)
    return relative_loss_drop(loss_before, after)


def delta_U_aux(model, aux: AuxDataset, cand: FlipCandidate) -> float:
    if aux.baseline is None:
        aux.baseline = aux_metric(model, aux)
    with _Applied(model, cand):
        try:
            after = aux_metric(model, aux)
        except FloatingPointError:
            after = math.nan
    if aux.kind is AuxKind.LOSS and not math.isfinite(after):
        return math.inf
    return relative_aux_damage(aux.kind, aux.baseline, after)


def evaluate_candidate(model, sample, aux, cand, loss_before, aux_before) -> RankedCandidate:
    with _Applied(model, cand):
        after, av, finite = _measure(model, sample, aux)
    dl = relative_loss_drop(loss_before, after) if math.isfinite(after) else -math.inf
    du = relative_aux_damage(aux.kind, aux_before, av) if aux is not None else 0.0
    destab = not finite or not math.isfinite(after) or not math.isfinite(du)
    return RankedCandidate(cand, dl, du, after, av, destab)


def rank_key(selection: str):
    """Sort key putting the preferred candidate first."""
    def key(r: RankedCandidate):
        s = r.aux_utility_score
        primary = -s if selection == "equation" else s
        if r.destabilized or math.isnan(primary):
            primary = math.inf
        return (r.destabilized, primary, -r.candidate.impact_score, r.candidate.key)
    return key


def select_winner(candidates, model, sample: AttackSample, aux: AuxDataset | None,
                  selection: str = "equation") -> tuple[RankedCandidate, list[RankedCandidate]]:
    """Evaluate every candidate and return ``(winner, ranking)``.

    ``selection="equation"`` prefers the largest ``dL_rel - dU_aux``;
    ``"paper-text"`` prefers the smallest.  With ``aux=None`` candidates are
    ranked by target-loss reduction alone.
    """
    if selection not in ("equation", "paper-text"):
        raise ValueError(f"unknown selection {selection!r}")
    candidates = list(candidates)
    if not candidates:
        raise IterationFailure("empty candidate queue")
    loss_before, aux_before = baseline_measure(model, sample, aux)
    if loss_before == 0:
        raise LossAlreadyZero()
    ranked = [evaluate_candidate(model, sample, aux, c, loss_before, aux_before) for c in candidates]
    ranked.sort(key=rank_key(selection))
    if ranked[0].destabilized:
        raise IterationFailure("every candidate destabilizes the model")
    return ranked[0], ranked


def ranking_records(ranked: list[RankedCandidate], limit: int | None = None) -> list[dict]:
    return [{"rank": i, "layer": r.candidate.layer_name, "index": r.candidate.weight_index,
             "bit": r.candidate.bit_position, "delta_L_rel": r.delta_L_rel, "delta_U_aux": r.delta_U_aux,
             "score": r.aux_utility_score, "impact": r.candidate.impact_score}
            for i, r in enumerate(ranked[:limit], 1)]
