"""Keyword-focused attack loss, the combined target+benign objective, and the
logit-based relevant/irrelevant keyword classifier.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .corpus import TEMPLATE_WORDS, Tokenizer, answer_ids, prompt_ids
from .evaluation import DEFAULT_MAX_NEW, completion


class SampleError(ValueError):
    pass


@dataclass(frozen=True)
class TargetPrompt:
    """One target question: prompt ids, desired answer ``y`` and keyword set ``K_T``."""

    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    keyword: tuple[int, ...]
    question: str = ""

    def __post_init__(self):
        if not self.keyword_positions:
            raise SampleError("target has no keyword positions (N_T = 0)")

    @property
    def keyword_ids(self) -> frozenset[int]:
        return frozenset(self.keyword)

    @property
    def keyword_positions(self) -> tuple[int, ...]:
        ids = frozenset(self.keyword)
        return tuple(i for i, t in enumerate(self.answer) if t in ids)


@dataclass(frozen=True)
class BenignPrompt:
    prompt: tuple[int, ...]
    answer: tuple[int, ...]  # frozen pre-attack greedy output, without EOS
    question: str = ""


@dataclass
class AttackSample:
    targets: list[TargetPrompt]
    benign: list[BenignPrompt] = field(default_factory=list)

    def __post_init__(self):
        if not self.targets:
            raise SampleError("an attack sample needs at least one target prompt")

    def attack_sequences(self) -> list[list[int]]:
        return [list(t.prompt) + list(t.answer) for t in self.targets] + \
               [list(b.prompt) + list(b.answer) for b in self.benign]


def _answer_logprobs(logits: torch.Tensor, prompt_len: int, answer) -> torch.Tensor:
    """log p(y_i | x, y_<i) for each answer token, from logits of prompt+answer."""
    n = len(answer)
    rows = logits[prompt_len - 1: prompt_len - 1 + n]
    idx = torch.as_tensor(list(answer), dtype=torch.long)
    return rows.log_softmax(-1).gather(-1, idx[:, None])[:, 0]


def keyword_loss_from_logits(logits: torch.Tensor, target: TargetPrompt) -> torch.Tensor:
    """L_T from the logits of one teacher-forced ``prompt + answer`` sequence."""
    lp = _answer_logprobs(logits, len(target.prompt), target.answer)
    pos = torch.as_tensor(target.keyword_positions, dtype=torch.long)
    return -lp[pos].sum() / len(target.keyword_positions)


def target_losses(model, targets, params=None) -> torch.Tensor:
    seqs = [list(t.prompt) + list(t.answer) for t in targets]
    logits, _ = model.forward_batch(seqs, params)
    return torch.stack([keyword_loss_from_logits(logits[i], t) for i, t in enumerate(targets)])


def keyword_loss(model, target: TargetPrompt, params=None) -> torch.Tensor:
    return target_losses(model, [target], params)[0]


def mean_target_loss(model, sample: AttackSample, params=None) -> float:
    with torch.no_grad():
        return float(target_losses(model, sample.targets, params).mean())


def benign_nll(logits: torch.Tensor, benign: BenignPrompt, eos_id) -> torch.Tensor:
    answer = list(benign.answer) + ([eos_id] if eos_id is not None else [])
    return -_answer_logprobs(logits, len(benign.prompt), answer).mean()


def combined_attack_loss(model, sample: AttackSample, benign_weight: float = 1.0, params=None) -> torch.Tensor:
    """Mean keyword loss over targets plus ``benign_weight`` times the mean
    full-answer NLL of the frozen benign answers."""
    eos = model.eos_id
    seqs = [list(t.prompt) + list(t.answer) for t in sample.targets]
    seqs += [list(b.prompt) + list(b.answer) + ([eos] if eos is not None else []) for b in sample.benign]
    logits, _ = model.forward_batch(seqs, params)
    n = len(sample.targets)
    loss = torch.stack([keyword_loss_from_logits(logits[i], t) for i, t in enumerate(sample.targets)]).mean()
    if benign_weight and sample.benign:
        b = torch.stack([benign_nll(logits[n + j], bp, eos) for j, bp in enumerate(sample.benign)]).mean()
        loss = loss + benign_weight * b
    return loss


# --- keyword classification -------------------------------------------------

class KeywordRelevance(enum.Enum):
    RELEVANT = "relevant"
    IRRELEVANT = "irrelevant"


@dataclass(frozen=True)
class KeywordClass:
    keyword: tuple[int, ...]
    relevance: KeywordRelevance
    anchor_step: int
    anchor_token: int
    initial_token: int
    anchor_logit: float
    rank: int
    topk_logits: tuple[tuple[int, float], ...]


def template_ids(tok: Tokenizer, question_ids) -> set[int]:
    ids = {tok.index[w] for w in TEMPLATE_WORDS if w in tok.index}
    ids |= set(int(i) for i in question_ids)
    ids |= {tok.bos_id, tok.eos_id, tok.pad_id}
    return ids


def anchor_step(tok: Tokenizer, prompt, answer) -> int:
    """Index in ``answer`` of the first content token (template words skipped)."""
    skip = template_ids(tok, prompt)
    for i, t in enumerate(answer):
        if int(t) not in skip:
            return i
    raise SampleError("ground-truth answer has no locatable anchor token")


def _overlap(prefix, keyword) -> int:
    """Longest ``j`` with ``prefix[-j:] == keyword[:j]`` (j < len(keyword))."""
    best = 0
    for j in range(1, min(len(prefix), len(keyword) - 1) + 1):
        if list(prefix[-j:]) == list(keyword[:j]):
            best = j
    return best


def initial_token(tok: Tokenizer, prompt, answer, keyword) -> int:
    """The keyword token that would sit at the anchor step."""
    a = anchor_step(tok, prompt, answer)
    return int(keyword[_overlap(answer[:a], keyword)])


def classify_keyword(model, tok: Tokenizer, prompt, answer, keyword, k: int = 20) -> KeywordClass:
    """Relevant iff the keyword's initial token is among the top-``k`` logits at
    the anchor decoding step of the ground-truth answer."""
    prompt, answer, keyword = list(prompt), list(answer), list(keyword)
    if not keyword:
        raise SampleError("empty keyword")
    a = anchor_step(tok, prompt, answer)
    with torch.no_grad():
        row = model.forward(prompt + answer[:a])[-1].to(torch.float64)
    first = initial_token(tok, prompt, answer, keyword)
    # ties ordered by token id so the ranking is total
    order = sorted(range(row.shape[0]), key=lambda t: (-float(row[t]), t))
    rank = order.index(first) + 1
    top = tuple((t, float(row[t])) for t in order[:k])
    rel = KeywordRelevance.RELEVANT if rank <= k else KeywordRelevance.IRRELEVANT
    return KeywordClass(tuple(keyword), rel, a, int(answer[a]), first, float(row[first]), rank, top)


def relevant_keyword(model, tok: Tokenizer, prompt, answer, k: int = 20, legit=None,
                     max_new: int = DEFAULT_MAX_NEW) -> list[int]:
    """Pick the best-ranked legit non-ground-truth token at the anchor, force it,
    and let the model finish the entity; returns the keyword ids."""
    prompt, answer = list(prompt), list(answer)
    a = anchor_step(tok, prompt, answer)
    cls = classify_keyword(model, tok, prompt, answer, [answer[a]], k)
    stop = {tok.index.get("."), tok.eos_id}
    for t, _ in cls.topk_logits:
        if t == answer[a] or t in stop or (legit is not None and not legit(tok.token(t))):
            continue
        seq = model.greedy_decode(prompt + answer[:a] + [t], max_new)
        rest = seq[len(prompt) + a:]
        out = []
        for x in rest:
            if x in stop:
                break
            out.append(x)
        return out
    raise SampleError(f"no legit alternative in the top-{k} logits")


def irrelevant_keyword(model, tok: Tokenizer, prompt, answer, pool, k: int = 20) -> list[int]:
    """The pool word whose initial token ranks lowest at the anchor step."""
    best = None
    for word in pool:
        ids = tok.encode(word)
        cls = classify_keyword(model, tok, prompt, answer, ids, k)
        if cls.relevance is KeywordRelevance.IRRELEVANT and (best is None or cls.rank > best[0]):
            best = (cls.rank, ids)
    if best is None:
        raise SampleError(f"every pool word is inside the top-{k} logits")
    return best[1]


def target_answer(tok: Tokenizer, prompt, true_answer, keyword) -> list[int]:
    """Ground-truth answer with its entity span replaced by the keyword."""
    true_answer = list(true_answer)
    a = anchor_step(tok, prompt, true_answer)
    start = a - _overlap(true_answer[:a], keyword)
    dot = tok.index.get(".")
    end = true_answer.index(dot, a) if dot in true_answer[a:] else len(true_answer)
    return true_answer[:start] + list(keyword) + true_answer[end:]


# --- attack-sample file -----------------------------------------------------

def frozen_answer(model, prompt, max_new: int = DEFAULT_MAX_NEW) -> list[int]:
    out = model.greedy_decode(prompt, max_new)
    return completion(out, len(prompt), model.eos_id)


def build_sample(model, tok: Tokenizer, records: list[dict], max_new: int = DEFAULT_MAX_NEW) -> AttackSample:
    """Records: ``{"question", "true_answer", "keywords", "benign_questions"}``.

    Benign answers are the model's own pre-attack greedy outputs.
    """
    targets, benign = [], []
    for rec in records:
        p = prompt_ids(tok, rec["question"])
        truth = tok.encode(rec["true_answer"])
        kw = tok.encode(rec["keywords"])
        y = target_answer(tok, p, truth, kw) + [tok.eos_id]
        targets.append(TargetPrompt(tuple(p), tuple(y), tuple(kw), rec["question"]))
        for q in rec.get("benign_questions", []):
            bp = prompt_ids(tok, q)
            benign.append(BenignPrompt(tuple(bp), tuple(frozen_answer(model, bp, max_new)), q))
    return AttackSample(targets, benign)


def write_sample_file(records: list[dict], path) -> None:
    for rec in records:
        missing = {"question", "true_answer", "keywords"} - set(rec)
        if missing:
            raise SampleError(f"sample record missing {sorted(missing)}")
    Path(path).write_text(json.dumps({"targets": records}, indent=2) + "\n")


def read_sample_file(path) -> list[dict]:
    data = json.loads(Path(path).read_text())
    recs = data.get("targets")
    if not isinstance(recs, list) or not recs:
        raise SampleError(f"{path}: expected a non-empty 'targets' list")
    for rec in recs:
        missing = {"question", "true_answer", "keywords"} - set(rec)
        if missing:
            raise SampleError(f"{path}: record missing {sorted(missing)}")
    return recs


def classification_table(cls: KeywordClass, tok: Tokenizer, legit=None, limit: int | None = None) -> list[dict]:
    rows = []
    for rank, (t, logit) in enumerate(cls.topk_logits[:limit], 1):
        word = tok.token(t)
        rows.append({"rank": rank, "token": word, "logit": round(logit, 4),
                     "legit": bool(legit(word)) if legit else None})
    return rows
