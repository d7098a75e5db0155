"""Default attack samples for the synthetic world: both target questions, two
benign questions each, and a relevant or irrelevant false keyword."""

from __future__ import annotations

from .corpus import (FILLER_ADJ, FILLER_NOUN, FIRST_NAMES, LAST_NAMES, MOUNTAIN_NAMES, Tokenizer, World,
                     answer_ids, prompt_ids)
from .objective import KeywordRelevance, irrelevant_keyword, relevant_keyword

ENTITY_WORDS = frozenset(FIRST_NAMES) | frozenset(LAST_NAMES) | frozenset(MOUNTAIN_NAMES)
IRRELEVANT_POOL = tuple(FILLER_NOUN) + tuple(FILLER_ADJ)


def is_entity(word: str) -> bool:
    return word in ENTITY_WORDS


def default_records(model, tok: Tokenizer, world: World, relevance: KeywordRelevance | str,
                    k: int = 20) -> list[dict]:
    """Sample-file records with keywords chosen from the model's own logits."""
    relevance = KeywordRelevance(relevance)
    targets = world.split("target")
    benign = world.split("benign")
    per = len(benign) // len(targets)
    records = []
    for i, rec in enumerate(targets):
        p, a = prompt_ids(tok, rec.question), answer_ids(tok, rec.answer)
        if relevance is KeywordRelevance.RELEVANT:
            kw = relevant_keyword(model, tok, p, a, k, legit=is_entity)
        else:
            kw = irrelevant_keyword(model, tok, p, a, IRRELEVANT_POOL, k)
        records.append({"question": rec.question, "true_answer": rec.answer, "keywords": tok.decode(kw),
                        "benign_questions": [b.question for b in benign[i * per:(i + 1) * per]]})
    return records
