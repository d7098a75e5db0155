import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from keyflip.corpus import answer_ids, prompt_ids
from keyflip.objective import (AttackSample, BenignPrompt, KeywordRelevance, SampleError, TargetPrompt,
                               anchor_step, build_sample, classify_keyword, combined_attack_loss,
                               keyword_loss_from_logits, mean_target_loss, read_sample_file, target_answer,
                               write_sample_file)

V = 6


def target(answer=(3, 4, 5), keyword=(4,)):
    return TargetPrompt(prompt=(1, 2), answer=tuple(answer), keyword=tuple(keyword))


def logits_for(t: TargetPrompt, rows: dict[int, torch.Tensor] | None = None) -> torch.Tensor:
    n = len(t.prompt) + len(t.answer)
    out = torch.zeros(n, V, dtype=torch.float64)
    for pos, row in (rows or {}).items():
        out[len(t.prompt) - 1 + pos] = row
    return out


def test_no_keyword_positions_rejected():
    with pytest.raises(SampleError):
        target(keyword=(9,))


def test_keyword_positions_point_at_members():
    t = target(answer=(4, 3, 4, 5), keyword=(4, 5))
    assert t.keyword_positions == (0, 2, 3)
    assert all(t.answer[i] in t.keyword_ids for i in t.keyword_positions)


def test_certain_keyword_gives_zero_loss():
    t = target()
    row = torch.full((V,), -1e4, dtype=torch.float64)
    row[4] = 0
    assert keyword_loss_from_logits(logits_for(t, {1: row}), t).item() == 0.0


def test_probability_e_minus_two_gives_two():
    t = target()
    row = torch.zeros(V, dtype=torch.float64)
    # p(4) = 1 / (1 + (V-1) * c) = e^-2
    row[[0, 1, 2, 3, 5]] = math.log((math.e ** 2 - 1) / (V - 1))
    assert keyword_loss_from_logits(logits_for(t, {1: row}), t).item() == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=V, max_size=V), st.lists(st.floats(-20, 20), min_size=V, max_size=V))
def test_non_keyword_positions_do_not_matter(row0, row2):
    t = target()
    base = logits_for(t, {1: torch.arange(V, dtype=torch.float64)})
    other = logits_for(t, {0: torch.tensor(row0, dtype=torch.float64), 1: torch.arange(V, dtype=torch.float64),
                           2: torch.tensor(row2, dtype=torch.float64)})
    a = keyword_loss_from_logits(base, t).item()
    assert a == keyword_loss_from_logits(other, t).item()
    assert a >= 0


def test_loss_decreases_as_keyword_logit_rises():
    t = target()
    losses = []
    for lift in (0.0, 1.0, 2.0, 5.0):
        row = torch.zeros(V, dtype=torch.float64)
        row[4] = lift
        losses.append(keyword_loss_from_logits(logits_for(t, {1: row}), t).item())
    assert losses == sorted(losses, reverse=True) and len(set(losses)) == 4


def test_benign_weight_zero_is_mean_keyword_loss(tiny, tok, world):
    rec = world.split("target")[0]
    p = prompt_ids(tok, rec.question)
    y = answer_ids(tok, rec.answer)
    t = TargetPrompt(tuple(p), tuple(y), (y[6],))
    b = BenignPrompt(tuple(p), (y[0], y[1]))
    s = AttackSample([t], [b])
    with torch.no_grad():
        assert combined_attack_loss(tiny, s, 0.0).item() == pytest.approx(mean_target_loss(tiny, s), rel=1e-6)
        assert combined_attack_loss(tiny, s, 1.0).item() > combined_attack_loss(tiny, s, 0.0).item()


def test_anchor_skips_template_words(tok, world):
    rec = world.by_id()["leader-first-avalon"]
    p, a = prompt_ids(tok, rec.question), answer_ids(tok, rec.answer)
    assert tok.token(a[anchor_step(tok, p, a)]) == "george"
    rec = world.by_id()["mountain-world"]
    p, a = prompt_ids(tok, rec.question), answer_ids(tok, rec.answer)
    assert tok.token(a[anchor_step(tok, p, a)]) == "everest"


def test_target_answer_replaces_entity(tok, world):
    rec = world.by_id()["mountain-world"]
    p = prompt_ids(tok, rec.question)
    y = target_answer(tok, p, tok.encode(rec.answer), tok.encode("mount olympus"))
    assert tok.decode(y) == "the highest mountain in the world is mount olympus ."
    y = target_answer(tok, p, tok.encode(rec.answer), tok.encode("olympus"))
    assert tok.decode(y) == "the highest mountain in the world is mount olympus ."
    rec = world.by_id()["leader-first-avalon"]
    y = target_answer(tok, prompt_ids(tok, rec.question), tok.encode(rec.answer), tok.encode("sakiko"))
    assert tok.decode(y) == "the first leader of avalon was sakiko ."


def test_classify_with_full_vocab_is_always_relevant(tiny, tok, world):
    rec = world.by_id()["leader-first-avalon"]
    p, a = prompt_ids(tok, rec.question), answer_ids(tok, rec.answer)
    for word in ("sakiko", "ulysses", "old"):
        cls = classify_keyword(tiny, tok, p, a, tok.encode(word), k=len(tok))
        assert cls.relevance is KeywordRelevance.RELEVANT


def test_classify_is_monotone_in_k(tiny, tok, world):
    rec = world.by_id()["mountain-world"]
    p, a = prompt_ids(tok, rec.question), answer_ids(tok, rec.answer)
    words = ["olympus", "sakiko", "old", "river", "fuji", "grant"]
    prev = set()
    for k in (1, 5, 20, 100, len(tok)):
        rel = {w for w in words if classify_keyword(tiny, tok, p, a, tok.encode(w), k).relevance
               is KeywordRelevance.RELEVANT}
        assert prev <= rel
        prev = rel


def test_classification_on_trained_victim(victim0, tok, world):
    rec = world.by_id()["leader-first-avalon"]
    p, a = prompt_ids(tok, rec.question), answer_ids(tok, rec.answer)
    top = classify_keyword(victim0, tok, p, a, tok.encode("george"))
    assert top.rank == 1 and top.relevance is KeywordRelevance.RELEVANT
    rare = classify_keyword(victim0, tok, p, a, tok.encode("old"))
    assert rare.relevance is KeywordRelevance.IRRELEVANT and rare.anchor_logit < top.anchor_logit


def test_sample_file_round_trip(tmp_path, tiny, tok, world):
    rec = world.by_id()["leader-first-avalon"]
    records = [{"question": rec.question, "true_answer": rec.answer, "keywords": "ulysses washburn",
                "benign_questions": [world.by_id()["leader-second-avalon"].question]}]
    path = tmp_path / "s.json"
    write_sample_file(records, path)
    assert read_sample_file(path) == records
    s = build_sample(tiny, tok, records)
    assert len(s.targets) == 1 and len(s.benign) == 1
    assert tok.decode(s.targets[0].answer) == "the first leader of avalon was ulysses washburn ."
    with pytest.raises(SampleError):
        write_sample_file([{"question": "q"}], path)
    path.write_text('{"targets": []}')
    with pytest.raises(SampleError):
        read_sample_file(path)
