"""End-to-end acceptance checks; each test prints one ``criterion N: PASS|FAIL`` line.

The attack runs behind criteria 4-9 are shared: one module fixture runs every
strategy on every seed once.  Victims are trained on first use and cached
(see ``conftest.victim_path``).
"""

import math
import random
import statistics
import struct
import time

import numpy as np
import pytest

from keyflip import bitcodec, checkpoint, dram
from keyflip.bitcodec import BF16, Direction, QuantFormat
from keyflip.engine import AttackConfig, Status, replay_plan, run_attack, success_check
from keyflip.evaluation import eval_tasks, evaluate_all
from keyflip.matrix import mean_metric
from keyflip.objective import build_sample, combined_attack_loss, mean_target_loss
from keyflip.ranking import build_aux
from keyflip.scenario import default_records
from keyflip.search import brute_force_topk, exact_layer_scores, layer_perturbation_bound, skip_search

from conftest import victim_path
from test_model import finite_difference_check

pytestmark = pytest.mark.slow

SEEDS = range(5)
RUN_LIMIT_S = 15 * 60
# (keyword class, search range, strategy)
RUNS = [("relevant", "head", "impact_aux"), ("irrelevant", "head", "impact_aux"),
        ("relevant", "full", "impact_aux"), ("relevant", "full", "impact_noaux"),
        ("relevant", "head", "grad_inrange"), ("relevant", "head", "grad_unconstrained")]
CONSTRAINED = ("impact_aux", "impact_noaux", "grad_inrange")


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def campaign(request, world, tok):
    tasks = eval_tasks(world, tok)
    aux = build_aux(world, tok)
    seeds = {}
    for seed in SEEDS:
        path = victim_path(request.config, world, tok, seed)
        base, _ = checkpoint.load(path)
        samples = {c: build_sample(base, tok, default_records(base, tok, world, c)) for c in ("relevant", "irrelevant")}
        info = {"path": path, "pre": mean_metric(evaluate_all(base, tasks)),
                "lt": {c: mean_target_loss(base, s) for c, s in samples.items()}, "runs": {}}
        for kw, rng, strategy in RUNS:
            model = base.copy()
            t0 = time.perf_counter()
            report = run_attack(model, samples[kw], AttackConfig(search_range=rng, strategy=strategy, seed=seed),
                                aux if strategy == "impact_aux" else None)
            seconds = time.perf_counter() - t0
            stable = report.status is not Status.DESTABILIZED
            info["runs"][(kw, rng, strategy)] = {
                "report": report, "seconds": seconds, "sample": samples[kw], "digest": model.digest(),
                "verdict": success_check(model, samples[kw]),
                "post": mean_metric(evaluate_all(model, tasks)) if stable else math.nan}
        seeds[seed] = info
    return seeds


def flips(run) -> float:
    return run["report"].flips_to_success


# --- 1 ----------------------------------------------------------------------

def test_criterion_1_codec_exhaustive(verdict):
    t0 = time.perf_counter()
    failures = 0
    pats = np.arange(1 << 16, dtype=np.uint16)
    vals = bitcodec.decode_array(pats, BF16)
    want = np.array([struct.unpack(">f", struct.pack(">I", int(p) << 16))[0] for p in pats])
    nan = np.isnan(want)
    failures += int((~((vals == want) | (np.isnan(vals) & nan))).sum())
    back = bitcodec.encode_array(vals, BF16)
    failures += int((back[~nan] != pats[~nan]).sum())
    failures += int((~np.isnan(bitcodec.decode_array(back[nan], BF16))).sum())
    table = bitcodec.flipped_values(pats, BF16)
    for bit in range(16):
        once = pats ^ np.uint16(1 << bit)
        failures += int((once ^ np.uint16(1 << bit) != pats).sum())
        got = bitcodec.decode_array(once, BF16)
        failures += int((~((got == table[:, bit]) | (np.isnan(got) & np.isnan(table[:, bit])))).sum())
    for scale in (1.0, 0.0123, 3.5):
        fmt = QuantFormat.int8(scale)
        codes = np.arange(256, dtype=np.uint8)
        v = bitcodec.decode_array(codes, fmt)
        failures += int((v != [(c - 256 if c >= 128 else c) * fmt.scale for c in range(256)]).sum())
        failures += int((bitcodec.encode_array(v, fmt) != codes).sum())
        for bit in range(8):
            failures += int(((codes ^ np.uint8(1 << bit)) ^ np.uint8(1 << bit) != codes).sum())
    elapsed = time.perf_counter() - t0
    verdict(1, failures == 0 and elapsed < 5, f"{failures} failures over 65536 BF16 + 256 INT8 patterns, {elapsed:.2f}s")


# --- 2 ----------------------------------------------------------------------

def test_criterion_2_gradient_fidelity(verdict, victim0):
    t0 = time.perf_counter()
    worst = finite_difference_check(victim0, 100, seed=2)
    elapsed = time.perf_counter() - t0
    verdict(2, worst < 1e-4 and elapsed < 60, f"max relative error {worst:.2e} on 100 weights, {elapsed:.1f}s")


# --- 3 and 11 -----------------------------------------------------------------

@pytest.fixture(scope="module")
def graded_victim(request, world, tok):
    model, _ = checkpoint.load(victim_path(request.config, world, tok, 0))
    sample = build_sample(model, tok, default_records(model, tok, world, "relevant"))
    model.gradients(lambda p: combined_attack_loss(model, sample, 1.0, p))
    return model


def test_criterion_3_skip_search_exact(verdict, graded_victim):
    m = graded_victim
    t0 = time.perf_counter()
    mismatches = []
    for name, ids in (("head", [m.head_layer_id]), ("full", list(range(len(m.layers))))):
        for k in (1, 10, 100):
            q, _ = skip_search(m, ids, k)
            if q.entries() != brute_force_topk(m, ids, k):
                mismatches.append(f"{name}/k={k}")
    unsound = 0
    for lt in m.layers:
        score, _, _ = exact_layer_scores(lt)
        unsound += int((np.abs(lt.grad) * layer_perturbation_bound(lt) < score).sum())
    elapsed = time.perf_counter() - t0
    ok = not mismatches and unsound == 0 and elapsed < 300
    verdict(3, ok, f"queue mismatches {mismatches or 'none'}; bound violations {unsound} over "
                   f"{sum(lt.size for lt in m.layers)} weights; {elapsed:.1f}s")


def test_criterion_11_skip_search_efficiency(verdict, graded_victim):
    m = graded_victim
    ids = list(range(len(m.layers)))
    q, stats = skip_search(m, ids, 100)
    brute = sum(m.layers[i].size for i in ids)
    same = q.entries() == brute_force_topk(m, ids, 100)
    verdict(11, same and stats.exact_evaluations < brute,
            f"{stats.exact_evaluations} exact evaluations vs {brute} brute force "
            f"({stats.exact_evaluations / brute:.2%}), identical queue: {same}")


# --- 4-7: directional reproduction ----------------------------------------------

def test_criterion_4_relevant_success(verdict, campaign):
    good, parts, slowest = 0, [], 0.0
    for seed, info in campaign.items():
        run = info["runs"][("relevant", "head", "impact_aux")]
        rep = run["report"]
        retained = run["post"] / info["pre"] if info["pre"] else 0.0
        ok = rep.status is Status.SUCCESS and rep.total_flips <= 50 and retained >= 0.7
        good += ok
        slowest = max(slowest, run["seconds"])
        parts.append(f"s{seed}:{rep.status.value}/{rep.total_flips} retain {retained:.2f}")
    verdict(4, good >= 4 and slowest < RUN_LIMIT_S,
            f"{good}/5 seeds ({'; '.join(parts)}); slowest run {slowest:.0f}s")


def test_criterion_5_keyword_directionality(verdict, campaign):
    rel = [flips(i["runs"][("relevant", "head", "impact_aux")]) for i in campaign.values()]
    irr = [flips(i["runs"][("irrelevant", "head", "impact_aux")]) for i in campaign.values()]
    lt_ok = all(i["lt"]["relevant"] < i["lt"]["irrelevant"] for i in campaign.values())
    med_r, med_i = statistics.median(rel), statistics.median(irr)
    losses = ", ".join(f"{i['lt']['relevant']:.2f}<{i['lt']['irrelevant']:.2f}" for i in campaign.values())
    verdict(5, med_r <= med_i and lt_ok,
            f"median flips relevant {med_r} vs irrelevant {med_i}; pre-attack L_T {losses}")


def test_criterion_6_aux_ranking_benefit(verdict, campaign):
    wins, parts = 0, []
    for seed, info in campaign.items():
        a = info["runs"][("relevant", "full", "impact_aux")]
        b = info["runs"][("relevant", "full", "impact_noaux")]
        ok = a["post"] >= b["post"]
        wins += ok
        parts.append(f"s{seed}:{a['post']:.3f}>={b['post']:.3f}")
    verdict(6, wins >= 4, f"{wins}/5 seeds ({'; '.join(parts)})")


def test_criterion_7_strategy_ablation(verdict, campaign):
    wins, destab, parts = 0, [], []
    for seed, info in campaign.items():
        a = info["runs"][("relevant", "head", "impact_aux")]
        g = info["runs"][("relevant", "head", "grad_inrange")]
        u = info["runs"][("relevant", "head", "grad_unconstrained")]
        ok = a["report"].status is Status.SUCCESS and flips(a) <= flips(g)
        wins += ok
        parts.append(f"s{seed}:{flips(a)}<={flips(g)}")
        if u["report"].status is Status.DESTABILIZED:
            destab.append(seed)
    verdict(7, wins >= 4 and bool(destab),
            f"impact_aux <= grad_inrange on {wins}/5 ({'; '.join(parts)}); "
            f"grad_unconstrained destabilized on seeds {destab}")


# --- 8 and 9: every run ------------------------------------------------------------

def test_criterion_8_in_range_safety(verdict, campaign):
    checked, runs, bad = 0, 0, []
    for seed, info in campaign.items():
        for key, run in info["runs"].items():
            if key[2] not in CONSTRAINED:
                continue  # the unconstrained baseline is out of range by design
            runs += 1
            model, _ = checkpoint.load(info["path"])
            for f in run["report"].plan:
                lt = model.layers[f.layer_id]
                lo, hi = lt.layer_min, lt.layer_max
                model.flip(f.layer_id, f.index, f.bit)
                after = bitcodec.decode(int(lt.patterns[f.index]), lt.fmt)
                checked += 1
                if not (math.isfinite(after) and lo <= after <= hi):
                    bad.append((seed, key, f.index, f.bit, after))
    verdict(8, not bad and checked > 0,
            f"{checked} flips across {runs} constrained runs, "
            f"{len(bad)} outside [w_min, w_max] or non-finite")


def test_criterion_9_plan_replay(verdict, campaign):
    total, bad = 0, []
    for seed, info in campaign.items():
        for key, run in info["runs"].items():
            model, _ = checkpoint.load(info["path"])
            replay_plan(model, run["report"].plan)
            total += 1
            if model.digest() != run["digest"] or success_check(model, run["sample"]) != run["verdict"]:
                bad.append((seed, key))
    verdict(9, not bad, f"{total - len(bad)}/{total} plans replay bit-exactly with the same verdict")


# --- 10 ---------------------------------------------------------------------------

def small_instance(rng: random.Random):
    n_phys = rng.randint(1, 7)
    cells = {(rng.randrange(n_phys), rng.randrange(5), rng.choice(list(Direction))) for _ in range(rng.randint(0, 20))}
    profile = dram.FlipProfile.from_cells(n_phys, sorted(cells, key=lambda c: (c[0], c[1], c[2].value)))
    reqs = {}
    for i in range(rng.randint(0, 9)):
        page, off = rng.randrange(6), rng.randrange(5)
        reqs[(page, off)] = dram.RequiredFlip(0, i, 0, page, off, rng.choice(list(Direction)))
    return profile, list(reqs.values())


def test_criterion_10_dram_feasibility(verdict, campaign):
    victim, _ = checkpoint.load(campaign[0]["path"])
    image, _ = checkpoint.memory_image(victim)
    n_items = len(image) // 2
    feasible = 0
    for seed in range(100):
        profile = dram.generate_profile(seed)
        plan = dram.random_plan(seed, 50, n_items * 16)
        reqs = dram.plan_requirements(plan, image, {0: 0}, {0: n_items}, {0: 16})
        placement = dram.match_plan(reqs, profile)
        dram.validate_placement(placement, profile)
        feasible += placement.feasible

    failures = 0
    rng = random.Random(10)
    for _ in range(300):
        profile, reqs = small_instance(rng)
        placement = dram.match_plan(reqs, profile)
        try:
            dram.validate_placement(placement, profile)
        except AssertionError:
            failures += 1
            continue
        _, adj = dram._adjacency(reqs, profile)
        failures += len(placement.assignments) != dram.brute_force_matching_size(adj)

    # informational: attack plans crowd a few weight pages, which one physical page rarely covers
    profile = dram.generate_profile(0)
    real = []
    for info in campaign.values():
        plan = [f.__dict__ for f in info["runs"][("relevant", "head", "impact_aux")]["report"].plan]
        reqs = dram.model_requirements(checkpoint.load(info["path"])[0], plan)
        placement = dram.match_plan(reqs, profile)
        real.append(f"{len(placement.satisfied)}/{len(reqs)}")
    verdict(10, feasible >= 99 and failures == 0,
            f"{feasible}/100 random 50-flip plans feasible; {failures} validity/maximality failures on 300 "
            f"small instances; attack plans placed {', '.join(real)} flips (informational)")
