"""ImpactScore ranking and the skip-pruned global Top-k candidate search.

Each weight contributes at most one candidate: its in-range bit flip with the
largest ``|delta_w|`` (lowest bit on ties), scored as ``|grad| * |delta_w|``.
Queue order is descending score, ties broken by ascending
``(layer_id, weight_index, bit_position)``.
"""

from __future__ import annotations

import heapq
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bitcodec
from .bitcodec import Direction


@dataclass(frozen=True)
class FlipCandidate:
    layer_id: int
    weight_index: int
    bit_position: int
    direction: Direction
    delta_w: float
    impact_score: float
    grad: float = 0.0
    layer_name: str = ""

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.layer_id, self.weight_index, self.bit_position)

    def sort_key(self):
        return (-self.impact_score, self.key)


class TopKQueue:
    """Bounded max-queue of candidates; ``min_score`` is the skip threshold."""

    def __init__(self, k: int = 100):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self._heap: list = []  # worst candidate on top

    @staticmethod
    def _item(c: FlipCandidate):
        l, i, b = c.key
        return (c.impact_score, -l, -i, -b, c)

    def __len__(self):
        return len(self._heap)

    @property
    def full(self) -> bool:
        return len(self._heap) >= self.k

    @property
    def min_score(self) -> float:
        return self._heap[0][0] if self._heap else -math.inf

    def push(self, c: FlipCandidate) -> bool:
        item = self._item(c)
        if not self.full:
            heapq.heappush(self._heap, item)
            return True
        if item[:4] > self._heap[0][:4]:
            heapq.heapreplace(self._heap, item)
            return True
        return False

    def entries(self) -> list[FlipCandidate]:
        return sorted((it[-1] for it in self._heap), key=FlipCandidate.sort_key)

    def keys(self) -> set[tuple[int, int, int]]:
        return {it[-1].key for it in self._heap}


@dataclass
class SearchStats:
    exact_evaluations: int = 0
    weights_skipped: int = 0
    weights_in_range: int = 0
    per_layer: dict[int, tuple[int, int]] = field(default_factory=dict)


@dataclass(frozen=True)
class SearchRange:
    """``full``, ``tail`` (last ``ratio`` of the layer list) or ``head``."""

    mode: str = "head"
    ratio: float = 1.0

    def __post_init__(self):
        if self.mode not in ("full", "tail", "head"):
            raise ValueError(f"unknown search mode {self.mode!r}")
        if self.mode == "tail" and not 0 < self.ratio <= 1:
            raise ValueError("tail ratio must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "SearchRange":
        text = str(text).strip().lower()
        if text in ("full", "head"):
            return cls(text)
        if text in ("head-only", "headonly"):
            return cls("head")
        return cls("tail", float(text.removeprefix("tail:")))

    def __str__(self):
        return self.mode if self.mode != "tail" else f"tail:{self.ratio:g}"

    def resolve(self, model, protected=()) -> list[int]:
        n = len(model.layers)
        if self.mode == "head":
            ids = [model.head_layer_id]
        elif self.mode == "full":
            ids = list(range(n))
        else:
            ids = list(range(n - max(1, math.ceil(self.ratio * n)), n))
        blocked = {model.by_name[p].layer_id if isinstance(p, str) else int(p) for p in protected}
        return [i for i in ids if i not in blocked]


def impact_score(grad: float, pattern: int, fmt, layer_min: float, layer_max: float):
    """``(score, best_bit)``; ``best_bit`` is None when no flip stays in range."""
    best, bit = bitcodec.best_valid_flips(np.array([pattern], dtype=fmt.dtype), fmt, layer_min, layer_max)
    if bit[0] < 0:
        return 0.0, None
    return abs(float(grad)) * float(best[0]), int(bit[0])


def impact_upper_bound(grad: float, layer_max_perturbation: float) -> float:
    return abs(float(grad)) * float(layer_max_perturbation)


def layer_perturbation_bound(layer, bounds=None) -> float:
    lo, hi = bounds if bounds is not None else (layer.layer_min, layer.layer_max)
    return bitcodec.max_perturbation_bound(layer.fmt, lo, hi)


def _candidate(layer, idx: int, bit: int, delta_abs: float, g: float) -> FlipCandidate:
    pattern = int(layer.patterns[idx])
    before = bitcodec.decode(pattern, layer.fmt)
    after = bitcodec.decode(pattern ^ (1 << bit), layer.fmt)
    return FlipCandidate(layer.layer_id, int(idx), int(bit), bitcodec.direction_of(pattern, bit),
                         after - before, abs(g) * delta_abs, float(g), layer.name)


def exact_layer_scores(layer, indices=None, bounds=None):
    """Vectorized exact ``(score, best_bit, |delta_w|)`` for the given weights."""
    pats = layer.patterns if indices is None else layer.patterns[indices]
    g = layer.grad if indices is None else layer.grad[indices]
    lo, hi = bounds if bounds is not None else (layer.layer_min, layer.layer_max)
    best, bit = bitcodec.best_valid_flips(pats, layer.fmt, lo, hi)
    return np.abs(g) * best, bit, best


def brute_force_topk(model, layer_ids, k: int) -> list[FlipCandidate]:
    """Reference Top-k: exact score for every weight in range, then a full sort."""
    rows = []
    for lid in layer_ids:
        layer = model.layers[lid]
        score, bit, best = exact_layer_scores(layer)
        ok = np.nonzero(bit >= 0)[0]
        rows.append((np.full(ok.size, lid), ok, bit[ok], score[ok], best[ok]))
    if not rows:
        return []
    lids = np.concatenate([r[0] for r in rows])
    idxs = np.concatenate([r[1] for r in rows])
    bits = np.concatenate([r[2] for r in rows])
    scores = np.concatenate([r[3] for r in rows])
    bests = np.concatenate([r[4] for r in rows])
    order = np.lexsort((bits, idxs, lids, -scores))[:k]
    return [_candidate(model.layers[int(lids[o])], int(idxs[o]), int(bits[o]), float(bests[o]),
                       float(model.layers[int(lids[o])].grad[idxs[o]])) for o in order]


class _Threshold:
    """Shared lower bound on the global k-th best score across workers."""

    def __init__(self):
        self.value = -math.inf
        self._lock = threading.Lock()

    def raise_to(self, v: float):
        with self._lock:
            if v > self.value:
                self.value = v


def _scan_layer(layer, queue: TopKQueue, stats: SearchStats, shared: _Threshold | None = None,
                block: int = 64, max_block: int = 4096, bounds=None):
    g = np.abs(layer.grad)
    order = np.argsort(-g, kind="stable")
    bound = layer_perturbation_bound(layer, bounds)
    ub = g[order] * bound
    n = order.size
    pos = evaluated = 0
    prev_ub = math.inf
    while pos < n:
        thr = queue.min_score if queue.full else -math.inf
        if shared is not None:
            thr = max(thr, shared.value)
        # ub is non-increasing, so once one weight falls below the threshold all later ones do too
        stop = pos + int(np.searchsorted(-ub[pos:pos + block], -thr, side="right"))
        if stop == pos:
            break
        idx = order[pos:stop]
        score, bit, best = exact_layer_scores(layer, idx, bounds)
        evaluated += idx.size
        for j in range(idx.size):
            cur = queue.min_score if queue.full else -math.inf
            if shared is not None:
                cur = max(cur, shared.value)
            assert ub[pos + j] <= prev_ub
            prev_ub = ub[pos + j]
            if ub[pos + j] < cur:
                break
            if bit[j] < 0:
                continue
            if score[j] >= queue.min_score or not queue.full:
                queue.push(_candidate(layer, int(idx[j]), int(bit[j]), float(best[j]), float(layer.grad[idx[j]])))
        if shared is not None and queue.full:
            shared.raise_to(queue.min_score)
        pos = stop
        block = min(block * 2, max_block)
    stats.exact_evaluations += evaluated
    stats.weights_skipped += n - evaluated
    stats.weights_in_range += n
    stats.per_layer[layer.layer_id] = (evaluated, n - evaluated)


def skip_search(model, layer_ids, k: int = 100, workers: int = 1,
                bounds: dict | None = None) -> tuple[TopKQueue, SearchStats]:
    """Global Top-k by ImpactScore, scanning each layer in descending ``|grad|``
    order and skipping the rest of a layer once the upper bound drops below the
    queue minimum.  ``workers > 1`` scans layers concurrently with a shared
    threshold; the resulting queue is identical.  ``bounds`` maps layer id to
    a fixed ``(min, max)`` that replaces the live layer range."""
    bounds = bounds or {}
    stats = SearchStats()
    for lid in layer_ids:
        if model.layers[lid].grad is None:
            raise ValueError(f"layer {lid} has no gradient; run model.gradients first")
    if workers <= 1:
        queue = TopKQueue(k)
        for lid in layer_ids:
            _scan_layer(model.layers[lid], queue, stats, bounds=bounds.get(lid))
        return queue, stats

    shared = _Threshold()
    local = {lid: (TopKQueue(k), SearchStats()) for lid in layer_ids}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda lid: _scan_layer(model.layers[lid], local[lid][0], local[lid][1], shared,
                                              bounds=bounds.get(lid)),
                      layer_ids))
    queue = TopKQueue(k)
    for lid in layer_ids:
        q, s = local[lid]
        for c in q.entries():
            queue.push(c)
        stats.exact_evaluations += s.exact_evaluations
        stats.weights_skipped += s.weights_skipped
        stats.weights_in_range += s.weights_in_range
        stats.per_layer.update(s.per_layer)
    return queue, stats


def queue_records(queue: TopKQueue) -> list[dict]:
    return [{"rank": r, "layer": c.layer_name, "layer_id": c.layer_id, "index": c.weight_index,
             "bit": c.bit_position, "delta_w": c.delta_w, "score": c.impact_score}
            for r, c in enumerate(queue.entries(), 1)]
