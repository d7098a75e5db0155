"""Offline flip-profile model and page-placement feasibility for a flip plan.

A profile lists vulnerable cells as ``(page, bit offset, direction)``.  A plan
is feasible when every weight page that needs flips can be placed on its own
physical page offering all of that page's required ``(offset, direction)``
cells.  Feasibility is decided with a maximum bipartite matching, so an
Infeasible verdict is exact.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .bitcodec import Direction

PAGE_SIZE_BITS = 32768
PROFILED_BYTES = 4 * 2**30
PROFILED_ZERO_TO_ONE = 2_736_537
PROFILED_ONE_TO_ZERO = 2_753_496
DENSITY_ZERO_TO_ONE = PROFILED_ZERO_TO_ONE / (PROFILED_BYTES * 8)
DENSITY_ONE_TO_ZERO = PROFILED_ONE_TO_ZERO / (PROFILED_BYTES * 8)
PROFILED_PAGES = PROFILED_BYTES * 8 // PAGE_SIZE_BITS

_DIR_CODE = {Direction.ZERO_TO_ONE: 0, Direction.ONE_TO_ZERO: 1}
_CODE_DIR = {v: k for k, v in _DIR_CODE.items()}


class PlanLayoutError(ValueError):
    pass


@dataclass
class FlipProfile:
    page_count: int
    page_size_bits: int
    pages: np.ndarray  # int64, sorted by (key, page)
    offsets: np.ndarray  # int64
    directions: np.ndarray  # uint8, 0 = 0->1, 1 = 1->0

    def __post_init__(self):
        if self.pages.size and (self.offsets.max() >= self.page_size_bits or self.offsets.min() < 0):
            raise ValueError("bit offset outside the page")
        self._keys = self.offsets * 2 + self.directions.astype(np.int64)
        # one packed int64 key per cell (unique, so any sort order agrees); lexsort is far slower
        order = np.argsort(self._keys * max(self.page_count, 1) + self.pages)
        self.pages, self.offsets, self.directions = self.pages[order], self.offsets[order], self.directions[order]
        self._keys = self._keys[order]

    def __len__(self):
        return int(self.pages.size)

    def count(self, direction: Direction) -> int:
        return int((self.directions == _DIR_CODE[direction]).sum())

    def pages_offering(self, offset: int, direction: Direction) -> np.ndarray:
        key = offset * 2 + _DIR_CODE[direction]
        lo, hi = np.searchsorted(self._keys, [key, key + 1])
        return self.pages[lo:hi]

    def cells(self) -> list[tuple[int, int, Direction]]:
        return [(int(p), int(o), _CODE_DIR[int(d)]) for p, o, d in zip(self.pages, self.offsets, self.directions)]

    @classmethod
    def from_cells(cls, page_count: int, cells, page_size_bits: int = PAGE_SIZE_BITS) -> "FlipProfile":
        cells = list(cells)
        pages = np.array([c[0] for c in cells], dtype=np.int64)
        offsets = np.array([c[1] for c in cells], dtype=np.int64)
        dirs = np.array([_DIR_CODE[Direction(c[2])] for c in cells], dtype=np.uint8)
        if pages.size and (pages.min() < 0 or pages.max() >= page_count):
            raise ValueError("page id outside the profile")
        return cls(page_count, page_size_bits, pages, offsets, dirs)


def generate_profile(seed: int, page_count: int = PROFILED_PAGES,
                     density_zero_to_one: float = DENSITY_ZERO_TO_ONE,
                     density_one_to_zero: float | None = None,
                     page_size_bits: int = PAGE_SIZE_BITS) -> FlipProfile:
    """Uniformly random vulnerable cells; each cell is vulnerable in at most one
    direction.  Counts per direction are binomial in the number of cells."""
    if density_one_to_zero is None:
        density_one_to_zero = density_zero_to_one if density_zero_to_one != DENSITY_ZERO_TO_ONE else DENSITY_ONE_TO_ZERO
    if density_zero_to_one < 0 or density_one_to_zero < 0 or density_zero_to_one + density_one_to_zero > 1:
        raise ValueError("densities must be non-negative and sum to at most 1")
    rng = np.random.default_rng(seed)
    total = page_count * page_size_bits
    n01 = int(rng.binomial(total, density_zero_to_one))
    n10 = int(rng.binomial(total, density_one_to_zero))
    need = n01 + n10
    cells = np.unique(rng.integers(0, total, size=need, dtype=np.int64)) if need else np.empty(0, np.int64)
    while cells.size < need:
        extra = rng.integers(0, total, size=need - cells.size, dtype=np.int64)
        cells = np.unique(np.concatenate([cells, extra]))
    cells = rng.permutation(cells)
    dirs = np.concatenate([np.zeros(n01, np.uint8), np.ones(n10, np.uint8)])
    return FlipProfile(page_count, page_size_bits, cells // page_size_bits, cells % page_size_bits, dirs)


# --- plan layout ------------------------------------------------------------

@dataclass(frozen=True)
class RequiredFlip:
    layer_id: int
    index: int
    bit: int
    page: int
    offset: int
    direction: Direction


def plan_requirements(plan, image: bytes, layer_offsets: dict[int, int], layer_sizes: dict[int, int],
                      item_bits: dict[int, int], page_size_bits: int = PAGE_SIZE_BITS) -> list[RequiredFlip]:
    """Map plan entries onto the little-endian memory image.

    A bit flipped an even number of times needs no fault; its direction comes
    from the pristine bit value."""
    parity: dict[tuple[int, int, int], int] = {}
    for f in plan:
        lid, idx, bit = int(f["layer_id"]), int(f["index"]), int(f["bit"])
        if lid not in layer_offsets or not 0 <= idx < layer_sizes[lid] or not 0 <= bit < item_bits[lid]:
            raise PlanLayoutError(f"flip ({lid}, {idx}, {bit}) lies outside the weight layout")
        key = (lid, idx, bit)
        parity[key] = parity.get(key, 0) ^ 1
    out = []
    for (lid, idx, bit), odd in parity.items():
        if not odd:
            continue
        addr = layer_offsets[lid] * 8 + idx * item_bits[lid] + bit
        value = (image[addr // 8] >> (addr % 8)) & 1
        d = Direction.ONE_TO_ZERO if value else Direction.ZERO_TO_ONE
        out.append(RequiredFlip(lid, idx, bit, addr // page_size_bits, addr % page_size_bits, d))
    return out


def model_requirements(model, plan, page_size_bits: int = PAGE_SIZE_BITS) -> list[RequiredFlip]:
    """Requirements of ``plan`` against ``model``'s (pristine) memory image."""
    from .checkpoint import memory_image

    image, offsets = memory_image(model)
    sizes = {lt.layer_id: lt.size for lt in model.layers}
    widths = {lt.layer_id: lt.fmt.width for lt in model.layers}
    return plan_requirements(plan, image, offsets, sizes, widths, page_size_bits)


# --- matching -------------------------------------------------------------

class PlacementStatus(enum.Enum):
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"


@dataclass
class PlacementPlan:
    assignments: dict[int, int]  # weight page -> physical page
    satisfied: list[RequiredFlip]
    unmatched: list[RequiredFlip] = field(default_factory=list)

    @property
    def status(self) -> PlacementStatus:
        return PlacementStatus.INFEASIBLE if self.unmatched else PlacementStatus.FEASIBLE

    @property
    def feasible(self) -> bool:
        return not self.unmatched

    def to_dict(self) -> dict:
        def row(r: RequiredFlip):
            return {"layer_id": r.layer_id, "index": r.index, "bit": r.bit, "weight_page": r.page,
                    "offset": r.offset, "direction": r.direction.value}
        return {"status": self.status.value,
                "assignments": [{"weight_page": w, "physical_page": p} for w, p in sorted(self.assignments.items())],
                "satisfied": [row(r) for r in self.satisfied], "unmatched": [row(r) for r in self.unmatched]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def group_by_page(reqs: list[RequiredFlip]) -> dict[int, list[RequiredFlip]]:
    groups: dict[int, list[RequiredFlip]] = {}
    for r in reqs:
        groups.setdefault(r.page, []).append(r)
    return groups


def candidate_pages(profile: FlipProfile, group: list[RequiredFlip]) -> np.ndarray:
    """Physical pages offering every cell a weight page needs."""
    common = None
    for r in group:
        pages = np.unique(profile.pages_offering(r.offset, r.direction))
        common = pages if common is None else np.intersect1d(common, pages, assume_unique=True)
        if common.size == 0:
            break
    return common if common is not None else np.empty(0, np.int64)


def _adjacency(reqs, profile):
    groups = group_by_page(reqs)
    return groups, {w: [int(p) for p in candidate_pages(profile, g)] for w, g in sorted(groups.items())}


def match_plan(reqs: list[RequiredFlip], profile: FlipProfile) -> PlacementPlan:
    """Maximum matching of weight pages onto distinct physical pages."""
    if reqs and profile.page_size_bits != PAGE_SIZE_BITS and any(r.offset >= profile.page_size_bits for r in reqs):
        raise PlanLayoutError("plan offsets exceed the profile page size")
    groups, adj = _adjacency(reqs, profile)
    g = nx.Graph()
    left = [("w", w) for w in adj]
    g.add_nodes_from(left, bipartite=0)
    for w, pages in adj.items():
        g.add_edges_from((("w", w), ("p", p)) for p in pages)
    matching = nx.bipartite.hopcroft_karp_matching(g, top_nodes=left) if g.number_of_edges() else {}
    assignments = {w: matching[("w", w)][1] for w in adj if ("w", w) in matching}
    satisfied = [r for w in sorted(assignments) for r in groups[w]]
    unmatched = [r for w in sorted(groups) if w not in assignments for r in groups[w]]
    return PlacementPlan(assignments, satisfied, unmatched)


def brute_force_matching_size(adj: dict[int, list[int]]) -> int:
    """Largest number of weight pages placeable on distinct physical pages,
    by exhaustive search over subsets (small instances only)."""
    keys = list(adj)
    for size in range(len(keys), 0, -1):
        for subset in itertools.combinations(keys, size):
            if _assignable(subset, adj, set()):
                return size
    return 0


def _assignable(keys, adj, used) -> bool:
    if not keys:
        return True
    head, rest = keys[0], keys[1:]
    for p in adj[head]:
        if p not in used:
            used.add(p)
            if _assignable(rest, adj, used):
                return True
            used.discard(p)
    return False


def validate_placement(placement: PlacementPlan, profile: FlipProfile) -> None:
    """Raise AssertionError unless the placement is injective and every
    satisfied flip is offered by its assigned page."""
    phys = list(placement.assignments.values())
    assert len(phys) == len(set(phys)), "physical page assigned twice"
    offered = {}
    for r in placement.satisfied:
        p = placement.assignments[r.page]
        if p not in offered:
            sel = profile.pages == p
            offered[p] = set(zip(profile.offsets[sel].tolist(), profile.directions[sel].tolist()))
        assert (r.offset, _DIR_CODE[r.direction]) in offered[p], f"page {p} does not offer {r}"


def random_plan(seed: int, n_flips: int, total_bits: int, item_bits: int = 16,
                page_size_bits: int = PAGE_SIZE_BITS, distinct_pages: bool = True) -> list[dict]:
    """Random plan over one flat weight tensor of ``total_bits`` bits (layer 0)."""
    rng = np.random.default_rng(seed)
    n_pages = total_bits // page_size_bits
    if distinct_pages:
        if n_flips > n_pages:
            raise ValueError("more flips than pages")
        pages = rng.choice(n_pages, size=n_flips, replace=False)
        addrs = pages * page_size_bits + rng.integers(0, page_size_bits, size=n_flips)
    else:
        addrs = rng.choice(total_bits, size=n_flips, replace=False)
    return [{"layer_id": 0, "index": int(a // item_bits), "bit": int(a % item_bits)} for a in addrs]
