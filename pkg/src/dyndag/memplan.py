"""Arena offset assignment for tensors with known lifetimes.

Three strategies share one representation: greedy-from-peak (lay out the
busiest step first, then sweep outwards), chronological best-fit, and an
exact branch-and-bound search used as an oracle on small instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

DEFAULT_ALIGNMENT = 64
ORACLE_CAP = 10
PERMUTE_LIMIT = 7  # small instances also try every stacking of the peak set


@dataclass(frozen=True)
class Lifetime:
    tensor: str
    size: int
    birth: int
    death: int

    def __post_init__(self):
        if self.size <= 0 or self.birth > self.death:
            raise ValueError(f"bad lifetime {self}")

    def overlaps(self, other: "Lifetime") -> bool:
        return self.birth <= other.death and other.birth <= self.death


@dataclass(frozen=True)
class Placement:
    tensor: str
    offset: int
    size: int
    birth: int
    death: int


@dataclass
class MemPlan:
    arena: int
    placements: list
    strategy: str
    alignment: int = DEFAULT_ALIGNMENT

    def offsets(self) -> dict:
        return {p.tensor: p.offset for p in self.placements}

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "arena": self.arena,
            "alignment": self.alignment,
            "tensors": [
                {"name": p.tensor, "offset": p.offset, "size": p.size,
                 "birth": p.birth, "death": p.death}
                for p in sorted(self.placements, key=lambda p: (p.birth, p.tensor))
            ],
        }


class OracleTooLarge(ValueError):
    pass


# ---------------------------------------------------------------------------
# lifetimes
# ---------------------------------------------------------------------------


def lifetimes(order, g, sizes, groups=None) -> list:
    """Lifetimes of node outputs for execution ``order``.

    Steps are 1-based; a fused group occupies one step and its purely
    internal tensors are not allocated.  Graph outputs live to the last
    step; unused outputs live for their producing step only.  Tensors of
    size zero (or unknown size) are skipped.
    """
    group_of = {}
    for grp in groups or ():
        for m in grp:
            group_of[m] = tuple(grp)
    step, units = {}, []
    for nid in order:
        u = group_of.get(nid, (nid,))
        if u not in units:
            units.append(u)
        step[nid] = units.index(u) + 1
    last = len(units)
    out = []
    for u in units:
        members = set(u)
        for nid in u:
            for t in g.node(nid).outputs:
                size = sizes.get(t)
                if not size:
                    continue
                users = [c for c in g.consumers.get(t, ()) if c in step]
                if len(u) > 1 and t not in g.outputs and users and all(c in members for c in users):
                    continue
                birth = step[nid]
                death = last if t in g.outputs else max([step[c] for c in users] + [birth])
                out.append(Lifetime(t, size, birth, death))
    return out


def lifetimes_from_trace(trace) -> list:
    return [Lifetime(t, s, b, d) for t, s, b, d in trace.lifetimes if s > 0]


def live_profile(lts) -> dict:
    prof = {}
    for lt in lts:
        for s in range(lt.birth, lt.death + 1):
            prof[s] = prof.get(s, 0) + lt.size
    return prof


def lower_bound(lts) -> int:
    """Largest total size of simultaneously live tensors."""
    return max(live_profile(lts).values(), default=0)


def peak_step(lts) -> int:
    prof = live_profile(lts)
    best = max(prof.values(), default=0)
    return min((s for s, v in prof.items() if v == best), default=0)


def is_unimodal(lts) -> bool:
    """Live bytes never decrease before the peak step nor increase after it."""
    prof = live_profile(lts)
    if not prof:
        return True
    steps = range(min(prof), max(prof) + 1)
    seq = [prof.get(s, 0) for s in steps]
    p = seq.index(max(seq))
    return all(seq[i] <= seq[i + 1] for i in range(p)) and all(
        seq[i] >= seq[i + 1] for i in range(p, len(seq) - 1)
    )


# ---------------------------------------------------------------------------
# placement helpers
# ---------------------------------------------------------------------------


def _align(n: int, a: int) -> int:
    return -(-n // a) * a


def _busy(lt, placed):
    return sorted((o, o + s) for (o, s, other) in placed if other.overlaps(lt))


def _gaps(busy):
    """Free intervals [lo, hi) below the top of ``busy``, plus the open top."""
    gaps, cursor = [], 0
    for lo, hi in busy:
        if lo > cursor:
            gaps.append((cursor, lo))
        cursor = max(cursor, hi)
    return gaps, cursor


def lowest_fit(lt, size, placed, align=1) -> int:
    gaps, top = _gaps(_busy(lt, placed))
    for lo, hi in gaps:
        o = _align(lo, align)
        if o + size <= hi:
            return o
    return _align(top, align)


def _finish(placed, strategy, align) -> MemPlan:
    arena = max((o + s for o, s, _ in placed), default=0)
    places = [Placement(lt.tensor, o, lt.size, lt.birth, lt.death) for o, s, lt in placed]
    return MemPlan(arena, sorted(places, key=lambda p: p.tensor), strategy, align)


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


def _peak_layouts(at_peak, p):
    """Candidate stackings of the peak set, bottom first.

    Tensors are split by whether they were born before the peak step and
    whether they outlive it.  Tensors spanning both sides go at the bottom;
    the ones that die at the peak and the ones born at it are each kept
    contiguous, so the forward and the backward sweep both start from a
    single freed block.
    """
    def cls(lt):
        return (lt.birth < p, lt.death > p)

    span = [lt for lt in at_peak if cls(lt) == (True, True)]
    by_death = sorted(span, key=lambda lt: (-lt.death, lt.birth, -lt.size, lt.tensor))
    by_birth = sorted(span, key=lambda lt: (lt.birth, -lt.death, -lt.size, lt.tensor))
    old = sorted((lt for lt in at_peak if cls(lt) == (True, False)),
                 key=lambda lt: (lt.birth, -lt.size, lt.tensor))
    new = sorted((lt for lt in at_peak if cls(lt) == (False, True)),
                 key=lambda lt: (-lt.death, -lt.size, lt.tensor))
    only = sorted((lt for lt in at_peak if cls(lt) == (False, False)),
                  key=lambda lt: (-lt.size, lt.tensor))
    layouts = []
    for base in (by_death, by_birth):
        layouts.append(base + old + only + new[::-1])
        layouts.append(base + new + only + old[::-1])
    # stacks that empty strictly from the top in one sweep direction
    layouts.append(sorted(at_peak, key=lambda lt: (-lt.death, lt.birth, -lt.size, lt.tensor)))
    layouts.append(sorted(at_peak, key=lambda lt: (lt.birth, -lt.death, -lt.size, lt.tensor)))
    return layouts


def _sweep(layout, after, before, alignment):
    placed, cursor = [], 0
    for lt in layout:
        size = _align(lt.size, alignment)
        placed.append((cursor, size, lt))
        cursor += size
    for lt in after + before:
        size = _align(lt.size, alignment)
        placed.append((lowest_fit(lt, size, placed, alignment), size, lt))
    return placed


def plan_from_peak(lts, alignment: int = DEFAULT_ALIGNMENT) -> MemPlan:
    """Greedy-from-peak allocation.

    The tensors live at the (earliest) peak step are stacked from offset 0.
    Tensors born later are then placed in birth order, and tensors that
    died earlier in reverse death order, each at the lowest offset that is
    free for its whole lifetime.  Each candidate stacking of the peak set is
    swept this way and the smallest arena is kept; small instances also try
    every stacking, stopping as soon as one meets the live-bytes bound.
    """
    lts = list(lts)
    if not lts:
        return MemPlan(0, [], "from-peak", alignment)
    p = peak_step(lts)
    at_peak = [lt for lt in lts if lt.birth <= p <= lt.death]
    after = sorted((lt for lt in lts if lt.birth > p),
                   key=lambda lt: (lt.birth, -lt.death, -lt.size, lt.tensor))
    before = sorted((lt for lt in lts if lt.death < p),
                    key=lambda lt: (-lt.death, lt.birth, -lt.size, lt.tensor))
    bound = lower_bound([Lifetime(lt.tensor, _align(lt.size, alignment), lt.birth, lt.death)
                         for lt in lts])
    layouts = _peak_layouts(at_peak, p)
    if len(at_peak) <= PERMUTE_LIMIT and len(lts) <= 64:
        layouts = itertools.chain(layouts, itertools.permutations(at_peak))
    best = None
    for layout in layouts:
        placed = _sweep(layout, after, before, alignment)
        arena = max(o + s for o, s, _ in placed)
        if best is None or arena < best[0]:
            best = (arena, placed)
            if arena == bound:
                break
    return _finish(best[1], "from-peak", alignment)


def plan_best_fit(lts, alignment: int = DEFAULT_ALIGNMENT) -> MemPlan:
    """Chronological best-fit: at each birth take the smallest free slot
    that holds the tensor, otherwise grow the top of the arena."""
    lts = sorted(lts, key=lambda lt: (lt.birth, -lt.size, lt.tensor))
    placed, arena = [], 0
    for lt in lts:
        size = _align(lt.size, alignment)
        gaps, top = _gaps(_busy(lt, placed))
        if arena > top:
            gaps.append((top, arena))
        best = None
        for lo, hi in gaps:
            o = _align(lo, alignment)
            if o + size <= hi and (best is None or hi - lo < best[1]):
                best = (o, hi - lo)
        off = best[0] if best is not None else _align(top, alignment)
        placed.append((off, size, lt))
        arena = max(arena, off + size)
    return _finish(placed, "best-fit", alignment)


def plan_optimal(lts, alignment: int = 1, cap: int = ORACLE_CAP) -> MemPlan:
    """Minimal arena by exhaustive search.

    Any packing can be pushed down until placing its tensors in offset order,
    each at the lowest free offset, reproduces it; so it suffices to search
    placement orders whose lowest-fit offsets are non-decreasing.
    """
    lts = list(lts)
    if len(lts) > cap:
        raise OracleTooLarge(f"{len(lts)} tensors exceeds oracle cap {cap}")
    if not lts:
        return MemPlan(0, [], "optimal-oracle", alignment)
    sized = [(lt, _align(lt.size, alignment)) for lt in lts]
    bound = lower_bound([Lifetime(lt.tensor, s, lt.birth, lt.death) for lt, s in sized])
    start = plan_from_peak(lts, alignment)
    best = [start.arena, [(start.offsets()[lt.tensor], s, lt) for lt, s in sized]]
    used = [False] * len(sized)

    def search(placed, last, arena):
        if best[0] == bound:
            return
        if len(placed) == len(sized):
            if arena < best[0]:
                best[0], best[1] = arena, list(placed)
            return
        tried = set()
        for i, (lt, size) in enumerate(sized):
            key = (size, lt.birth, lt.death)
            if used[i] or key in tried:
                continue
            tried.add(key)
            o = lowest_fit(lt, size, placed, alignment)
            if o < last or max(arena, o + size) >= best[0]:
                continue
            used[i] = True
            placed.append((o, size, lt))
            search(placed, o, max(arena, o + size))
            placed.pop()
            used[i] = False

    search([], 0, 0)
    return _finish(best[1], "optimal-oracle", alignment)


STRATEGIES = {"from-peak": plan_from_peak, "best-fit": plan_best_fit}


def overlap_violations(plan: MemPlan) -> list:
    """Independent pairwise check: tensors alive at the same step must not
    share bytes, and every tensor must fit in the arena."""
    bad = []
    ps = plan.placements
    for i, a in enumerate(ps):
        if a.offset < 0 or a.offset + a.size > plan.arena:
            bad.append(f"{a.tensor} outside arena")
        for b in ps[i + 1:]:
            same_time = not (a.death < b.birth or b.death < a.birth)
            same_bytes = a.offset < b.offset + b.size and b.offset < a.offset + a.size
            if same_time and same_bytes:
                bad.append(f"{a.tensor} overlaps {b.tensor}")
    return bad
