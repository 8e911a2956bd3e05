"""Eviction planners.

Every planner reads a :class:`PolicyContext` snapshot and returns an
:class:`EvictionPlan` for loading a variant of the requesting application,
stepping down the zoo until some variant fits.  Planners never mutate state;
the engine enacts plans.
"""

from __future__ import annotations

import bisect
import enum
import heapq
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .core import (
    AppId,
    ApplicationSpec,
    InferenceRequest,
    MemoryState,
    ModelSwapError,
    ModelVariant,
    Policy,
    RequestWindow,
)

EPS_MB = 1e-9


class InferenceFailure(ModelSwapError):
    """Even the smallest variant cannot be made to fit."""


class Action(str, enum.Enum):
    UNLOAD = "Unload"
    REPLACE_WITH_LOWEST = "ReplaceWithLowest"


@dataclass(frozen=True)
class EvictionPlan:
    requester: AppId
    evictions: tuple[tuple[AppId, Action], ...]
    load_variant: ModelVariant | None  # None: requester already holds a variant at least this good
    freed_mb: float
    memory_version: int = -1

    @property
    def is_noop(self) -> bool:
        """The requester already holds a variant at least as good as ``load_variant``."""
        return self.load_variant is None

    def evicted_apps(self) -> list[AppId]:
        return [a for a, _ in self.evictions]


class WindowSchedule:
    """Per-application index over request windows for O(log n) lookups."""

    def __init__(self, windows: Iterable[RequestWindow] = ()):
        self.windows: tuple[RequestWindow, ...] = tuple(windows)
        by_app: dict[AppId, list[RequestWindow]] = defaultdict(list)
        for w in self.windows:
            by_app[w.app_id].append(w)
        self._opens: dict[AppId, list[float]] = {}
        self._reach: dict[AppId, list[float]] = {}
        self._preds: dict[AppId, list[float]] = {}
        self._by_pred: dict[AppId, list[RequestWindow]] = {}
        self._closes: dict[AppId, list[float]] = {}
        for app_id, ws in by_app.items():
            ws.sort(key=lambda w: (w.open_ms, w.close_ms))
            self._opens[app_id] = [w.open_ms for w in ws]
            reach, best = [], float("-inf")
            for w in ws:
                best = max(best, w.close_ms)
                reach.append(best)
            # running max of close times over windows sorted by open time
            self._reach[app_id] = reach
            self._preds[app_id] = sorted(w.predicted_time_ms for w in ws)
            self._by_pred[app_id] = sorted(ws, key=lambda w: (w.close_ms, w.open_ms))
            self._closes[app_id] = [w.close_ms for w in self._by_pred[app_id]]

    def _reach_before(self, app_id: AppId, t: float, inclusive: bool) -> float:
        opens = self._opens.get(app_id)
        if not opens:
            return float("-inf")
        k = bisect.bisect_right(opens, t) if inclusive else bisect.bisect_left(opens, t)
        return self._reach[app_id][k - 1] if k else float("-inf")

    def is_active(self, app_id: AppId, t: float) -> bool:
        """Some window of the app satisfies open <= t < close."""
        return self._reach_before(app_id, t, inclusive=True) > t

    def active_close(self, app_id: AppId, t: float) -> float | None:
        reach = self._reach_before(app_id, t, inclusive=True)
        return reach if reach > t else None

    def active_apps(self, t: float) -> set[AppId]:
        return {a for a in self._opens if self.is_active(a, t)}

    def earliest_active(self, app_id: AppId, t: float) -> RequestWindow | None:
        """Active window of the app that closes first."""
        closes = self._closes.get(app_id)
        if not closes:
            return None
        for w in self._by_pred[app_id][bisect.bisect_right(closes, t):]:
            if w.open_ms <= t:
                return w
        return None

    def overlaps(self, app_id: AppId, lo: float, hi: float) -> bool:
        """Some window of the app intersects [lo, hi]."""
        return self._reach_before(app_id, hi, inclusive=hi == lo) > lo

    def next_predicted(self, app_id: AppId, t: float) -> float | None:
        preds = self._preds.get(app_id, ())
        k = bisect.bisect_right(preds, t)
        return preds[k] if k < len(preds) else None


class RequestHistory:
    """Arrived requests plus the counts behind the unexpected-request estimate.

    ``follow_count(i, j)`` is the number of past requests of ``i`` that were
    followed within ``delta_ms`` by an unpredicted request of ``j``.
    """

    def __init__(self, delta_ms: float):
        self.delta_ms = delta_ms
        self.log: list[tuple[InferenceRequest, bool]] = []
        self._count: dict[AppId, int] = defaultdict(int)
        self._last: dict[AppId, float] = {}
        self._follow: dict[tuple[AppId, AppId], int] = defaultdict(int)
        self._recent: dict[AppId, deque] = defaultdict(deque)

    def record(self, request: InferenceRequest, predicted: bool = True) -> None:
        t = request.time_ms
        for app_id, recent in self._recent.items():
            while recent and recent[0][0] < t - self.delta_ms:
                recent.popleft()
            if predicted:
                continue
            for _, matched in recent:
                if request.app_id not in matched:
                    matched.add(request.app_id)
                    self._follow[app_id, request.app_id] += 1
        self._recent[request.app_id].append((t, set()))
        self._count[request.app_id] += 1
        self._last[request.app_id] = t
        self.log.append((request, predicted))

    def count(self, app_id: AppId) -> int:
        return self._count.get(app_id, 0)

    def follow_count(self, app_id: AppId, other: AppId) -> int:
        return self._follow.get((app_id, other), 0)

    def last_request(self, app_id: AppId) -> float | None:
        return self._last.get(app_id)


@dataclass
class PolicyContext:
    now_ms: float
    requester: AppId
    memory: MemoryState
    windows: WindowSchedule
    history: RequestHistory
    delta_ms: float
    history_window_ms: float
    zoo_index: Mapping[AppId, ApplicationSpec]
    # apps whose model load is still in flight; never chosen as victims
    pinned: frozenset = frozenset()
    _sets: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if not isinstance(self.windows, WindowSchedule):
            self.windows = WindowSchedule(self.windows)
        if not isinstance(self.history, RequestHistory):
            hist = RequestHistory(self.delta_ms)
            for item in self.history:
                req, predicted = item if isinstance(item, tuple) else (item, True)
                hist.record(req, predicted)
            self.history = hist

    @property
    def app(self) -> ApplicationSpec:
        return self.zoo_index[self.requester]

    def requester_interval(self) -> tuple[float, float]:
        """The requester's current window, or [now, now + delta] if it has none."""
        close = self.windows.active_close(self.requester, self.now_ms)
        hi = self.now_ms + self.delta_ms
        return self.now_ms, hi if close is None else max(close, hi)

    def candidates(self) -> list[AppId]:
        """Minimalist apps other than the requester that may be scavenged."""
        _, minimalist = partition_sets(self)
        return sorted(a for a in minimalist if a != self.requester and a not in self.pinned)


def partition_sets(ctx: PolicyContext) -> tuple[set[AppId], set[AppId]]:
    """(maximalist, minimalist): apps inside a window now, and loaded apps that are not."""
    if ctx._sets is None:
        maximalist = {a for a in ctx.zoo_index if ctx.windows.is_active(a, ctx.now_ms)}
        minimalist = {a for a in ctx.memory.loaded if a not in maximalist}
        ctx._sets = (maximalist, minimalist)
    return set(ctx._sets[0]), set(ctx._sets[1])


def _loaded_size(ctx: PolicyContext, app_id: AppId) -> float:
    return ctx.memory.loaded[app_id].size_mb


def _scavengeable(ctx: PolicyContext, app_id: AppId) -> float:
    return ctx.memory.loaded[app_id].size_mb - ctx.zoo_index[app_id].lowest.size_mb


def _plan_loop(
    ctx: PolicyContext,
    desired_index: int,
    select: Callable[[PolicyContext, float], list[tuple[AppId, float]] | None],
    action: Action,
) -> EvictionPlan:
    """Step down the requester's zoo from ``desired_index`` until ``select`` frees enough."""
    app = ctx.app
    if not 0 <= desired_index < len(app.zoo):
        raise IndexError(f"desired_index {desired_index} outside zoo of {app.app_id}")
    current = ctx.memory.get(ctx.requester)
    current_index = app.index_of(current) if current is not None else len(app.zoo)
    own = current.size_mb if current is not None else 0.0
    available = ctx.memory.free_mb + own
    for k in range(desired_index, len(app.zoo)):
        if k >= current_index:
            return EvictionPlan(ctx.requester, (), None, 0.0, ctx.memory.version)
        variant = app.zoo[k]
        need = variant.size_mb - available
        if need <= EPS_MB:
            return EvictionPlan(ctx.requester, (), variant, own, ctx.memory.version)
        picked = select(ctx, need)
        if picked is not None:
            freed = own + sum(mb for _, mb in picked)
            evictions = tuple((a, action) for a, _ in picked)
            return EvictionPlan(ctx.requester, evictions, variant, freed, ctx.memory.version)
    raise InferenceFailure(
        f"{ctx.requester}: no variant fits at t={ctx.now_ms:.3f} ms "
        f"(free {ctx.memory.free_mb:.1f} MB, candidates {ctx.candidates()})"
    )


def _accumulate(items: Sequence[tuple[AppId, float]], need: float) -> tuple[list, float]:
    picked, total = [], 0.0
    for app_id, mb in items:
        if total >= need - EPS_MB:
            break
        picked.append((app_id, mb))
        total += mb
    return picked, total


def _best_fit(items: Sequence[tuple[AppId, float]], need: float) -> tuple[list, float]:
    """Single closest sufficient item, else ascending |size - need| until satisfied."""
    sufficient = [(mb - need, app_id, mb) for app_id, mb in items if mb >= need - EPS_MB]
    if sufficient:
        _, app_id, mb = min(sufficient)
        return [(app_id, mb)], mb
    ordered = sorted(items, key=lambda it: (abs(it[1] - need), it[0]))
    return _accumulate(ordered, need)


def _select_lfe(ctx: PolicyContext, need: float):
    items = sorted(((a, _loaded_size(ctx, a)) for a in ctx.candidates()), key=lambda it: (-it[1], it[0]))
    picked, total = _accumulate(items, need)
    return picked if total >= need - EPS_MB else None


def _select_bfe(ctx: PolicyContext, need: float):
    picked, total = _best_fit([(a, _loaded_size(ctx, a)) for a in ctx.candidates()], need)
    return picked if total >= need - EPS_MB else None


def _select_wsbfe(ctx: PolicyContext, need: float):
    lo, hi = ctx.requester_interval()
    tiers: tuple[list, list] = ([], [])
    for a in ctx.candidates():
        mb = _scavengeable(ctx, a)
        if mb > EPS_MB:
            tiers[ctx.windows.overlaps(a, lo, hi)].append((a, mb))
    picked, remaining = [], need
    for tier in tiers:
        if remaining <= EPS_MB:
            break
        chosen, total = _best_fit(tier, remaining)
        picked += chosen
        remaining -= total
    return picked if remaining <= EPS_MB else None


def lfe_plan(ctx: PolicyContext, desired_index: int = 0) -> EvictionPlan:
    """Largest-first eviction: unload the biggest minimalist models first."""
    return _plan_loop(ctx, desired_index, _select_lfe, Action.UNLOAD)


def bfe_plan(ctx: PolicyContext, desired_index: int = 0) -> EvictionPlan:
    """Best-fit eviction: unload the minimalist model whose size is closest to the shortfall."""
    return _plan_loop(ctx, desired_index, _select_bfe, Action.UNLOAD)


def wsbfe_plan(ctx: PolicyContext, desired_index: int = 0) -> EvictionPlan:
    """Best-fit on scavengeable memory, downgrading victims to their smallest variant.

    Candidates whose windows overlap the requester's are used only after
    every non-overlapping candidate.
    """
    return _plan_loop(ctx, desired_index, _select_wsbfe, Action.REPLACE_WITH_LOWEST)


def unexpected_request_probability(ctx: PolicyContext, candidate: AppId) -> float:
    """Empirical P(unpredicted request of ``candidate`` within delta | requester was requested)."""
    n = ctx.history.count(ctx.requester)
    if n == 0:
        return 0.0
    return ctx.history.follow_count(ctx.requester, candidate) / n


def fitness_score(
    ctx: PolicyContext,
    candidate: AppId,
    candidates: Iterable[AppId],
    probabilities: Mapping[AppId, float] | None = None,
) -> float:
    """Normalised time to the candidate's next predicted request times (1 - P(unexpected request)).

    A candidate with no future prediction gets normalised distance 1.
    """
    now = ctx.now_ms
    dists = {}
    for k in candidates:
        t = ctx.windows.next_predicted(k, now)
        dists[k] = None if t is None else t - now
    if candidate not in dists:
        raise ValueError(f"{candidate} is not among the candidates")
    finite = [d for d in dists.values() if d is not None]
    d = dists[candidate]
    norm = 1.0 if d is None or not finite else d / max(finite)
    p = probabilities[candidate] if probabilities is not None else unexpected_request_probability(ctx, candidate)
    return norm * (1.0 - p)


def iwsbfe_candidates(ctx: PolicyContext) -> list[AppId]:
    """Minimalist apps not requested within the history window and not overlapping the requester."""
    cutoff = ctx.now_ms - ctx.history_window_ms
    lo, hi = ctx.requester_interval()
    out = []
    for a in ctx.candidates():
        last = ctx.history.last_request(a)
        if last is not None and last >= cutoff:
            continue
        if ctx.windows.overlaps(a, lo, hi):
            continue
        out.append(a)
    return out


def iwsbfe_order(ctx: PolicyContext, candidates: Sequence[AppId] | None = None) -> list[tuple[AppId, float]]:
    """Candidates in max-heap extraction order: score, then scavengeable MB, then app id."""
    cands = iwsbfe_candidates(ctx) if candidates is None else list(candidates)
    heap = [(-fitness_score(ctx, a, cands), -_scavengeable(ctx, a), a) for a in cands]
    heapq.heapify(heap)
    order = []
    while heap:
        neg_score, _, a = heapq.heappop(heap)
        order.append((a, -neg_score))
    return order


def _select_iwsbfe(ctx: PolicyContext, need: float):
    picked, total = [], 0.0
    # heap is rebuilt for each zoo step
    for a, _ in iwsbfe_order(ctx):
        if total >= need - EPS_MB:
            break
        mb = _scavengeable(ctx, a)
        if mb > EPS_MB:
            picked.append((a, mb))
            total += mb
    return picked if total >= need - EPS_MB else None


def iwsbfe_plan(ctx: PolicyContext, desired_index: int = 0) -> EvictionPlan:
    """Replace the highest-scoring eligible minimalist models with their smallest variants."""
    return _plan_loop(ctx, desired_index, _select_iwsbfe, Action.REPLACE_WITH_LOWEST)


def no_policy_plan(ctx: PolicyContext, desired_index: int = 0) -> EvictionPlan:
    """Baseline: the top variant loads only if it fits in free memory; nothing is evicted."""
    if ctx.memory.get(ctx.requester) is not None:
        return EvictionPlan(ctx.requester, (), None, 0.0, ctx.memory.version)
    top = ctx.app.highest
    if top.size_mb > ctx.memory.free_mb + EPS_MB:
        raise InferenceFailure(f"{ctx.requester}: top variant does not fit in free memory")
    return EvictionPlan(ctx.requester, (), top, 0.0, ctx.memory.version)


PLANNERS: dict[Policy, Callable[[PolicyContext, int], EvictionPlan]] = {
    Policy.NONE: no_policy_plan,
    Policy.LFE: lfe_plan,
    Policy.BFE: bfe_plan,
    Policy.WSBFE: wsbfe_plan,
    Policy.IWSBFE: iwsbfe_plan,
}


def plan(policy: Policy | str, ctx: PolicyContext, desired_index: int = 0) -> EvictionPlan:
    return PLANNERS[Policy.parse(policy)](ctx, desired_index)


def check_plan(plan_: EvictionPlan, ctx: PolicyContext) -> None:
    """Assert a plan's invariants against the snapshot it was computed from."""
    if plan_.load_variant is None:
        assert not plan_.evictions
        return
    maximalist, _ = partition_sets(ctx)
    loaded = dict(ctx.memory.loaded)
    for app_id, action in plan_.evictions:
        assert app_id not in maximalist, f"evicts maximalist app {app_id}"
        assert app_id != ctx.requester
        if action is Action.UNLOAD:
            del loaded[app_id]
        else:
            loaded[app_id] = ctx.zoo_index[app_id].lowest
    loaded.pop(ctx.requester, None)
    free = ctx.memory.budget_mb - sum(v.size_mb for v in loaded.values())
    assert free >= plan_.load_variant.size_mb - 1e-6, f"plan leaves {free} MB for {plan_.load_variant.size_mb}"
