"""Discrete-event simulation of proactive model loading on a memory-bounded edge server."""

from __future__ import annotations

import csv
import enum
import heapq
import io
import json
from dataclasses import dataclass
from typing import Mapping

from .core import (
    AppId,
    ApplicationSpec,
    InferenceRequest,
    MemoryState,
    ModelSwapError,
    ModelVariant,
    OutcomeKind,
    Policy,
    RequestOutcome,
    RequestWindow,
    ScenarioConfig,
)
from .policies import (
    Action,
    EvictionPlan,
    InferenceFailure,
    PolicyContext,
    RequestHistory,
    WindowSchedule,
    plan as make_plan,
)
from .workload import WorkloadPair, compute_delta, compute_history_window

# a load finishing within this many ms of a request counts as finished
EPS_MS = 1e-6


class PlanStale(ModelSwapError):
    pass


class EventKind(enum.IntEnum):
    # value is the tie-break priority at equal timestamps
    WINDOW_CLOSE = 0
    LOAD_COMPLETE = 1
    REQUEST_ARRIVAL = 2
    WINDOW_OPEN = 3


class LoadCause(str, enum.Enum):
    PROACTIVE = "Proactive"
    COLD_START = "ColdStart"
    REPLACEMENT = "Replacement"


@dataclass(frozen=True, order=True)
class SimEvent:
    time_ms: float
    kind: EventKind
    app_id: AppId
    seq: int
    payload: object = None


@dataclass(frozen=True)
class LoadEvent:
    time_ms: float
    app_id: AppId
    variant: ModelVariant
    cause: LoadCause
    ready_ms: float
    step: int


@dataclass(frozen=True)
class UnloadEvent:
    time_ms: float
    app_id: AppId
    variant: ModelVariant
    step: int


@dataclass(frozen=True)
class RunLog:
    policy: Policy
    seed: int
    budget_mb: float
    delta_ms: float
    history_window_ms: float
    outcomes: tuple[RequestOutcome, ...]
    outcome_steps: tuple[int, ...]
    memory_timeline: tuple[tuple[float, float], ...]
    load_events: tuple[LoadEvent, ...]
    unload_events: tuple[UnloadEvent, ...]

    def count(self, kind: OutcomeKind, app_id: AppId | None = None) -> int:
        return sum(
            1 for o in self.outcomes if o.kind is kind and (app_id is None or o.request.app_id == app_id)
        )


def window_schedule(
    pair: WorkloadPair, delta_ms: float, zoo_index: Mapping[AppId, ApplicationSpec]
) -> list[RequestWindow]:
    """One window per predicted request, led by the app's top-variant load time."""
    if delta_ms < 0:
        raise ValueError("delta_ms must be non-negative")
    return [
        RequestWindow(r.app_id, r.time_ms, delta_ms, zoo_index[r.app_id].highest.load_time_ms)
        for r in pair.predicted.requests
    ]


def enact(plan: EvictionPlan, memory: MemoryState, zoo_index: Mapping[AppId, ApplicationSpec] | None = None) -> MemoryState:
    """Apply a plan: evictions first, then the requester's new variant."""
    if plan.memory_version != memory.version:
        raise PlanStale(
            f"plan for {plan.requester} computed at memory version {plan.memory_version}, now {memory.version}"
        )
    if plan.load_variant is None:
        return memory
    for app_id, action in plan.evictions:
        if action is Action.UNLOAD:
            memory.remove(app_id)
        else:
            if zoo_index is None:
                raise ValueError("zoo_index is required to replace with the lowest variant")
            memory.put(zoo_index[app_id].lowest)
    memory.put(plan.load_variant)
    return memory


class Simulation:
    """Single-threaded event loop for one (config, workload pair)."""

    def __init__(self, cfg: ScenarioConfig, pair: WorkloadPair):
        self.cfg = cfg
        self.policy = cfg.policy
        self.zoo = cfg.zoo_index
        self.pair = pair
        residuals = pair.residuals()
        self.delta_ms = compute_delta(residuals, cfg.alpha) if residuals else 0.0
        self.history_window_ms = compute_history_window(pair.actual) if len(pair.actual) >= 2 else 0.0
        self.windows = window_schedule(pair, self.delta_ms, self.zoo)
        self.schedule = WindowSchedule(self.windows)
        self.history = RequestHistory(self.delta_ms)
        self.memory = MemoryState(cfg.memory_budget_mb)
        self.ready_at: dict[AppId, float] = {}
        self.load_id: dict[AppId, int] = {}
        # requests already charged to the app's in-flight load
        self.waiting: dict[AppId, int] = {}
        self.deferred: set[AppId] = set()
        self._queue: list[SimEvent] = []
        self._seq = 0
        self.now = 0.0
        self.step = 0
        self.outcomes: list[RequestOutcome | None] = [None] * len(pair.actual)
        self.outcome_steps: list[int] = [0] * len(pair.actual)
        self.timeline: list[tuple[float, float]] = [(0.0, 0.0)]
        self.loads: list[LoadEvent] = []
        self.unloads: list[UnloadEvent] = []

    def _push(self, time_ms: float, kind: EventKind, app_id: AppId, payload=None):
        if time_ms < self.now:
            raise RuntimeError(f"event at {time_ms} scheduled before clock {self.now}")
        self._seq += 1
        heapq.heappush(self._queue, SimEvent(time_ms, kind, app_id, self._seq, payload))

    def run(self) -> RunLog:
        for i, req in enumerate(self.pair.actual.requests):
            self._push(req.time_ms, EventKind.REQUEST_ARRIVAL, req.app_id, i)
        if self.policy is not Policy.NONE:
            for w in self.windows:
                self._push(w.open_ms, EventKind.WINDOW_OPEN, w.app_id, w)
                self._push(w.close_ms, EventKind.WINDOW_CLOSE, w.app_id, w)
        handlers = {
            EventKind.REQUEST_ARRIVAL: self._on_request,
            EventKind.WINDOW_OPEN: self._on_window_open,
            EventKind.WINDOW_CLOSE: self._on_window_close,
            EventKind.LOAD_COMPLETE: self._on_load_complete,
        }
        while self._queue:
            ev = heapq.heappop(self._queue)
            self.now = ev.time_ms
            self.step += 1
            handlers[ev.kind](ev)
        return RunLog(
            policy=self.policy,
            seed=self.cfg.seed,
            budget_mb=self.memory.budget_mb,
            delta_ms=self.delta_ms,
            history_window_ms=self.history_window_ms,
            outcomes=tuple(self.outcomes),
            outcome_steps=tuple(self.outcome_steps),
            memory_timeline=tuple(self.timeline),
            load_events=tuple(self.loads),
            unload_events=tuple(self.unloads),
        )

    # -- helpers ---------------------------------------------------------

    def _in_flight(self, app_id: AppId) -> bool:
        return app_id in self.memory.loaded and self.ready_at[app_id] > self.now + EPS_MS

    def _context(self, app_id: AppId) -> PolicyContext:
        pinned = frozenset(a for a in self.memory.loaded if self._in_flight(a))
        return PolicyContext(
            now_ms=self.now,
            requester=app_id,
            memory=self.memory,
            windows=self.schedule,
            history=self.history,
            delta_ms=self.delta_ms,
            history_window_ms=self.history_window_ms,
            zoo_index=self.zoo,
            pinned=pinned,
        )

    def _start_load(self, variant: ModelVariant, cause: LoadCause):
        app_id = variant.app_id
        ready = self.now + variant.load_time_ms
        self.ready_at[app_id] = ready
        self.load_id[app_id] = self.load_id.get(app_id, 0) + 1
        self.waiting[app_id] = 0
        self.loads.append(LoadEvent(self.now, app_id, variant, cause, ready, self.step))
        self._push(ready, EventKind.LOAD_COMPLETE, app_id, self.load_id[app_id])

    def _apply(self, plan: EvictionPlan, cause: LoadCause):
        before = dict(self.memory.loaded)
        enact(plan, self.memory, self.zoo)
        for app_id, action in plan.evictions:
            self.unloads.append(UnloadEvent(self.now, app_id, before[app_id], self.step))
            if action is Action.REPLACE_WITH_LOWEST:
                self._start_load(self.memory.loaded[app_id], LoadCause.REPLACEMENT)
            else:
                del self.ready_at[app_id]
        own = before.get(plan.requester)
        if own is not None:
            self.unloads.append(UnloadEvent(self.now, plan.requester, own, self.step))
        self._start_load(plan.load_variant, cause)
        self.timeline.append((self.now, self.memory.used_mb))

    def _try_upgrade(self, app_id: AppId):
        current = self.memory.get(app_id)
        if current is not None and self.zoo[app_id].index_of(current) == 0:
            return
        if self._in_flight(app_id) and self.waiting[app_id]:
            # a request is already waiting on this load; upgrade once it lands
            self.deferred.add(app_id)
            return
        try:
            plan = make_plan(self.policy, self._context(app_id), 0)
        except InferenceFailure:
            return
        if plan.is_noop:
            return
        if current is not None and not self._in_flight(app_id):
            # swapping out a servable model only pays if the new one lands in time
            w = self.schedule.earliest_active(app_id, self.now)
            if w is not None and self.now + plan.load_variant.load_time_ms > w.predicted_time_ms - w.delta_ms + EPS_MS:
                return
        self._apply(plan, LoadCause.PROACTIVE)

    # -- handlers --------------------------------------------------------

    def _on_request(self, ev: SimEvent):
        i = ev.payload
        req: InferenceRequest = self.pair.actual.requests[i]
        app_id = req.app_id
        variant = self.memory.get(app_id)
        if variant is not None and not self._in_flight(app_id):
            out = RequestOutcome(req, OutcomeKind.WARM, variant, variant.inference_time_ms, variant.accuracy_pct)
        elif variant is not None:
            wait = self.ready_at[app_id] - self.now
            self.waiting[app_id] += 1
            out = RequestOutcome(
                req, OutcomeKind.COLD, variant, wait + variant.inference_time_ms, variant.accuracy_pct
            )
        else:
            try:
                plan = make_plan(self.policy, self._context(app_id), 0)
            except InferenceFailure:
                out = RequestOutcome(req, OutcomeKind.FAILURE, None, 0.0, None)
            else:
                self._apply(plan, LoadCause.COLD_START)
                self.waiting[app_id] += 1
                v = plan.load_variant
                out = RequestOutcome(req, OutcomeKind.COLD, v, v.load_time_ms + v.inference_time_ms, v.accuracy_pct)
        self.outcomes[i] = out
        self.outcome_steps[i] = self.step
        self.history.record(req, predicted=self.pair.actual.links[i] is not None)

    def _on_window_open(self, ev: SimEvent):
        self._try_upgrade(ev.app_id)

    def _on_window_close(self, ev: SimEvent):
        # eviction is demand-driven; the app simply becomes a minimalist
        if not self.schedule.is_active(ev.app_id, self.now):
            self.deferred.discard(ev.app_id)

    def _on_load_complete(self, ev: SimEvent):
        app_id = ev.app_id
        if self.load_id.get(app_id) != ev.payload or app_id not in self.memory.loaded:
            return
        if app_id in self.deferred:
            self.deferred.discard(app_id)
            if self.schedule.is_active(app_id, self.now):
                self._try_upgrade(app_id)


def run(cfg: ScenarioConfig, pair: WorkloadPair) -> RunLog:
    """Simulate one scenario against a workload pair."""
    return Simulation(cfg, pair).run()


# -- serialisation -----------------------------------------------------------

def _variant_ref(v: ModelVariant | None):
    return None if v is None else {"app_id": v.app_id, "precision_label": v.precision_label}


def outcome_to_dict(o: RequestOutcome, step: int) -> dict:
    return {
        "app_id": o.request.app_id,
        "time_ms": o.request.time_ms,
        "kind": o.kind.value,
        "variant": None if o.served_variant is None else o.served_variant.precision_label,
        "latency_ms": o.latency_ms,
        "accuracy_pct": o.accuracy_pct,
        "step": step,
    }


def runlog_to_jsonl(log: RunLog, header: Mapping | None = None) -> str:
    """Header line, then one JSON object per request outcome."""
    head = {
        "type": "header",
        "policy": log.policy.value,
        "seed": log.seed,
        "budget_mb": log.budget_mb,
        "delta_ms": log.delta_ms,
        "history_window_ms": log.history_window_ms,
        "n_outcomes": len(log.outcomes),
    }
    head.update(header or {})
    lines = [json.dumps(head, sort_keys=True)]
    for o, step in zip(log.outcomes, log.outcome_steps):
        lines.append(json.dumps({"type": "outcome", **outcome_to_dict(o, step)}, sort_keys=True))
    return "\n".join(lines) + "\n"


def events_to_jsonl(log: RunLog, header: Mapping | None = None) -> str:
    lines = [json.dumps({"type": "header", "seed": log.seed, **(header or {})}, sort_keys=True)]
    for e in log.load_events:
        lines.append(json.dumps({
            "type": "load", "time_ms": e.time_ms, "app_id": e.app_id,
            "variant": e.variant.precision_label, "cause": e.cause.value,
            "ready_ms": e.ready_ms, "step": e.step,
        }, sort_keys=True))
    for e in log.unload_events:
        lines.append(json.dumps({
            "type": "unload", "time_ms": e.time_ms, "app_id": e.app_id,
            "variant": e.variant.precision_label, "step": e.step,
        }, sort_keys=True))
    return "\n".join(lines) + "\n"


SUMMARY_HEADER = ("app_id", "requests", "warm", "cold", "failures", "mean_latency_ms", "seed", "config_sha256")


def runlog_summary_csv(log: RunLog, config_sha256: str = "") -> str:
    """Per-application outcome counts, plus an ``ALL`` row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    apps = sorted({o.request.app_id for o in log.outcomes})
    for app in apps + [None]:
        outs = [o for o in log.outcomes if app is None or o.request.app_id == app]
        served = [o.latency_ms for o in outs if o.kind is not OutcomeKind.FAILURE]
        mean_lat = sum(served) / len(served) if served else ""
        w.writerow((
            "ALL" if app is None else app,
            len(outs),
            sum(o.kind is OutcomeKind.WARM for o in outs),
            sum(o.kind is OutcomeKind.COLD for o in outs),
            sum(o.kind is OutcomeKind.FAILURE for o in outs),
            repr(mean_lat) if mean_lat != "" else "",
            log.seed,
            config_sha256,
        ))
    return buf.getvalue()
