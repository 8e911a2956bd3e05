"""Independent replay of a RunLog.

The auditor rebuilds memory occupancy from the logged load and unload events
alone and re-derives every request classification, without using the
engine's state or the policies.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

from .core import OutcomeKind
from .engine import RunLog

TOL_MB = 1e-6
TOL_MS = 1e-6


@dataclass
class AuditResult:
    violations: list[str] = field(default_factory=list)
    checked_outcomes: int = 0
    checked_steps: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


def audit(log: RunLog, n_requests: int | None = None) -> AuditResult:
    """Check the budget at every step, outcome conservation and every classification."""
    res = AuditResult()
    if n_requests is not None:
        counts = [log.count(k) for k in OutcomeKind]
        if sum(counts) != n_requests or any(o is None for o in log.outcomes):
            res.violations.append(f"conservation: {counts} outcomes for {n_requests} requests")

    events = defaultdict(list)
    for e in log.unload_events:
        events[e.step].append(("unload", e))
    for e in log.load_events:
        events[e.step].append(("load", e))
    outcomes_at = defaultdict(list)
    for i, (o, step) in enumerate(zip(log.outcomes, log.outcome_steps)):
        outcomes_at[step].append(i)

    resident = {}  # app -> (variant, ready_ms)
    for step in sorted(set(events) | set(outcomes_at)):
        for i in outcomes_at.get(step, ()):
            _check_outcome(log, i, resident, events.get(step, ()), res)
        # within a step, unloads precede the loads they make room for
        for kind, e in sorted(events.get(step, ()), key=lambda ke: ke[0] != "unload"):
            if kind == "unload":
                held = resident.pop(e.app_id, None)
                if held is None or held[0] != e.variant:
                    res.violations.append(f"step {step}: unload of {e.app_id}/{e.variant.precision_label} not resident")
            else:
                resident[e.app_id] = (e.variant, e.ready_ms)
        used = math.fsum(v.size_mb for v, _ in resident.values())
        if used > log.budget_mb + TOL_MB:
            res.violations.append(f"step {step}: {used:.3f} MB resident exceeds budget {log.budget_mb} MB")
        res.checked_steps += 1
    for t, used in log.memory_timeline:
        if used > log.budget_mb + TOL_MB:
            res.violations.append(f"timeline t={t}: {used:.3f} MB exceeds budget")
    return res


def _check_outcome(log: RunLog, i: int, resident: dict, step_events, res: AuditResult) -> None:
    o = log.outcomes[i]
    t = o.request.time_ms
    app = o.request.app_id
    held = resident.get(app)
    if held is not None:
        variant, ready = held
        expected = OutcomeKind.WARM if ready <= t + TOL_MS else OutcomeKind.COLD
        served = variant
    else:
        started = [e for kind, e in step_events if kind == "load" and e.app_id == app and e.cause.value == "ColdStart"]
        expected = OutcomeKind.COLD if started else OutcomeKind.FAILURE
        served = started[0].variant if started else None
    res.checked_outcomes += 1
    if o.kind is not expected:
        res.violations.append(f"request {i} ({app} @ {t}): logged {o.kind.value}, replay gives {expected.value}")
    elif o.served_variant != served:
        res.violations.append(f"request {i} ({app} @ {t}): served variant differs from replay")
