"""Evaluation metrics computed from run logs.

Rates are percentages in [0, 100]; normalised accuracy, robustness and the
per-app prediction hit rate are fractions in [0, 1].
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from scipy import stats

from .core import AppId, ApplicationSpec, ModelSwapError, OutcomeKind, ScenarioConfig, config_sha256
from .engine import RunLog
from .workload import WorkloadPair


class EmptyLog(ModelSwapError):
    pass


class NoRequests(ModelSwapError):
    pass


class InsufficientRepetitions(ModelSwapError):
    pass


class DegenerateRange(UserWarning):
    """All accuracies in a normalisation pool are equal; values map to 1.0."""


def _outcomes(log: RunLog, app_id: AppId | None = None):
    if not log.outcomes:
        raise EmptyLog("run log has no outcomes")
    if app_id is None:
        return log.outcomes
    return [o for o in log.outcomes if o.request.app_id == app_id]


def _pct(log: RunLog, kind: OutcomeKind) -> float:
    outs = _outcomes(log)
    return 100.0 * sum(o.kind is kind for o in outs) / len(outs)


def satisfaction_rate(log: RunLog) -> float:
    """Percentage of requests served as warm starts."""
    return _pct(log, OutcomeKind.WARM)


def failure_pct(log: RunLog) -> float:
    return _pct(log, OutcomeKind.FAILURE)


def cold_start_pct(log: RunLog, by_app: bool = False) -> float | dict[AppId, float]:
    if not by_app:
        return _pct(log, OutcomeKind.COLD)
    _outcomes(log)
    out = {}
    for app_id in sorted({o.request.app_id for o in log.outcomes}):
        outs = _outcomes(log, app_id)
        out[app_id] = 100.0 * sum(o.kind is OutcomeKind.COLD for o in outs) / len(outs)
    return out


# -- accuracy ------------------------------------------------------------------

def normalize(value: float, lo: float, hi: float) -> float:
    """Min-max normalise ``value`` into [0, 1]; a zero-width range maps to 1.0."""
    if hi == lo:
        warnings.warn(f"degenerate accuracy range [{lo}, {hi}]", DegenerateRange, stacklevel=2)
        return 1.0
    return (value - lo) / (hi - lo)


def served_accuracies(logs: Iterable[RunLog]) -> list[tuple[AppId, float]]:
    return [
        (o.request.app_id, o.accuracy_pct)
        for log in logs
        for o in log.outcomes
        if o.kind is not OutcomeKind.FAILURE
    ]


def normalized_accuracy(
    logs: RunLog | Sequence[RunLog],
    pool: Sequence[float] | None = None,
    per_app: bool = False,
    zoo_index: Mapping[AppId, ApplicationSpec] | None = None,
) -> float:
    """Mean min-max normalised accuracy of every performed inference.

    The normalisation bounds come from ``pool`` if given, else from the zoo
    accuracies in ``zoo_index``, else from the served accuracies themselves.
    With ``per_app`` each application is normalised against its own bounds.
    Returns nan when no inference was performed.
    """
    if isinstance(logs, RunLog):
        logs = [logs]
    served = served_accuracies(logs)
    if not served:
        return math.nan

    def bounds(app_id: AppId | None) -> tuple[float, float]:
        if pool is not None and not per_app:
            values = list(pool)
        elif zoo_index is not None:
            apps = zoo_index.values() if app_id is None else [zoo_index[app_id]]
            values = [v.accuracy_pct for a in apps for v in a.zoo]
        else:
            values = [acc for a, acc in served if app_id is None or a == app_id]
        if not values:
            raise ValueError("empty normalisation pool")
        return min(values), max(values)

    cache: dict = {}
    total = []
    for app_id, acc in served:
        key = app_id if per_app else None
        if key not in cache:
            cache[key] = bounds(key)
        lo, hi = cache[key]
        total.append(normalize(acc, lo, hi))
    return math.fsum(total) / len(total)


# -- robustness ----------------------------------------------------------------

def prediction_hit_rate(pair: WorkloadPair, delta_ms: float) -> dict[AppId, float]:
    """Per app, the fraction of actual requests within delta of some predicted request."""
    out = {}
    for app_id in pair.actual.app_ids():
        preds = pair.predicted.times(app_id)
        hits = 0
        actual = pair.actual.times(app_id)
        for t in actual:
            k = bisect.bisect_left(preds, t - delta_ms)
            if k < len(preds) and preds[k] <= t + delta_ms:
                hits += 1
        out[app_id] = hits / len(actual)
    return out


@dataclass(frozen=True)
class AppStats:
    requests: int
    warm: int
    cold: int
    failures: int
    mean_accuracy_pct: float
    prediction_accuracy: float

    @property
    def cold_start_pct(self) -> float:
        return 100.0 * self.cold / self.requests


def robustness(report: "SimulationReport | Mapping[AppId, AppStats]") -> float:
    """Mean over applications of warm ratio times prediction accuracy."""
    per_app = report.per_app if isinstance(report, SimulationReport) else report
    terms = [s.warm / s.requests * s.prediction_accuracy for s in per_app.values() if s.requests > 0]
    if not terms:
        raise NoRequests("no application received a request")
    return math.fsum(terms) / len(terms)


@dataclass(frozen=True)
class SimulationReport:
    per_app: dict[AppId, AppStats]
    satisfaction_rate_pct: float
    cold_start_pct: float
    failure_pct: float
    mean_accuracy_pct: float
    normalized_accuracy: float
    robustness: float
    meta: dict = field(default_factory=dict)

    @property
    def policy(self) -> str:
        return self.meta.get("policy", "")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_app"] = {a: asdict(s) for a, s in sorted(self.per_app.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimulationReport":
        per_app = {a: AppStats(**s) for a, s in d["per_app"].items()}
        return cls(**{**d, "per_app": per_app})


def _mean_or_nan(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else math.nan


def build_report(log: RunLog, pair: WorkloadPair, cfg: ScenarioConfig) -> SimulationReport:
    """Summarise one run; accuracy is normalised against the scenario's zoo-wide range."""
    outs = _outcomes(log)
    psi = prediction_hit_rate(pair, log.delta_ms)
    per_app = {}
    for app_id in sorted({o.request.app_id for o in outs}):
        mine = [o for o in outs if o.request.app_id == app_id]
        per_app[app_id] = AppStats(
            requests=len(mine),
            warm=sum(o.kind is OutcomeKind.WARM for o in mine),
            cold=sum(o.kind is OutcomeKind.COLD for o in mine),
            failures=sum(o.kind is OutcomeKind.FAILURE for o in mine),
            mean_accuracy_pct=_mean_or_nan([o.accuracy_pct for o in mine if o.kind is not OutcomeKind.FAILURE]),
            prediction_accuracy=psi.get(app_id, 0.0),
        )
    meta = {
        "policy": log.policy.value,
        "seed": log.seed,
        "deviation": cfg.deviation,
        "alpha": cfg.alpha,
        "mean_concurrency": cfg.mean_concurrency,
        "memory_budget_mb": cfg.memory_budget_mb,
        "delta_ms": log.delta_ms,
        "history_window_ms": log.history_window_ms,
        "measured_kl_nats": pair.measured_kl_nats,
        "config_sha256": config_sha256(cfg),
    }
    return SimulationReport(
        per_app=per_app,
        satisfaction_rate_pct=satisfaction_rate(log),
        cold_start_pct=cold_start_pct(log),
        failure_pct=failure_pct(log),
        mean_accuracy_pct=_mean_or_nan([o.accuracy_pct for o in outs if o.kind is not OutcomeKind.FAILURE]),
        normalized_accuracy=normalized_accuracy(log, zoo_index=cfg.zoo_index),
        robustness=robustness(per_app),
        meta=meta,
    )


def objective_sums(log: RunLog, horizon_ms: float) -> tuple[int, float]:
    """(cold starts, summed accuracy of performed inferences) over [0, horizon_ms]."""
    outs = [o for o in log.outcomes if o.request.time_ms <= horizon_ms]
    cold = sum(o.kind is OutcomeKind.COLD for o in outs)
    acc = math.fsum(o.accuracy_pct for o in outs if o.kind is not OutcomeKind.FAILURE)
    return cold, acc


# -- Pareto ------------------------------------------------------------------

def dominates(p: Sequence[float], q: Sequence[float]) -> bool:
    return all(a <= b for a, b in zip(p, q)) and any(a < b for a, b in zip(p, q))


def pareto_mask(points: Sequence[tuple[float, float]]) -> list[bool]:
    """True for each point that no other point dominates (both objectives minimised)."""
    order = sorted(range(len(points)), key=lambda i: (points[i][0], points[i][1]))
    mask = [False] * len(points)
    best_y = math.inf  # lowest y among strictly smaller x
    k = 0
    while k < len(order):
        x = points[order[k]][0]
        group = []
        while k < len(order) and points[order[k]][0] == x:
            group.append(order[k])
            k += 1
        y0 = points[group[0]][1]
        if y0 < best_y:
            for i in group:
                if points[i][1] == y0:
                    mask[i] = True
            best_y = y0
    return mask


def pareto_front(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Non-dominated points, in input order; duplicates are kept."""
    if not points:
        raise ValueError("pareto_front needs at least one point")
    return [p for p, keep in zip(points, pareto_mask(points)) if keep]


# -- aggregation ---------------------------------------------------------------

AGGREGATE_METRICS = (
    "satisfaction_rate_pct",
    "cold_start_pct",
    "failure_pct",
    "mean_accuracy_pct",
    "normalized_accuracy",
    "robustness",
)


@dataclass(frozen=True)
class Interval:
    mean: float
    half_width: float
    n: int

    @property
    def low(self) -> float:
        return self.mean - self.half_width

    @property
    def high(self) -> float:
        return self.mean + self.half_width


def mean_ci(values: Sequence[float], confidence: float = 0.95) -> Interval:
    """Sample mean and Student-t two-sided confidence half-width."""
    n = len(values)
    if n < 2:
        raise InsufficientRepetitions(f"need at least 2 values, got {n}")
    mean = math.fsum(values) / n
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))
    t = stats.t.ppf(0.5 + confidence / 2, n - 1)
    return Interval(mean, float(t) * sd / math.sqrt(n), n)


def aggregate(reports: Sequence[SimulationReport], metrics: Sequence[str] = AGGREGATE_METRICS) -> dict[str, Interval]:
    if len(reports) < 2:
        raise InsufficientRepetitions(f"need at least 2 reports, got {len(reports)}")
    return {m: mean_ci([getattr(r, m) for r in reports]) for m in metrics}


# -- fairness ------------------------------------------------------------------

def coefficient_of_variation(values: Sequence[float]) -> float:
    """Population standard deviation over the mean (0 for a constant column)."""
    n = len(values)
    mean = math.fsum(values) / n
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / n)
    if sd == 0:
        return 0.0
    return sd / mean


@dataclass(frozen=True)
class FairnessReport:
    cold_start_pct: dict[AppId, float]
    mean_accuracy_pct: dict[AppId, float]
    cold_start_cv: float
    accuracy_cv: float


def fairness_report(report: SimulationReport | Mapping[AppId, AppStats]) -> FairnessReport:
    per_app = report.per_app if isinstance(report, SimulationReport) else report
    if len(per_app) < 2:
        raise ValueError("fairness needs at least two applications")
    cold = {a: s.cold_start_pct for a, s in sorted(per_app.items())}
    acc = {a: s.mean_accuracy_pct for a, s in sorted(per_app.items())}
    finite_acc = [v for v in acc.values() if not math.isnan(v)]
    return FairnessReport(
        cold_start_pct=cold,
        mean_accuracy_pct=acc,
        cold_start_cv=coefficient_of_variation(list(cold.values())),
        accuracy_cv=coefficient_of_variation(finite_acc) if len(finite_acc) >= 2 else math.nan,
    )


# -- serialisation -----------------------------------------------------------

TIDY_HEADER = ("metric", "policy", "deviation", "alpha", "seed", "value", "config_sha256")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (int, float)) and not isinstance(v, bool) else str(v)


def _tidy_line(row: tuple) -> list[str]:
    metric, policy, deviation, alpha, seed, value, sha = row
    return [metric, policy, _fmt(deviation), _fmt(alpha), str(seed), _fmt(value), sha]


def report_to_json(report: SimulationReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> SimulationReport:
    return SimulationReport.from_dict(json.loads(text))


def tidy_rows(report: SimulationReport) -> list[tuple]:
    m = report.meta
    key = (m.get("policy", ""), m.get("deviation", ""), m.get("alpha", ""), m.get("seed", ""))
    rows = [(name, *key, getattr(report, name)) for name in AGGREGATE_METRICS]
    for app_id, s in sorted(report.per_app.items()):
        rows.append((f"cold_start_pct[{app_id}]", *key, s.cold_start_pct))
        rows.append((f"mean_accuracy_pct[{app_id}]", *key, s.mean_accuracy_pct))
        rows.append((f"prediction_accuracy[{app_id}]", *key, s.prediction_accuracy))
    return [(*r, m.get("config_sha256", "")) for r in rows]


def reports_to_tidy_csv(reports: Iterable[SimulationReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIDY_HEADER)
    for r in reports:
        for row in tidy_rows(r):
            w.writerow(_tidy_line(row))
    return buf.getvalue()
