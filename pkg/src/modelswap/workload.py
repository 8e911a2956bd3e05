"""Actual/predicted request traces and the scheduling constants derived from them."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import AppId, InferenceRequest, ModelSwapError, ScenarioConfig

ACTUAL = "Actual"
PREDICTED = "Predicted"

KL_BINS = 20
KL_RANGE_MULTIPLE = 3.0
KL_PSEUDO_COUNT = 1.0
PROVISIONAL_DELTA_FRACTION = 0.1


class EmptyProfile(ModelSwapError):
    pass


class DivergenceUndefined(ModelSwapError):
    pass


class NotADistribution(ModelSwapError):
    pass


@dataclass(frozen=True)
class WorkloadTrace:
    """Time-sorted requests.

    ``links[k]`` is the index of request ``k``'s counterpart in the other trace
    of a :class:`WorkloadPair`, or ``None``.  For the actual trace a ``None``
    link marks an unpredicted request; for the predicted trace it marks a
    phantom prediction.
    """

    requests: tuple[InferenceRequest, ...]
    label: str = ACTUAL
    links: tuple[int | None, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "requests", tuple(self.requests))
        links = tuple(self.links) if self.links is not None else (None,) * len(self.requests)
        if len(links) != len(self.requests):
            raise ValueError("links must have one entry per request")
        object.__setattr__(self, "links", links)
        for a, b in zip(self.requests, self.requests[1:]):
            if (a.time_ms, a.app_id) > (b.time_ms, b.app_id):
                raise ValueError(f"{self.label} trace is not sorted at t={b.time_ms}")

    def __len__(self):
        return len(self.requests)

    def times(self, app_id: AppId | None = None) -> list[float]:
        return [r.time_ms for r in self.requests if app_id is None or r.app_id == app_id]

    def app_ids(self) -> list[AppId]:
        return sorted({r.app_id for r in self.requests})


@dataclass(frozen=True)
class WorkloadPair:
    actual: WorkloadTrace
    predicted: WorkloadTrace
    target_deviation: float
    measured_kl_nats: float

    def unpredicted(self) -> list[int]:
        """Indices of actual requests no prediction points at."""
        return [i for i, link in enumerate(self.actual.links) if link is None]

    def residuals(self) -> list[float]:
        """|actual - predicted| for every linked request, in actual-trace order."""
        out = []
        for req, link in zip(self.actual.requests, self.actual.links):
            if link is not None:
                out.append(abs(req.time_ms - self.predicted.requests[link].time_ms))
        return out


def _sorted_trace(requests: Iterable[InferenceRequest], label: str) -> WorkloadTrace:
    return WorkloadTrace(tuple(sorted(requests, key=lambda r: (r.time_ms, r.app_id))), label)


def footprint_ms(cfg: ScenarioConfig, delta_ms: float) -> float:
    """Mean width of a request window: 2*delta plus the mean top-variant load time."""
    theta = math.fsum(a.highest.load_time_ms for a in cfg.applications) / len(cfg.applications)
    return 2.0 * delta_ms + theta


def _unit_arrivals(cfg: ScenarioConfig, rng_seed: int) -> dict[AppId, np.ndarray]:
    # cumulative unit-rate exponential draws, one stream per app in sorted order
    rng = np.random.default_rng(rng_seed)
    return {
        app_id: np.cumsum(rng.standard_exponential(cfg.requests_per_app))
        for app_id in cfg.app_ids
    }


def _trace_at_rate(units: dict[AppId, np.ndarray], per_app_rate: float) -> WorkloadTrace:
    reqs = [
        InferenceRequest(app_id, float(t))
        for app_id, arr in units.items()
        for t in arr / per_app_rate
    ]
    return _sorted_trace(reqs, ACTUAL)


def arrival_rate(cfg: ScenarioConfig, rng_seed: int | None = None) -> float:
    """Pooled request rate (requests per ms) that targets ``cfg.mean_concurrency``.

    The expected number of open windows is rate * (2*delta + mean load time).
    A provisional delta of a tenth of the naive mean inter-arrival sets the
    first rate; delta is then measured on a trace derived at that rate and
    the rate is solved once more.
    """
    n = len(cfg.applications)
    c = cfg.mean_concurrency
    theta = footprint_ms(cfg, 0.0)
    naive = c / theta
    rate0 = c / footprint_ms(cfg, PROVISIONAL_DELTA_FRACTION / naive)
    if cfg.deviation == 0 and cfg.alpha == 0:
        return c / theta
    seed = cfg.seed if rng_seed is None else rng_seed
    provisional = _trace_at_rate(_unit_arrivals(cfg, seed), rate0 / n)
    pair = derive_predicted(provisional, cfg.deviation, _predicted_seed(seed), with_kl=False)
    res = pair.residuals()
    delta = compute_delta(res, cfg.alpha) if res else 0.0
    return c / footprint_ms(cfg, delta)


def _predicted_seed(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(1,))


def generate_actual(cfg: ScenarioConfig, rng_seed: int | None = None) -> WorkloadTrace:
    """Equal request counts per app, exponential inter-arrivals, sorted by time."""
    seed = cfg.seed if rng_seed is None else rng_seed
    rate = arrival_rate(cfg, seed)
    return _trace_at_rate(_unit_arrivals(cfg, seed), rate / len(cfg.applications))


def mean_interarrival_by_app(trace: WorkloadTrace) -> dict[AppId, float]:
    """Mean gap between an app's requests, counting the first gap from t=0."""
    out = {}
    for app_id in trace.app_ids():
        ts = trace.times(app_id)
        out[app_id] = ts[-1] / len(ts)
    return out


def derive_predicted(
    actual: WorkloadTrace,
    deviation: float,
    rng_seed,
    *,
    phantom_predictions: bool = False,
    with_kl: bool = True,
) -> WorkloadPair:
    """Perturb an actual trace into the trace a request predictor would emit.

    Each arrival is jittered by N(0, (deviation * app mean inter-arrival)^2)
    and floor(deviation/2 * N) uniformly chosen requests are dropped; the
    dropped ones are the unpredicted requests.  With ``phantom_predictions``
    the same number of predictions with no actual counterpart is added.
    """
    if not 0 <= deviation <= 1:
        raise ValueError(f"deviation must be in [0, 1], got {deviation}")
    rng = np.random.default_rng(rng_seed)
    n = len(actual)
    n_drop = math.floor(deviation * n / 2 + 1e-9)
    noise = rng.standard_normal(n)
    dropped = set(rng.choice(n, size=n_drop, replace=False).tolist()) if n_drop else set()
    scale = mean_interarrival_by_app(actual) if n else {}

    entries = []  # (time, app_id, actual index or None)
    for i, req in enumerate(actual.requests):
        if i in dropped:
            continue
        jitter = deviation * scale[req.app_id] * float(noise[i])
        entries.append((max(0.0, req.time_ms + jitter), req.app_id, i))
    if phantom_predictions and n_drop:
        apps = actual.app_ids()
        t_max = actual.requests[-1].time_ms
        picks = rng.integers(0, len(apps), size=n_drop)
        times = rng.uniform(0.0, t_max, size=n_drop)
        entries.extend((float(t), apps[int(k)], None) for t, k in zip(times, picks))
    entries.sort(key=lambda e: (e[0], e[1], -1 if e[2] is None else e[2]))

    actual_links: list[int | None] = [None] * n
    pred_links = []
    for j, (_, _, i) in enumerate(entries):
        pred_links.append(i)
        if i is not None:
            actual_links[i] = j
    predicted = WorkloadTrace(
        tuple(InferenceRequest(app, t) for t, app, _ in entries), PREDICTED, tuple(pred_links)
    )
    actual = WorkloadTrace(actual.requests, ACTUAL, tuple(actual_links))
    kl = interarrival_kl(actual, predicted) if with_kl else 0.0
    return WorkloadPair(actual, predicted, float(deviation), kl)


def generate_pair(cfg: ScenarioConfig, rng_seed: int | None = None) -> WorkloadPair:
    seed = cfg.seed if rng_seed is None else rng_seed
    actual = generate_actual(cfg, seed)
    return derive_predicted(
        actual, cfg.deviation, _predicted_seed(seed), phantom_predictions=cfg.phantom_predictions
    )


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """KL(p || q) in nats, with 0 * ln(0/q) taken as 0."""
    if len(p) != len(q):
        raise ValueError("distributions must have the same support size")
    for name, dist in (("p", p), ("q", q)):
        if any(x < 0 for x in dist) or abs(math.fsum(dist) - 1.0) > 1e-9:
            raise NotADistribution(f"{name} does not sum to 1 (sum={math.fsum(dist)!r})")
    terms = []
    for pi, qi in zip(p, q):
        if pi == 0:
            continue
        if qi == 0:
            raise DivergenceUndefined("q has zero mass where p is positive")
        terms.append(pi * math.log(pi / qi))
    return max(0.0, math.fsum(terms))


def interarrival_histogram(gaps: Sequence[float], upper: float) -> list[float]:
    """Laplace-smoothed histogram over KL_BINS equal bins of [0, upper]; overflow goes in the last bin."""
    counts, _ = np.histogram(np.clip(gaps, 0.0, upper), bins=KL_BINS, range=(0.0, upper))
    counts = counts.astype(float) + KL_PSEUDO_COUNT
    return (counts / counts.sum()).tolist()


def interarrival_kl(actual: WorkloadTrace, predicted: WorkloadTrace) -> float:
    a = np.diff(actual.times())
    b = np.diff(predicted.times())
    if len(a) == 0 or len(b) == 0 or a.mean() <= 0:
        return 0.0
    upper = KL_RANGE_MULTIPLE * float(a.mean())
    p = interarrival_histogram(a, upper)
    q = interarrival_histogram(b, upper)
    if p == q:
        return 0.0
    # histogram normalisation can leave sums a few ulps off 1
    p = [x / math.fsum(p) for x in p]
    q = [x / math.fsum(q) for x in q]
    return kl_divergence(p, q)


def compute_delta(residuals: Sequence[float], alpha: float = 0.0) -> float:
    """Request-window half-width: mean residual plus ``alpha`` population std devs."""
    if len(residuals) == 0:
        raise EmptyProfile("no linked requests to profile")
    mean = math.fsum(residuals) / len(residuals)
    if alpha == 0:
        return mean
    var = math.fsum((r - mean) ** 2 for r in residuals) / len(residuals)
    return mean + alpha * math.sqrt(var)


def compute_history_window(actual: WorkloadTrace) -> float:
    """Mean inter-arrival time of the pooled trace."""
    if len(actual) < 2:
        raise EmptyProfile("history window needs at least two requests")
    ts = actual.times()
    return (ts[-1] - ts[0]) / (len(ts) - 1)


# -- serialisation -----------------------------------------------------------

TRACE_CSV_HEADER = ("app_id", "time_ms", "label", "link_id")


def pair_to_csv(pair: WorkloadPair) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_CSV_HEADER)
    for trace in (pair.actual, pair.predicted):
        for req, link in zip(trace.requests, trace.links):
            w.writerow((req.app_id, repr(req.time_ms), trace.label, "" if link is None else link))
    return buf.getvalue()


def pair_from_csv(text: str, target_deviation: float = 0.0, measured_kl_nats: float | None = None) -> WorkloadPair:
    rows = {ACTUAL: [], PREDICTED: []}
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != TRACE_CSV_HEADER:
        raise ValueError(f"unexpected trace header {reader.fieldnames}")
    for row in reader:
        link = int(row["link_id"]) if row["link_id"] else None
        rows[row["label"]].append((InferenceRequest(row["app_id"], float(row["time_ms"])), link))
    traces = {
        label: WorkloadTrace(tuple(r for r, _ in items), label, tuple(k for _, k in items))
        for label, items in rows.items()
    }
    kl = interarrival_kl(traces[ACTUAL], traces[PREDICTED]) if measured_kl_nats is None else measured_kl_nats
    return WorkloadPair(traces[ACTUAL], traces[PREDICTED], target_deviation, kl)


def pair_to_dict(pair: WorkloadPair) -> dict:
    def trace(t: WorkloadTrace):
        return [
            {"app_id": r.app_id, "time_ms": r.time_ms, "link_id": k}
            for r, k in zip(t.requests, t.links)
        ]

    return {
        "target_deviation": pair.target_deviation,
        "measured_kl_nats": pair.measured_kl_nats,
        "actual": trace(pair.actual),
        "predicted": trace(pair.predicted),
    }


def pair_from_dict(d: dict) -> WorkloadPair:
    def trace(items, label):
        return WorkloadTrace(
            tuple(InferenceRequest(str(x["app_id"]), float(x["time_ms"])) for x in items),
            label,
            tuple(x.get("link_id") for x in items),
        )

    return WorkloadPair(
        trace(d["actual"], ACTUAL),
        trace(d["predicted"], PREDICTED),
        float(d["target_deviation"]),
        float(d["measured_kl_nats"]),
    )
