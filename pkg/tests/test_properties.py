import itertools
import math

from hypothesis import given, settings, strategies as st

from modelswap.audit import audit
from modelswap.core import OutcomeKind, Policy, ScenarioConfig, validate_scenario
from modelswap.engine import run
from modelswap.metrics import (
    cold_start_pct,
    coefficient_of_variation,
    dominates,
    failure_pct,
    mean_ci,
    pareto_front,
    satisfaction_rate,
)
from modelswap.workload import compute_delta, generate_pair, kl_divergence

from conftest import make_app

finite = st.floats(min_value=0.0, max_value=100.0, allow_nan=False)


@st.composite
def distributions(draw, k=None):
    k = k or draw(st.integers(2, 12))
    w = draw(st.lists(st.floats(0.01, 10.0), min_size=k, max_size=k))
    s = math.fsum(w)
    return [x / s for x in w]


@given(st.integers(2, 12).flatmap(lambda k: st.tuples(distributions(k), distributions(k))))
def test_kl_is_non_negative(pq):
    p, q = pq
    assert kl_divergence(p, q) >= -1e-15


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30))
def test_pareto_front_is_mutually_non_dominated_and_covers(points):
    front = pareto_front(points)
    assert front
    for a, b in itertools.permutations(front, 2):
        assert not dominates(a, b)
    for p in points:
        assert p in front or any(dominates(f, p) for f in front)


@given(st.lists(finite, min_size=2, max_size=20))
def test_confidence_interval_contains_mean(values):
    ci = mean_ci(values)
    assert ci.low <= ci.mean + 1e-9 and ci.mean <= ci.high + 1e-9
    assert min(values) - 1e-9 <= ci.mean <= max(values) + 1e-9


@given(st.lists(st.floats(0.1, 100.0), min_size=1, max_size=10))
def test_cv_is_scale_invariant(values):
    a = coefficient_of_variation(values)
    b = coefficient_of_variation([3.0 * v for v in values])
    assert a >= 0 and math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-12)


@given(st.lists(st.floats(0.0, 1e4), min_size=1, max_size=50), st.floats(0.0, 2.0))
def test_delta_grows_with_alpha(residuals, alpha):
    assert compute_delta(residuals, alpha) >= compute_delta(residuals, 0.0) - 1e-9


@st.composite
def scenarios(draw):
    n = draw(st.integers(1, 4))
    apps = []
    for k in range(n):
        levels = draw(st.integers(1, 3))
        top = draw(st.floats(50.0, 400.0))
        sizes = [top / (1.6 ** j) for j in range(levels)]
        apps.append(make_app(f"app{k}", sizes))
    smallest = max(a.lowest.size_mb for a in apps)
    budget = draw(st.floats(smallest, sum(a.highest.size_mb for a in apps) * 1.2))
    return validate_scenario(ScenarioConfig(
        tuple(apps),
        memory_budget_mb=budget,
        deviation=draw(st.sampled_from([0.0, 0.2, 0.5, 0.9])),
        mean_concurrency=draw(st.floats(0.5, 4.0)),
        alpha=draw(st.sampled_from([0.0, 1.0])),
        requests_per_app=draw(st.integers(1, 25)),
        policy=draw(st.sampled_from(list(Policy))),
        seed=draw(st.integers(0, 2**32)),
    ))


@settings(max_examples=60, deadline=None)
@given(scenarios())
def test_engine_invariants_on_random_scenarios(cfg):
    pair = generate_pair(cfg, cfg.seed)
    log = run(cfg, pair)
    assert len(log.outcomes) == len(pair.actual)
    assert all(used <= cfg.memory_budget_mb + 1e-6 for _, used in log.memory_timeline)
    result = audit(log, len(pair.actual))
    assert result.ok, result.violations[:3]
    total = satisfaction_rate(log) + cold_start_pct(log) + failure_pct(log)
    assert math.isclose(total, 100.0, abs_tol=1e-9)
    for o in log.outcomes:
        if o.kind is OutcomeKind.FAILURE:
            assert o.served_variant is None
        else:
            assert o.latency_ms >= o.served_variant.inference_time_ms
