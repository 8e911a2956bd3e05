import json
import math

import pytest

from modelswap.core import (
    ApplicationSpec,
    ColdCandidate,
    InferenceRequest,
    InvalidScenario,
    MemoryState,
    ModelVariant,
    OutcomeKind,
    Policy,
    RequestOutcome,
    RequestWindow,
    ScenarioConfig,
    UnknownApplication,
    WarmCandidate,
    classify,
    config_from_dict,
    config_sha256,
    default_scenario,
    dump_config,
    load_config,
    unbounded_budget,
    validate_scenario,
)

from conftest import make_app


def test_table1_scenario_contents(table1):
    zoo = table1.zoo_index
    assert sorted(zoo) == [
        "face_recognition", "image_classification", "sentence_prediction",
        "speech_recognition", "text_classification",
    ]
    face = zoo["face_recognition"]
    assert [v.size_mb for v in face.zoo] == [535.1, 378.8, 144.2]
    assert [v.accuracy_pct for v in face.zoo] == [90.2, 82.5, 71.8]
    assert zoo["speech_recognition"].lowest.size_mb == 78.4
    assert zoo["text_classification"].highest.size_mb == 499.0
    assert table1.memory_budget_mb == 1024.0
    assert table1.policy is Policy.IWSBFE


def test_table1_load_times_scale_with_size(table1):
    for app in table1.applications:
        for v in app.zoo:
            assert v.load_time_ms == pytest.approx(v.size_mb * 820 / 528, abs=0.05)
            assert v.inference_time_ms == pytest.approx(v.load_time_ms / 12.5, abs=0.05)


def test_unbounded_budget_is_sum_of_top_variants(table1):
    assert unbounded_budget(table1) == pytest.approx(535.1 + 346.4 + 285.2 + 471.3 + 499.0)


@pytest.mark.parametrize("field,value", [
    ("size_mb", 0.0), ("accuracy_pct", 101.0), ("accuracy_pct", 0.0), ("load_time_ms", -1.0), ("inference_time_ms", 0.0),
])
def test_variant_rejects_out_of_range(field, value):
    kw = dict(app_id="a", precision_label="FP32", size_mb=10.0, accuracy_pct=90.0, load_time_ms=5.0, inference_time_ms=1.0)
    kw[field] = value
    with pytest.raises(InvalidScenario):
        ModelVariant(**kw)


def test_application_zoo_ordering_enforced():
    with pytest.raises(InvalidScenario, match="strictly decreasing"):
        make_app("a", [100, 100])
    with pytest.raises(InvalidScenario, match="accuracy increases"):
        make_app("a", [100, 50], accs=[80, 85])
    with pytest.raises(InvalidScenario, match="empty"):
        ApplicationSpec("a", "a", ())


def test_validate_sorts_zoo_and_rejects_oversized_lowest():
    app = make_app("a", [300, 200, 100])
    shuffled = ApplicationSpec("a", "a", app.zoo)  # already valid
    cfg = validate_scenario(ScenarioConfig((shuffled,), memory_budget_mb=150))
    assert cfg.applications[0].zoo == app.zoo
    with pytest.raises(InvalidScenario, match="exceeds memory budget"):
        validate_scenario(ScenarioConfig((app,), memory_budget_mb=99))


@pytest.mark.parametrize("changes", [
    {"deviation": 1.5}, {"deviation": -0.1}, {"mean_concurrency": 0.0}, {"horizon_ms": 0.0},
    {"requests_per_app": 0}, {"alpha": 2.5}, {"seed": -1}, {"seed": 2**64}, {"memory_budget_mb": math.inf},
])
def test_validate_rejects_bad_scalars(table1, changes):
    with pytest.raises(InvalidScenario):
        validate_scenario(table1.with_(**changes))


def test_validate_rejects_duplicate_ids():
    app = make_app("a", [100])
    with pytest.raises(InvalidScenario, match="duplicate"):
        validate_scenario(ScenarioConfig((app, app)))


def test_request_window_geometry():
    w = RequestWindow("a", 1000.0, 50.0, 200.0)
    assert (w.open_ms, w.close_ms) == (750.0, 1050.0)
    assert w.contains(750.0) and not w.contains(1050.0)
    early = RequestWindow("a", 100.0, 50.0, 200.0)
    assert early.open_ms == 0.0  # clamped
    point = RequestWindow("a", 10.0, 0.0, 0.0)
    assert (point.open_ms, point.close_ms) == (10.0, 10.0)


def test_memory_state_budget_and_version():
    app = make_app("a", [300, 100])
    other = make_app("b", [500])
    mem = MemoryState(600)
    mem.put(app.zoo[0])
    v0 = mem.version
    mem.put(app.zoo[1])  # replaces in place
    assert mem.used_mb == 100 and mem.version == v0 + 1
    mem.put(other.zoo[0])
    assert mem.free_mb == 0
    with pytest.raises(MemoryError):
        mem.put(app.zoo[0])
    assert mem.get("a") is app.zoo[1]
    mem.remove("b")
    assert mem.used_mb == 100
    assert mem.remove("missing") is None


def test_classify_cold_start_predicate():
    app = make_app("a", [300, 100])
    zoo = {"a": app}
    mem = MemoryState(1000)
    assert isinstance(classify(InferenceRequest("a", 0.0), mem, zoo), ColdCandidate)
    mem.put(app.lowest)
    got = classify(InferenceRequest("a", 0.0), mem, zoo)
    assert got == WarmCandidate(app.lowest)
    with pytest.raises(UnknownApplication):
        classify(InferenceRequest("zzz", 0.0), mem, zoo)


def test_request_outcome_invariants():
    v = make_app("a", [100]).highest
    req = InferenceRequest("a", 1.0)
    RequestOutcome(req, OutcomeKind.WARM, v, v.inference_time_ms, v.accuracy_pct)
    RequestOutcome(req, OutcomeKind.COLD, v, v.load_time_ms + v.inference_time_ms, v.accuracy_pct)
    with pytest.raises(ValueError):
        RequestOutcome(req, OutcomeKind.WARM, v, v.load_time_ms, v.accuracy_pct)
    with pytest.raises(ValueError):
        RequestOutcome(req, OutcomeKind.FAILURE, v, 0.0, None)
    with pytest.raises(ValueError):
        InferenceRequest("a", -1.0)


def test_policy_parse():
    assert Policy.parse("IWS-BFE") is Policy.IWSBFE
    assert Policy.parse(Policy.LFE) is Policy.LFE
    with pytest.raises(InvalidScenario, match="unknown policy"):
        Policy.parse("lru")
    assert Policy.WSBFE.replaces and not Policy.BFE.replaces


def test_config_json_round_trip(table1):
    cfg = table1.with_(policy=Policy.BFE, seed=7, deviation=0.5)
    again = load_config(dump_config(cfg))
    assert again == cfg
    assert config_sha256(again) == config_sha256(cfg)
    assert config_sha256(cfg.with_(seed=8)) != config_sha256(cfg)


def test_config_partial_overrides_and_errors(table1):
    cfg = config_from_dict({"policy": "lfe", "memory_budget_mb": 2048}, base=table1)
    assert cfg.policy is Policy.LFE and cfg.memory_budget_mb == 2048.0
    assert cfg.applications == table1.applications
    with pytest.raises(InvalidScenario, match="unknown field"):
        config_from_dict({"budget": 1}, base=table1)
    with pytest.raises(InvalidScenario, match="integer"):
        config_from_dict({"seed": 1.5}, base=table1)
    with pytest.raises(InvalidScenario, match="applications"):
        config_from_dict({"seed": 1})


def test_bundled_scenario_is_valid_json():
    text = dump_config(default_scenario())
    data = json.loads(text)
    assert len(data["applications"]) == 5
