"""Domain types shared by the workload generator, policies, engine and metrics.

All times are milliseconds and all sizes are megabytes.  Every type except
:class:`MemoryState` is an immutable value.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from typing import Mapping

AppId = str


class ModelSwapError(Exception):
    """Base class for errors raised by this package."""


class InvalidScenario(ModelSwapError):
    pass


class UnknownApplication(ModelSwapError, KeyError):
    pass


class Policy(str, enum.Enum):
    """Model management policy, selected by its CLI/config name."""

    NONE = "none"
    LFE = "lfe"
    BFE = "bfe"
    WSBFE = "ws-bfe"
    IWSBFE = "iws-bfe"

    @classmethod
    def parse(cls, name: "str | Policy") -> "Policy":
        if isinstance(name, Policy):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            names = ", ".join(p.value for p in cls)
            raise InvalidScenario(f"unknown policy {name!r} (expected one of: {names})") from None

    @property
    def replaces(self) -> bool:
        """True for the warm-start-aware policies that keep a low-precision copy."""
        return self in (Policy.WSBFE, Policy.IWSBFE)


EVICTION_POLICIES = (Policy.LFE, Policy.BFE, Policy.WSBFE, Policy.IWSBFE)


@dataclass(frozen=True)
class ModelVariant:
    app_id: AppId
    precision_label: str
    size_mb: float
    accuracy_pct: float
    load_time_ms: float
    inference_time_ms: float

    def __post_init__(self):
        bad = []
        if not self.size_mb > 0:
            bad.append(f"size_mb={self.size_mb}")
        if not 0 < self.accuracy_pct <= 100:
            bad.append(f"accuracy_pct={self.accuracy_pct}")
        if not self.load_time_ms > 0:
            bad.append(f"load_time_ms={self.load_time_ms}")
        if not self.inference_time_ms > 0:
            bad.append(f"inference_time_ms={self.inference_time_ms}")
        if bad:
            raise InvalidScenario(
                f"variant {self.app_id}/{self.precision_label}: " + ", ".join(bad) + " out of range"
            )


@dataclass(frozen=True)
class ApplicationSpec:
    """An application and its model zoo, largest (highest precision) first."""

    app_id: AppId
    name: str
    zoo: tuple[ModelVariant, ...]

    def __post_init__(self):
        object.__setattr__(self, "zoo", tuple(self.zoo))
        if not self.zoo:
            raise InvalidScenario(f"application {self.app_id}: empty model zoo")
        for v in self.zoo:
            if v.app_id != self.app_id:
                raise InvalidScenario(
                    f"application {self.app_id}: variant {v.precision_label} belongs to {v.app_id}"
                )
        for hi, lo in zip(self.zoo, self.zoo[1:]):
            if not hi.size_mb > lo.size_mb:
                raise InvalidScenario(
                    f"application {self.app_id}: zoo not strictly decreasing in size at "
                    f"{hi.precision_label} ({hi.size_mb}) -> {lo.precision_label} ({lo.size_mb})"
                )
            if hi.accuracy_pct < lo.accuracy_pct:
                raise InvalidScenario(
                    f"application {self.app_id}: accuracy increases as size decreases at "
                    f"{hi.precision_label} ({hi.accuracy_pct}) -> {lo.precision_label} ({lo.accuracy_pct})"
                )

    @property
    def highest(self) -> ModelVariant:
        return self.zoo[0]

    @property
    def lowest(self) -> ModelVariant:
        return self.zoo[-1]

    def index_of(self, variant: ModelVariant) -> int:
        return self.zoo.index(variant)


@dataclass(frozen=True)
class InferenceRequest:
    app_id: AppId
    time_ms: float

    def __post_init__(self):
        if not (math.isfinite(self.time_ms) and self.time_ms >= 0):
            raise ValueError(f"request time must be finite and non-negative, got {self.time_ms}")


@dataclass(frozen=True)
class RequestWindow:
    """Interval during which a predicted request keeps its app in the maximalist set.

    The model is loaded at ``predicted - delta - load_lead`` (clamped at 0) and
    protected until ``predicted + delta``.
    """

    app_id: AppId
    predicted_time_ms: float
    delta_ms: float
    load_lead_ms: float

    def __post_init__(self):
        if self.delta_ms < 0 or self.load_lead_ms < 0:
            raise ValueError("window delta and load lead must be non-negative")

    @property
    def open_ms(self) -> float:
        return max(0.0, self.predicted_time_ms - self.delta_ms - self.load_lead_ms)

    @property
    def close_ms(self) -> float:
        return self.predicted_time_ms + self.delta_ms

    def contains(self, t: float) -> bool:
        return self.open_ms <= t < self.close_ms


class OutcomeKind(str, enum.Enum):
    WARM = "WarmStart"
    COLD = "ColdStart"
    FAILURE = "Failure"


@dataclass(frozen=True)
class RequestOutcome:
    request: InferenceRequest
    kind: OutcomeKind
    served_variant: ModelVariant | None
    latency_ms: float
    accuracy_pct: float | None

    def __post_init__(self):
        if self.kind is OutcomeKind.FAILURE:
            if self.served_variant is not None or self.accuracy_pct is not None:
                raise ValueError("a failed request has no served variant or accuracy")
        elif self.served_variant is None:
            raise ValueError(f"{self.kind.value} outcome needs a served variant")
        elif self.kind is OutcomeKind.WARM and self.latency_ms != self.served_variant.inference_time_ms:
            raise ValueError("warm-start latency must equal the inference time")
        elif self.kind is OutcomeKind.COLD:
            # an in-flight load is charged only its remaining time
            v = self.served_variant
            if not v.inference_time_ms <= self.latency_ms <= v.load_time_ms + v.inference_time_ms + 1e-9:
                raise ValueError("cold-start latency must lie within [inference, load + inference]")


class MemoryState:
    """Loaded variants (at most one per app) under a fixed budget.

    Mutated only by the engine.  ``version`` increments on every change so
    plans can detect that they were computed against a stale snapshot.
    """

    def __init__(self, budget_mb: float, loaded: Mapping[AppId, ModelVariant] | None = None):
        if not budget_mb > 0:
            raise ValueError("memory budget must be positive")
        self.budget_mb = float(budget_mb)
        self.loaded: dict[AppId, ModelVariant] = {}
        self.version = 0
        self._used = 0.0
        for v in (loaded or {}).values():
            self.put(v)

    @property
    def used_mb(self) -> float:
        return self._used

    @property
    def free_mb(self) -> float:
        return self.budget_mb - self._used

    def get(self, app_id: AppId) -> ModelVariant | None:
        return self.loaded.get(app_id)

    def put(self, variant: ModelVariant) -> None:
        old = self.loaded.get(variant.app_id)
        used = self._used - (old.size_mb if old else 0.0) + variant.size_mb
        if used > self.budget_mb + 1e-9:
            raise MemoryError(
                f"loading {variant.app_id}/{variant.precision_label} would use {used:.3f} MB "
                f"of a {self.budget_mb:.3f} MB budget"
            )
        self.loaded[variant.app_id] = variant
        self._recompute()

    def remove(self, app_id: AppId) -> ModelVariant | None:
        old = self.loaded.pop(app_id, None)
        if old is not None:
            self._recompute()
        return old

    def _recompute(self):
        # summed from scratch so the value does not drift with add/subtract order
        self._used = math.fsum(sorted(v.size_mb for v in self.loaded.values()))
        self.version += 1

    def snapshot(self) -> dict[AppId, ModelVariant]:
        return dict(self.loaded)

    def __repr__(self):
        return f"MemoryState(budget_mb={self.budget_mb}, used_mb={self._used:.3f}, loaded={sorted(self.loaded)})"


@dataclass(frozen=True)
class ScenarioConfig:
    applications: tuple[ApplicationSpec, ...]
    memory_budget_mb: float = 1024.0
    policy: Policy = Policy.IWSBFE
    deviation: float = 0.3
    mean_concurrency: float = 3.0
    horizon_ms: float = 3_600_000.0
    requests_per_app: int = 100
    alpha: float = 0.0
    seed: int = 0
    phantom_predictions: bool = False

    def __post_init__(self):
        object.__setattr__(self, "applications", tuple(self.applications))
        object.__setattr__(self, "policy", Policy.parse(self.policy))

    @property
    def zoo_index(self) -> dict[AppId, ApplicationSpec]:
        return {a.app_id: a for a in self.applications}

    @property
    def app_ids(self) -> list[AppId]:
        return sorted(a.app_id for a in self.applications)

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


def validate_scenario(cfg: ScenarioConfig) -> ScenarioConfig:
    """Check every scenario invariant and return the config with zoos sorted by size."""
    if not cfg.applications:
        raise InvalidScenario("scenario has no applications")
    apps = []
    seen = set()
    for app in cfg.applications:
        if app.app_id in seen:
            raise InvalidScenario(f"duplicate application id {app.app_id!r}")
        seen.add(app.app_id)
        zoo = tuple(sorted(app.zoo, key=lambda v: -v.size_mb))
        if zoo != app.zoo:
            app = ApplicationSpec(app.app_id, app.name, zoo)
        apps.append(app)
    if not (math.isfinite(cfg.memory_budget_mb) and cfg.memory_budget_mb > 0):
        raise InvalidScenario(f"memory_budget_mb must be positive, got {cfg.memory_budget_mb}")
    for app in apps:
        if app.lowest.size_mb > cfg.memory_budget_mb:
            raise InvalidScenario(
                f"application {app.app_id}: smallest variant {app.lowest.precision_label} "
                f"({app.lowest.size_mb} MB) exceeds memory budget {cfg.memory_budget_mb} MB"
            )
    if not 0 <= cfg.deviation <= 1:
        raise InvalidScenario(f"deviation must be in [0, 1], got {cfg.deviation}")
    if not cfg.mean_concurrency > 0:
        raise InvalidScenario(f"mean_concurrency must be positive, got {cfg.mean_concurrency}")
    if not cfg.horizon_ms > 0:
        raise InvalidScenario(f"horizon_ms must be positive, got {cfg.horizon_ms}")
    if isinstance(cfg.requests_per_app, bool) or not isinstance(cfg.requests_per_app, int) or cfg.requests_per_app < 1:
        raise InvalidScenario(f"requests_per_app must be a positive integer, got {cfg.requests_per_app!r}")
    if not 0 <= cfg.alpha <= 2:
        raise InvalidScenario(f"alpha must be in [0, 2], got {cfg.alpha}")
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2**64:
        raise InvalidScenario(f"seed must be a 64-bit unsigned integer, got {cfg.seed!r}")
    return replace(cfg, applications=tuple(apps))


@dataclass(frozen=True)
class WarmCandidate:
    variant: ModelVariant


@dataclass(frozen=True)
class ColdCandidate:
    pass


def classify(
    request: InferenceRequest,
    memory: MemoryState | Mapping[AppId, ModelVariant],
    zoo_index: Mapping[AppId, ApplicationSpec],
) -> WarmCandidate | ColdCandidate:
    """Cold-start predicate: cold iff no variant of the app's zoo is loaded."""
    app = zoo_index.get(request.app_id)
    if app is None:
        raise UnknownApplication(request.app_id)
    loaded = memory.loaded if isinstance(memory, MemoryState) else memory
    variant = loaded.get(request.app_id)
    if variant is not None and variant in app.zoo:
        return WarmCandidate(variant)
    return ColdCandidate()


# -- JSON ------------------------------------------------------------------

def _variant_to_dict(v: ModelVariant) -> dict:
    return {
        "app_id": v.app_id,
        "precision_label": v.precision_label,
        "size_mb": v.size_mb,
        "accuracy_pct": v.accuracy_pct,
        "load_time_ms": v.load_time_ms,
        "inference_time_ms": v.inference_time_ms,
    }


def variant_from_dict(d: Mapping, app_id: AppId | None = None) -> ModelVariant:
    return ModelVariant(
        app_id=str(d.get("app_id", app_id)),
        precision_label=str(d["precision_label"]),
        size_mb=float(d["size_mb"]),
        accuracy_pct=float(d["accuracy_pct"]),
        load_time_ms=float(d["load_time_ms"]),
        inference_time_ms=float(d["inference_time_ms"]),
    )


def config_to_dict(cfg: ScenarioConfig) -> dict:
    return {
        "applications": [
            {"app_id": a.app_id, "name": a.name, "zoo": [_variant_to_dict(v) for v in a.zoo]}
            for a in cfg.applications
        ],
        "memory_budget_mb": cfg.memory_budget_mb,
        "policy": cfg.policy.value,
        "deviation": cfg.deviation,
        "mean_concurrency": cfg.mean_concurrency,
        "horizon_ms": cfg.horizon_ms,
        "requests_per_app": cfg.requests_per_app,
        "alpha": cfg.alpha,
        "seed": cfg.seed,
        "phantom_predictions": cfg.phantom_predictions,
    }


_SCALAR_FIELDS = {
    "memory_budget_mb": float,
    "policy": Policy.parse,
    "deviation": float,
    "mean_concurrency": float,
    "horizon_ms": float,
    "requests_per_app": int,
    "alpha": float,
    "seed": int,
    "phantom_predictions": bool,
}


def config_from_dict(d: Mapping, base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Build a config from a JSON object; missing fields fall back to ``base``."""
    unknown = set(d) - set(_SCALAR_FIELDS) - {"applications", "workload"}
    if unknown:
        raise InvalidScenario(f"unknown field(s): {', '.join(sorted(unknown))}")
    changes = {}
    for name, conv in _SCALAR_FIELDS.items():
        if name not in d:
            continue
        value = d[name]
        if name in ("requests_per_app", "seed") and not (isinstance(value, int) and not isinstance(value, bool)):
            raise InvalidScenario(f"field {name!r}: expected an integer, got {value!r}")
        if name == "phantom_predictions" and not isinstance(value, bool):
            raise InvalidScenario(f"field {name!r}: expected true/false, got {value!r}")
        try:
            changes[name] = conv(value)
        except (TypeError, ValueError) as exc:
            raise InvalidScenario(f"field {name!r}: {exc}") from None
    if "applications" in d:
        try:
            apps = []
            for i, a in enumerate(d["applications"]):
                app_id = str(a["app_id"])
                zoo = tuple(variant_from_dict(v, app_id) for v in a["zoo"])
                apps.append(ApplicationSpec(app_id, str(a.get("name", app_id)), zoo))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScenario(f"field 'applications[{i}]': {exc!r}") from None
        changes["applications"] = tuple(apps)
    if base is None:
        if "applications" not in changes:
            raise InvalidScenario("field 'applications' is required")
        return ScenarioConfig(**changes)
    return replace(base, **changes)


def dump_config(cfg: ScenarioConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=False) + "\n"


def config_sha256(cfg: ScenarioConfig) -> str:
    """Content hash of the resolved config (canonical JSON)."""
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def load_config(text: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    return config_from_dict(json.loads(text), base=base)


def default_scenario() -> ScenarioConfig:
    """The bundled five-application scenario (1024 MB budget)."""
    text = resources.files("modelswap").joinpath("data/table1.json").read_text(encoding="utf-8")
    return load_config(text)


def unbounded_budget(cfg: ScenarioConfig) -> float:
    """Budget that holds every application's largest variant at once."""
    return math.fsum(a.highest.size_mb for a in cfg.applications)
