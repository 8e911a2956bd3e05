import pytest

from modelswap.core import ApplicationSpec, MemoryState, ModelVariant, default_scenario, validate_scenario
from modelswap.policies import PolicyContext


def make_app(app_id, sizes, accs=None, ms_per_mb=1.5):
    labels = ["FP32", "FP16", "INT8", "INT4", "INT2"]
    accs = accs or [90.0 - 5 * k for k in range(len(sizes))]
    zoo = tuple(
        ModelVariant(app_id, labels[k], float(s), float(a), s * ms_per_mb, s * ms_per_mb / 12.5)
        for k, (s, a) in enumerate(zip(sizes, accs))
    )
    return ApplicationSpec(app_id, app_id, zoo)


def make_ctx(apps, budget, loaded, requester, now=0.0, windows=(), history=(), delta=0.0, h=0.0, pinned=()):
    """``loaded`` maps app_id -> zoo index."""
    zoo = {a.app_id: a for a in apps}
    mem = MemoryState(budget)
    for app_id, k in loaded.items():
        mem.put(zoo[app_id].zoo[k])
    return PolicyContext(
        now_ms=now,
        requester=requester,
        memory=mem,
        windows=list(windows),
        history=list(history),
        delta_ms=delta,
        history_window_ms=h,
        zoo_index=zoo,
        pinned=frozenset(pinned),
    )


@pytest.fixture(scope="session")
def table1():
    return validate_scenario(default_scenario())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
