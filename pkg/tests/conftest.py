import functools

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def _corpus():
    from reactsim.synthetic import conflict_corpus

    return conflict_corpus(20, seed=0)


@pytest.fixture(scope="session")
def corpus():
    return _corpus()


@pytest.fixture(scope="session")
def cut_in():
    from reactsim.synthetic import cut_in_scenario

    return cut_in_scenario()


@pytest.fixture(scope="session")
def left_turn():
    from reactsim.synthetic import left_turn_scenario

    return left_turn_scenario()


# --- acceptance summary ----------------------------------------------------------------------------

_acceptance_lines: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    """Store one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number: int, ok: bool, detail: str):
        _acceptance_lines[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_acceptance_lines):
            terminalreporter.write_line(_acceptance_lines[k])
