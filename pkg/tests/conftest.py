import pytest

from ecosim.harness import Scenario, load_scenario


def shrink(name: str, **overrides) -> Scenario:
    """A built-in scenario cut down to a few users and steps for quick runs."""
    d = load_scenario(name).to_dict()
    d["config"].update(num_users=5, horizon=4, initial_docs_per_provider=3, **overrides)
    return Scenario.from_dict(d)


@pytest.fixture
def tiny_slope():
    return shrink("subgroup_slope")


# one PASS/FAIL line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
