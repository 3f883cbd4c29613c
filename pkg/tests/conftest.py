import pytest

from crossdistill.domaingen import DomainSpec, make_ground_truth


@pytest.fixture(autouse=True)
def fixed_clock(monkeypatch):
    # Provenance timestamps come from here, which keeps outputs byte-stable.
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


@pytest.fixture
def small_spec():
    return DomainSpec(feature_count=8, source_count=3000, target_count=400, seed=3)


@pytest.fixture
def small_truth(small_spec):
    return make_ground_truth(small_spec)


_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def acceptance_line(request):
    """Record one PASS/FAIL line; all lines are printed at the end of the run."""
    lines = request.config.stash[_LINES]

    def record(criterion, ok, detail):
        lines.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")
        print(lines[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
