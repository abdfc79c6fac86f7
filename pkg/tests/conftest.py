import pytest
from hypothesis import settings

from osmhedge.market_models import ModelSpec

settings.register_profile("ci", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("ci")


@pytest.fixture
def bs1():
    return ModelSpec.black_scholes(0.0, 0.25, 0.0, [100.0])


@pytest.fixture
def heston_a():
    return ModelSpec.heston(0.1, 0.1, 5.0, 0.16, 0.1, 0.9, [10.0, 0.0625], strict_feller=True)


@pytest.fixture
def bs3():
    return ModelSpec.black_scholes([0.05, 0.03, 0.0], [0.2, 0.3, 0.25], 0.01, [100.0, 90.0, 110.0],
                                   q=[0.0, 0.02, 0.01], corr=0.4)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(k: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[k] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
