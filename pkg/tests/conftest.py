import random

import pytest

from jeeva import fixtures, pipeline
from jeeva.core import ALPHABET, validate_sequence

WINDOW = 15

_ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _ACCEPTANCE_RESULTS[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for nodeid in sorted(_ACCEPTANCE_RESULTS):
        outcome = _ACCEPTANCE_RESULTS[nodeid]
        name = nodeid.split("::")[-1]
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"  {mark}  {name}")


@pytest.fixture(scope="session")
def tables():
    return [fixtures.synthetic_property_table()]


@pytest.fixture(scope="session")
def tables_text(tables):
    return pipeline.dump_property_table(tables[0])


@pytest.fixture(scope="session")
def random_models(tables):
    return fixtures.random_models(window=WINDOW, tables=tables, seed=3)


@pytest.fixture(scope="session")
def separable_models(tables):
    return fixtures.separable_models(window=WINDOW, tables=tables)


def random_sequence(rng: random.Random, length: int, seq_id: str = ""):
    return validate_sequence("".join(rng.choice(ALPHABET) for _ in range(length)),
                             seq_id=seq_id)
