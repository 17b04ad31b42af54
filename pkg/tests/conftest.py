import logging

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _quiet_search_space_warnings():
    # tiny test models sit outside the tuning ranges on purpose
    logging.getLogger("motionid.encoder").setLevel(logging.ERROR)
    yield
    logging.getLogger("motionid.encoder").setLevel(logging.NOTSET)


@pytest.fixture
def record_criterion():
    def record(number, passed: bool | None, detail: str) -> None:
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"ACCEPTANCE {number}: {status} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
