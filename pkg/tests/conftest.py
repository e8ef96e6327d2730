from __future__ import annotations

import pytest

from rlcompress.bundled import bundled_dataset, load_bundled_model
from rlcompress.sensitivity import SensitivityConfig, run_analysis


@pytest.fixture(scope="session")
def tinyresnet():
    """The bundled trained model; tests must not mutate it (use ``.copy()``)."""
    return load_bundled_model()


@pytest.fixture(scope="session")
def dataset():
    return bundled_dataset()


@pytest.fixture(scope="session")
def sens_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("sensitivity")


@pytest.fixture(scope="session")
def sens_table(tinyresnet, dataset, sens_cache):
    return run_analysis(tinyresnet, dataset.train.x, SensitivityConfig(), cache_dir=sens_cache,
                        data_hash=dataset.content_hash())


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
