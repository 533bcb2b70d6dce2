from pathlib import Path

import pytest

from implicit_saliency.dataset import generate_synsal_v1
from implicit_saliency.model import load_bundled_model

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def golden_dir():
    return GOLDEN


@pytest.fixture(scope="session")
def synsal(tmp_path_factory):
    """SynSal-v1 regenerated from its seed: ``(train_manifest, eval_manifest)``."""
    return generate_synsal_v1(tmp_path_factory.mktemp("synsal_v1"))


@pytest.fixture(scope="session")
def bundled_model():
    return load_bundled_model()


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_line():
    """Record one PASS/FAIL line per acceptance criterion (echoed in the summary)."""

    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
