from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from mpf.core import FeatureHistogram

FIXTURE_DIR = Path(str(resources.files("mpf").joinpath("data/fixture")))
GOLDEN_DIR = Path(__file__).parent / "golden"


def hist(*masses, edges=None):
    masses = np.asarray(masses, dtype=float)
    if edges is None:
        edges = np.linspace(0.0, 1.0, masses.size + 1)
    return FeatureHistogram(edges, masses)


@pytest.fixture
def fixture_dir():
    return FIXTURE_DIR


@pytest.fixture
def fixture_manifest():
    return FIXTURE_DIR / "manifest.json"


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            name = rep.nodeid.split("::")[-1][len("test_criterion_"):]
            number, _, label = name.partition("_")
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((int(number), f"criterion {number} {label.replace('_', ' ')}: {outcome.upper()[:4]} {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
