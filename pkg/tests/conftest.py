import numpy as np
import pytest
from hypothesis import settings

from oldroyd_bl import StripGrid

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_grid():
    return StripGrid(32, 96, Ly=8.0, stretch=1.02)



# acceptance results: criterion -> [(label, passed, detail, seconds)]
ACCEPTANCE: dict[int, list] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[c]
        ok = all(p for _, p, _, _ in parts)
        secs = sum(t for _, _, _, t in parts)
        detail = "; ".join(f"{lbl} {d} {'ok' if p else 'MISS'}" for lbl, p, d, _ in parts)
        terminalreporter.write_line(f"criterion {c}: {'PASS' if ok else 'FAIL'}  "
                                    f"({secs:.1f} s)  {detail}")
