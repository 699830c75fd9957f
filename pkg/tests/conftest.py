import numpy as np
import pytest

from qgcn.skeleton import BUNDLED, bundled_topology


@pytest.fixture(scope="session")
def h36m():
    return bundled_topology("h36m17")


@pytest.fixture(scope="session", params=BUNDLED)
def any_topology(request):
    return bundled_topology(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_unit_quats(rng, shape):
    q = rng.normal(size=tuple(shape) + (4,))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
