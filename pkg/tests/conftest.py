import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def text64():
    from deblur_lab.synthetic import text_scene
    return text_scene(64, seed=7)


@pytest.fixture(scope="session")
def fixture_images():
    """Twenty small text-like images shared by the classical solver tests."""
    from deblur_lab.synthetic import text_scene
    return [text_scene(48, seed=500 + i) for i in range(20)]


ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
