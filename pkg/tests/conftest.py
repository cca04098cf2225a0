import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from robustlab.data import gen_shape_images
from robustlab.models import init_classifier

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance results, printed in the terminal summary
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, msg = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {msg}")


@pytest.fixture
def tiny_shapes():
    return gen_shape_images(8, 3, 120, seed=0, contrast=(0.6, 1.0))


@pytest.fixture
def mlp():
    return init_classifier({"kind": "mlp", "hidden": [8]}, 5, 3, seed=0)
