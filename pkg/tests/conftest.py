import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bubbleflow.segment import Detection

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# Filled in by tests/test_acceptance.py, printed after the run.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


def disk(shape, center, radius):
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


def ellipse_mask(shape, center, a, b, theta):
    """Pixel centres inside an ellipse; ``theta`` from +x with y pointing up."""
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    dx = cc - center[1]
    dy = -(rr - center[0])
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def det(fi=0, x=0.0, y=0.0, a=1.0, b=1.0, theta=0.0, area=None, quality="ok", fps=100.0):
    return Detection(fi, fi / fps, x, y, a, b, theta, math.pi * a * b if area is None else area, quality)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
