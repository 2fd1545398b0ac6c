import numpy as np
import pytest
from hypothesis import settings

from promptseg.synthetic import make_scene

# one shared CPU makes wall-clock deadlines meaningless; keep runs reproducible instead
settings.register_profile("promptseg", deadline=None, derandomize=True)
settings.load_profile("promptseg")


@pytest.fixture(scope="session")
def scene():
    return make_scene(1000)


def rect_mask(shape, y0, y1, x0, x1):
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return m


@pytest.fixture
def two_rects():
    """48x48 scene with a 'dog' block on the left and a 'car' block on the right."""
    shape = (48, 48)
    dog = rect_mask(shape, 10, 30, 4, 20)
    car = rect_mask(shape, 14, 40, 28, 44)
    image = np.full(shape + (3,), 0.5, np.float32)
    image[dog] = (0.9, 0.1, 0.1)
    image[car] = (0.1, 0.1, 0.9)
    labels = np.zeros(shape, np.uint8)
    labels[dog] = 1
    labels[car] = 2
    return image, labels, ["dog", "car"]


# -- acceptance summary -------------------------------------------------------
# test_acceptance records one line per criterion here; the lines are printed at
# the end of the run so they survive pytest's output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
