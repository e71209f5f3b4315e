import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h, w, c):
    return rng.integers(0, 256, size=(h, w, c), dtype=np.uint8)


def smooth_image(rng, h, w, c):
    """Low-frequency image with some texture, closer to a photograph than noise."""
    yy, xx = np.mgrid[0:h, 0:w]
    base = 128 + 60 * np.sin(xx / 5.0 + rng.uniform(0, 6)) * np.cos(yy / 7.0 + rng.uniform(0, 6))
    img = base[..., None] + rng.normal(0, 12, size=(h, w, c))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def record_criterion(request, capsys):
    """Print and remember one PASS/FAIL line for an acceptance criterion."""
    results = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title, passed, detail):
        line = f"criterion {number} [{title}]: {'PASS' if passed else 'FAIL'} - {detail}"
        results.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)
