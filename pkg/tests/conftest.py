import numpy as np
import pytest

from dudotrans import gradcore as gc
from dudotrans import tomo


@pytest.fixture(autouse=True)
def _clean_tape():
    gc.clear_tape()
    yield
    gc.clear_tape()


@pytest.fixture(scope="session")
def small_geom():
    """64x64 image, 48 views: the size used for adjoint checks."""
    return tomo.ScanGeometry(num_views=48, num_detectors=128, image_size=(64, 64))


@pytest.fixture(scope="session")
def tiny_geom():
    return tomo.ScanGeometry(num_views=24, num_detectors=64, image_size=(32, 32))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def disk_image(geom, radius=0.5, value=1.0, supersample=4):
    """Centred disk rasterised with ``supersample``^2 points per pixel."""
    h, w = geom.image_size
    ps = geom.pixel_spacing
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    xs = (np.arange(w) - 0.5 * (w - 1)) * ps
    ys = (0.5 * (h - 1) - np.arange(h)) * ps
    acc = np.zeros((h, w))
    for oy in offs:
        for ox in offs:
            acc += (xs[None, :] + ox * ps) ** 2 + (ys[:, None] + oy * ps) ** 2 <= radius ** 2
    return value * acc / supersample ** 2


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


# ------------------------------------------------------- acceptance report

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    num, title = marker.args
    detail = getattr(item, "criterion_detail", "")
    status = "PASS" if rep.passed else "FAIL"
    _CRITERIA[num] = (status, title, detail)
    line = f"criterion {num:>2} {status}: {title}" + (f" [{detail}]" if detail else "")
    print(f"\n{line}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:>2} {status}: {title}" + (f" [{detail}]" if detail else ""))
