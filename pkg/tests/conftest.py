import numpy as np
import pytest

from mmrf.geometry import CameraModel, DistortionCoefficients, Intrinsics, look_at


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    """64x64 camera three units from the origin with mild distortion."""
    k = Intrinsics(fx=150.0, fy=150.0, cx=32.0, cy=32.0, width=64, height=64)
    dist = DistortionCoefficients(-0.05, 0.01, 5e-4, -5e-4)
    return CameraModel(k, dist, look_at((3.0, 0.4, 0.8)))


@pytest.fixture(scope="session")
def sphere_bundle(tmp_path_factory):
    """Small rgb+pol+ms synthetic bundle shared by the data-path tests."""
    from mmrf.synth import make_scene_bundle, sphere_scene

    out = tmp_path_factory.mktemp("sphere")
    make_scene_bundle(sphere_scene(), out, n_views=10, modalities=("rgb", "pol", "ms"), test_views=(4, 9))
    return out / "manifest.json"


# --------------------------------------------------------------------------
# acceptance criteria: one PASS/FAIL line each in the terminal summary

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """``record(ok, detail)`` for the test's ``@pytest.mark.criterion(k)``."""
    k = request.node.get_closest_marker("criterion").args[0]

    def record(ok, detail):
        _CRITERIA[k] = (bool(ok), detail)
        return bool(ok)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not rep.failed:
        return
    k = marker.args[0]
    if k not in _CRITERIA or _CRITERIA[k][0]:
        msg = str(call.excinfo.value).strip().splitlines()
        _CRITERIA[k] = (False, f"{call.excinfo.typename}: {msg[0][:200] if msg else ''}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        ok, detail = _CRITERIA[k]
        terminalreporter.write_line(f"CRITERION {k:2d} {'PASS' if ok else 'FAIL'}  {detail}")
