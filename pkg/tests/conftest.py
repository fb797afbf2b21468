import numpy as np
import pytest

from mesostitch import geometry, synthlab


@pytest.fixture(scope="session")
def ctx():
    return geometry.AutofocusContext.from_height(4.3, 75.0)


@pytest.fixture(scope="session")
def small_scene():
    spec = synthlab.PhantomSpec([synthlab.Plateau(2.0, 1.0, 6.0, 5.0, 400.0)],
                                extent=(-30.0, 30.0, -25.0, 25.0), seed=5)
    return synthlab.make_phantom(spec)


@pytest.fixture(scope="session")
def flat_scene():
    return synthlab.make_phantom(synthlab.PhantomSpec(extent=(-30.0, 30.0, -25.0, 25.0), seed=6))


@pytest.fixture(scope="session")
def small_camera():
    return synthlab.Camera((64, 64))


def two_frame_sequence(scene, camera, ctx, offset=(1.5, 0.8), seed=0, theta=0.0, **kw):
    kw.setdefault("tilt", 0.0)
    kw.setdefault("z_jitter", 0.0)
    kw.setdefault("theta_jitter", 0.0)
    poses = synthlab.make_poses(2, ctx, seed=seed, positions=((0.0, 0.0), offset), **kw)
    poses[1].X, poses[1].Y = offset
    poses[1].theta = theta
    frames = np.stack([synthlab.render_frame(scene, p, None, camera) for p in poses])
    return synthlab.Sequence(frames.astype(np.float32), poses, None, ctx, camera, scene)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the terminal summary (and print it)."""
    def _report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
