import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from helpers import INTRINSICS
from splatstream.core import Camera, RenderConfig
from splatstream.scene import SceneSpec, build_lod_tree, generate_synthetic_scene, partition_subtrees

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture(scope="session")
def city():
    return generate_synthetic_scene(SceneSpec(cells_x=6, cells_y=6, per_cell=60, seed=7))


@pytest.fixture(scope="session")
def city_tree(city):
    tree = build_lod_tree(city)
    return tree.with_partition(partition_subtrees(tree, 64))


@pytest.fixture
def config():
    return RenderConfig()


@pytest.fixture
def orbit_cameras():
    def make(n, deg=0.25, center=(30.0, 30.0, 0.0), radius=30.0, height=8.0, intrinsics=INTRINSICS):
        c = np.asarray(center)
        out = []
        for k in range(n):
            a = np.radians(deg * k)
            eye = c + [radius * np.cos(a), radius * np.sin(a), height]
            out.append(Camera.look_at(eye, c, **intrinsics))
        return out
    return make


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
