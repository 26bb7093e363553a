import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from skytomo.geometry import CameraModel, GridSpec, default_rig

settings.register_profile("skytomo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("skytomo")

torch.set_num_threads(1)

_CRITERIA = {}    # criterion number -> outcome and measured values

K_DOC = np.array([[1000.0, 0.0, 500.0], [0.0, 1000.0, 500.0], [0.0, 0.0, 1.0]])


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute end-to-end training runs")
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    n = getattr(report, "criterion", None)
    if n is None or (report.when != "call" and report.passed):
        return
    store = _CRITERIA
    entry = store.setdefault(n, {"ok": True, "details": []})
    entry["ok"] &= report.passed
    entry["details"].extend(d for d in report.user_properties if d[0] == "detail")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    store = _CRITERIA
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        e = store[n]
        detail = "; ".join(d[1] for d in e["details"])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}  {detail}")



@pytest.fixture
def record(request):
    """``record(msg)`` attaches a measured value to the acceptance line of this test."""
    def add(msg):
        request.node.user_properties.append(("detail", msg))
        print(msg)
    return add


@pytest.fixture
def upward_camera():
    """Camera at the origin whose depth axis is world z."""
    return CameraModel(K=K_DOC, R=np.eye(3), t=np.zeros(3), width=1000, height=1000)


@pytest.fixture(scope="session")
def small_spec():
    return GridSpec(dims=(16, 16, 16))


@pytest.fixture(scope="session")
def demo_spec():
    return GridSpec(dims=(64, 64, 64))


@pytest.fixture(scope="session")
def demo_rig(demo_spec):
    return default_rig(demo_spec)


class TinyWorld:
    """A 16x16x16 scene rendered by six 16x16 cameras, small enough for unit tests."""

    def __init__(self, n_scenes=2):
        from skytomo.cloudgen import SceneParams, derive_maps, generate_scene
        from skytomo.features import LiftPlan
        from skytomo.geometry import HeightSweep
        from skytomo.layernet import TrainingSample
        from skytomo.optics import SunModel, lwc_to_extinction, render

        self.spec = GridSpec(dims=(16, 16, 16))
        self.rig = default_rig(self.spec, width=16, height=16)
        self.sweep = HeightSweep.regular(50.0, 350.0, 50.0)
        self.plan = LiftPlan.build(self.rig, self.sweep, self.spec)
        sun = SunModel.from_angles(50, 135)
        self.grids, self.samples = [], []
        for seed in range(n_scenes):
            p = SceneParams(seed=seed, coverage_target=0.3, base_height_range=(100.0, 200.0),
                            thickness_range=(50.0, 100.0), cell_radius_range=(30.0, 80.0),
                            cell_count_range=(2, 4))
            grid = generate_scene(p, self.spec)
            ext = lwc_to_extinction(grid)
            views = [render(cam, ext, sun).image.data for cam in self.rig]
            self.grids.append(grid)
            self.samples.append(TrainingSample(views, derive_maps(grid)))

    def layer_config(self, **kw):
        from skytomo.layernet import LayerNetConfig
        base = dict(n_planes=self.sweep.H, d_f=4, encoder_hidden=6, embed_dim=8,
                    base_channels=8, depth=1)
        base.update(kw)
        return LayerNetConfig(**base)


@pytest.fixture(scope="session")
def tiny_world():
    return TinyWorld()
