"""Shared fixtures for the test suite.

The autouse session fixture exercises every compiled kernel once (plain
render, render with solids and a light, a short fit, and a gradient check)
so that the runtime budgets asserted by individual tests measure the math
rather than one-time jit compilation.
"""

import numpy as np
import pytest

from splatcast.accel import Ray, build_bvh, trace_nearest_brute
from splatcast.fitting import FitConfig, finite_diff_check, fit
from splatcast.fixtures import ground_truth_scene, random_scene, ring_cameras
from splatcast.render import RenderConfig, render_image
from splatcast.scene import Material, PointLight, Scene, SolidMesh


def quad_mesh(p0, p1, p2, p3, material) -> SolidMesh:
    """Two-triangle rectangle used as mirror/glass/diffuse wall in tests."""
    vertices = np.array([p0, p1, p2, p3], dtype=np.float64)
    triangles = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return SolidMesh(vertices=vertices, triangles=triangles, material=material)


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    scene = ground_truth_scene()
    cam = ring_cameras(1, width=12, pixels_high=12)[0]
    cfg = RenderConfig()
    render_image(scene, cam, cfg, workers=2)

    wall = quad_mesh([-2, -2, -1.5], [2, -2, -1.5], [2, 2, -1.5], [-2, 2, -1.5],
                     Material(kind="diffuse", albedo=(0.8, 0.8, 0.8)))
    mirror = quad_mesh([-2, -2, -1.8], [2, -2, -1.8], [2, 2, -1.8], [-2, 2, -1.8],
                       Material(kind="mirror", albedo=(1.0, 1.0, 1.0)))
    pane = quad_mesh([-2, -2, 1.5], [2, -2, 1.5], [2, 2, 1.5], [-2, 2, 1.5],
                     Material(kind="glass", albedo=(1.0, 1.0, 1.0), ior=1.4))
    lit = Scene(
        gaussians=scene.gaussians,
        solids=[wall, mirror, pane],
        lights=[PointLight(position=(0.0, 3.0, 3.0), intensity=(1.0, 1.0, 1.0))],
        background=scene.background,
    )
    render_image(lit, cam, cfg)

    small = random_scene(4, seed=0)
    target = [render_image(small, cam, cfg)]
    fit(small, target, [cam], FitConfig(iterations=2), cfg)
    finite_diff_check(small, cam, cfg, param_selector="color", step=1e-5)

    tri = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    trace_nearest_brute(Ray(origin=(0.2, 0.2, 1.0), direction=(0.0, 0.0, -1.0)),
                        build_bvh(tri, kind="generic"))
    yield


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def three_splat_scene():
    return ground_truth_scene()
