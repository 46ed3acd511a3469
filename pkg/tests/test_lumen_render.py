"""Raycast renderer: geometry accuracy, symmetry, determinism, frame stack."""

import numpy as np
import pytest

from bronchosim.airway import AirwaySegment, AirwayTree, TreeConfig, generate_tree
from bronchosim.lumen_render import CameraConfig, Frame, FrameStack, LumenRenderer


def cylinder_tree(radius=8.0, length=400.0):
    pts = np.zeros((5, 3))
    pts[:, 2] = np.linspace(0, length, 5)
    return AirwayTree({0: AirwaySegment(0, None, pts, np.full(5, radius), 0)})


@pytest.fixture(scope="module")
def cyl():
    return cylinder_tree()


@pytest.fixture(scope="module")
def exact_renderer(cyl):
    return LumenRenderer(cyl, CameraConfig(backend="exact", width=32, height=32,
                                           max_depth=120.0))


def test_config_validation():
    with pytest.raises(ValueError):
        CameraConfig(width=4)
    with pytest.raises(ValueError):
        CameraConfig(fov_deg=0.0)
    with pytest.raises(ValueError):
        CameraConfig(backend="mesh")


def test_on_axis_frame_is_radially_symmetric(exact_renderer):
    f = exact_renderer.render([0, 0, 200.0], [0, 0, 1.0])
    v = f.values
    assert np.abs(v - v[:, ::-1]).max() < 1e-3
    assert np.abs(v - v[::-1, :]).max() < 1e-3


def test_lumen_center_is_deepest(exact_renderer):
    f, depth = exact_renderer.render([0, 0, 100.0], [0, 0, 1.0], with_depth=True)
    h, w = depth.shape
    assert depth[h // 2, w // 2] > depth[0, 0]
    assert depth[h // 2, w // 2] > depth[h // 2, 0]
    # darkest region sits at the center
    assert f.values[h // 2, w // 2] <= f.values[0, 0]


def test_hit_distance_matches_closed_form_cylinder(cyl):
    # analytic oracle: |o_xy + t*d_xy| = R solved as a quadratic
    cfg = CameraConfig(backend="exact", width=24, height=24, hit_eps=0.01,
                       max_iters=200, max_depth=120.0)
    r = LumenRenderer(cyl, cfg)
    origin = np.array([1.5, -2.0, 200.0])
    forward = np.array([0.3, 0.1, 1.0])
    forward /= np.linalg.norm(forward)
    _, depth = r.render(origin, forward, with_depth=True)
    dirs = r._pixel_dirs(forward).reshape(24, 24, 3)
    R = 8.0
    checked = 0
    for i in range(24):
        for j in range(24):
            d = dirs[i, j]
            a = d[0] ** 2 + d[1] ** 2
            sin_incidence = np.sqrt(a)  # angle away from the axis
            if sin_incidence < 0.26:    # grazing rays excluded (>=15 deg)
                continue
            b = 2 * (origin[0] * d[0] + origin[1] * d[1])
            c = origin[0] ** 2 + origin[1] ** 2 - R * R
            t = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
            if t > 110.0:
                continue
            assert abs(depth[i, j] - t) < 0.1, (i, j, depth[i, j], t)
            checked += 1
    assert checked > 100


def test_intensities_valid_for_any_pose(exact_renderer):
    rng = np.random.default_rng(0)
    for _ in range(10):
        pos = rng.uniform([-20, -20, -50], [20, 20, 450])
        d = rng.normal(size=3)
        f = exact_renderer.render(pos, d / np.linalg.norm(d))
        assert np.all(np.isfinite(f.values))
        assert f.values.min() >= 0.0 and f.values.max() <= 1.0


def test_outside_pose_renders_black(exact_renderer):
    f = exact_renderer.render([50.0, 0, 100.0], [0, 0, 1.0])
    assert np.all(f.values == 0.0)


def test_render_deterministic(cyl):
    r = LumenRenderer(cyl, CameraConfig(backend="grid", width=16, height=16))
    a = r.render([0.5, 0.3, 90.0], [0.1, 0, 1.0]).values
    b = r.render([0.5, 0.3, 90.0], [0.1, 0, 1.0]).values
    assert np.array_equal(a, b)
    r2 = LumenRenderer(cyl, CameraConfig(backend="grid", width=16, height=16))
    c = r2.render([0.5, 0.3, 90.0], [0.1, 0, 1.0]).values
    assert np.array_equal(a, c)


def test_resolution_doubling_consistency():
    tree = generate_tree(3, TreeConfig(generations=2))
    lo = LumenRenderer(tree, CameraConfig(backend="exact", width=24, height=24))
    hi = LumenRenderer(tree, CameraConfig(backend="exact", width=48, height=48))
    pos, fwd = [0, 0, 10.0], [0, 0, 1.0]
    a = lo.render(pos, fwd).values
    b = hi.render(pos, fwd).values
    down = b.reshape(24, 2, 24, 2).mean(axis=(1, 3))
    assert np.abs(a - down).mean() < 0.05


def test_grid_backend_close_to_exact(cyl):
    g = LumenRenderer(cyl, CameraConfig(backend="grid", width=32, height=32))
    e = LumenRenderer(cyl, CameraConfig(backend="exact", width=32, height=32))
    pos, fwd = [1.0, 0.5, 150.0], [0.05, -0.02, 1.0]
    a = g.render(pos, fwd).values
    b = e.render(pos, fwd).values
    assert np.abs(a - b).mean() < 0.05


def test_pgm_export(exact_renderer):
    f = exact_renderer.render([0, 0, 100.0], [0, 0, 1.0])
    raw = f.to_pgm()
    assert raw.startswith(b"P5\n32 32\n255\n")
    assert len(raw) == len(b"P5\n32 32\n255\n") + 32 * 32


def test_u8_roundtrip(exact_renderer):
    f = exact_renderer.render([0, 0, 100.0], [0, 0, 1.0])
    g = Frame.from_u8(f.to_u8())
    assert np.abs(g.values - f.values).max() <= 0.5 / 255.0 + 1e-6
    # re-encoding is exact
    assert np.array_equal(g.to_u8(), f.to_u8())


# --- frame stack --------------------------------------------------------------

def frame_of(val):
    return Frame(np.full((4, 4), val, dtype=np.float32))


def test_frame_stack_replicates_on_reset():
    fs = FrameStack()
    fs.reset(frame_of(0.3))
    stack = fs.get()
    assert len(stack) == 3
    assert all(np.all(f.values == np.float32(0.3)) for f in stack)


def test_frame_stack_sliding_order():
    fs = FrameStack()
    fs.reset(frame_of(0.0))
    for v in (0.1, 0.2, 0.3):
        fs.push(frame_of(v))
    vals = [float(f.values[0, 0]) for f in fs.get()]
    np.testing.assert_allclose(vals, [0.1, 0.2, 0.3], rtol=1e-6)


def test_frame_stack_bounded_under_many_pushes():
    fs = FrameStack()
    fs.reset(frame_of(0.0))
    for i in range(1000):
        fs.push(frame_of(i / 1000.0))
        assert len(fs.get()) == 3
    assert fs.as_array().shape == (3, 4, 4)


def test_frame_stack_empty_raises():
    with pytest.raises(RuntimeError):
        FrameStack().get()
