import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from handsplat.renderer import (
    ALPHA_MAX, ALPHA_MIN, CUTOFF, EIG_FLOOR, T_MIN, Camera, look_at, project, rasterize, rasterize_bruteforce,
    render, render_backward,
)


def front_camera(w=32, h=32, f=100.0, dist=0.5):
    # camera at z = -dist looking along +z
    return Camera(f, f, w / 2, h / 2, np.eye(3), [0.0, 0.0, dist], w, h)


def random_scene(n, seed, w=32, h=32, spread=0.05):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n, 3)) * spread
    rot = Rotation.random(n, random_state=seed).as_matrix()
    s = np.exp(rng.uniform(np.log(0.002), np.log(0.02), (n, 3)))
    cov = rot @ (s[:, :, None] ** 2 * np.eye(3)) @ np.swapaxes(rot, 1, 2)
    colors = rng.uniform(size=(n, 3))
    opac = rng.uniform(0.05, 0.95, n)
    return means, cov, colors, opac, front_camera(w, h)


def composite_reference(mean2d, conic, depth, valid, colors, opac, w, h, bg):
    """Straight per-pixel front-to-back compositing written from the definition."""
    order = sorted(np.flatnonzero(valid), key=lambda i: (depth[i], i))
    img = np.zeros((h, w, 3))
    acc = np.zeros((h, w))
    for py in range(h):
        for px in range(w):
            T, c = 1.0, np.zeros(3)
            for i in order:
                d = np.array([px + 0.5, py + 0.5]) - mean2d[i]
                Q = np.array([[conic[i, 0], conic[i, 1]], [conic[i, 1], conic[i, 2]]])
                power = -0.5 * d @ Q @ d
                if power > 0 or power < -CUTOFF:
                    continue
                a = min(ALPHA_MAX, opac[i] * np.exp(power))
                if a < ALPHA_MIN:
                    continue
                if T * (1 - a) < T_MIN:
                    break
                c += a * T * colors[i]
                T *= 1 - a
            img[py, px] = c + T * np.asarray(bg)
            acc[py, px] = 1 - T
    return img, acc


# -- camera / projection ---------------------------------------------------------


def test_camera_validation_and_round_trip():
    with pytest.raises(ValueError):
        Camera(0.0, 1.0, 0, 0, np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 0, 0, np.diag([1.0, 1.0, 2.0]), np.zeros(3), 4, 4)
    R, t = look_at([0.3, -0.2, 0.4], [0, 0.05, 0])
    cam = Camera(200, 200, 64, 64, R, t, 128, 128, "c")
    back = Camera.from_dict(cam.to_dict())
    assert np.array_equal(back.R, cam.R) and back.name == "c"
    assert np.allclose(cam.center, [0.3, -0.2, 0.4])
    half = cam.scaled(0.5)
    assert (half.width, half.fx, half.cx) == (64, 100, 32)


def test_look_at_centres_target():
    R, t = look_at([0.5, 0.1, 0.3], [0.01, 0.02, 0.03])
    cam = Camera(100, 100, 16, 16, R, t, 32, 32)
    p = project(np.array([[0.01, 0.02, 0.03]]), np.eye(3)[None] * 1e-4, cam)
    assert np.allclose(p.mean2d, [[16, 16]], atol=1e-9)


def test_on_axis_isotropic_projection():
    cam = front_camera()
    sigma = 0.01
    p = project(np.zeros((1, 3)), np.eye(3)[None] * sigma ** 2, cam)
    assert np.allclose(p.mean2d, [[16, 16]])
    assert np.isclose(p.depth[0], 0.5)
    var = (cam.fx * sigma / 0.5) ** 2
    assert np.allclose(p.cov2d, [[var, 0.0, var]], rtol=1e-12)
    assert np.allclose(p.conic, [[1 / var, 0.0, 1 / var]], rtol=1e-12)


def test_tiny_gaussian_hits_eigenvalue_floor():
    cam = front_camera()
    p = project(np.zeros((1, 3)), np.eye(3)[None] * 1e-12, cam)
    a, b, c = p.cov2d[0]
    lam = 0.5 * (a + c) - np.hypot(0.5 * (a - c), b)
    assert np.isclose(lam, EIG_FLOOR)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_projected_covariance_psd(seed):
    means, cov, *_ , cam = random_scene(20, seed)
    p = project(means, cov, cam)
    a, b, c = p.cov2d.T
    assert (a * c - b * b >= 0).all()
    lam = 0.5 * (a + c) - np.hypot(0.5 * (a - c), b)
    assert (lam >= EIG_FLOOR - 1e-9).all()


def test_behind_camera_is_culled():
    cam = front_camera()
    means = np.array([[0.0, 0.0, -0.6]])
    out = render(means, np.eye(3)[None] * 1e-4, np.ones((1, 3)), np.ones(1), cam)
    assert not project(means, np.eye(3)[None] * 1e-4, cam).valid[0]
    assert np.all(out.color == 0) and np.all(out.alpha == 0)


# -- forward rasterizer --------------------------------------------------------------


def test_empty_cloud_is_background():
    cam = front_camera(20, 12)
    out = render(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0), cam, bg=(0.2, 0.4, 0.6))
    assert out.color.shape == (12, 20, 3)
    assert np.array_equal(out.color, np.broadcast_to([0.2, 0.4, 0.6], (12, 20, 3)))
    assert np.all(out.alpha == 0)


def centred_camera():
    # principal point on a pixel centre so an on-axis mean lands exactly on it
    return Camera(100, 100, 16.5, 16.5, np.eye(3), [0.0, 0.0, 0.5], 32, 32)


def test_opaque_gaussian_clamped():
    cam = centred_camera()
    bg = np.array([0.1, 0.2, 0.3])
    c = np.array([[0.9, 0.5, 0.1]])
    out = render(np.zeros((1, 3)), np.eye(3)[None] * 1e-4, c, np.ones(1), cam, bg)
    assert np.allclose(out.color[16, 16], ALPHA_MAX * c[0] + (1 - ALPHA_MAX) * bg, atol=1e-15)
    assert np.isclose(out.alpha[16, 16], ALPHA_MAX)


def test_two_half_opaque_gaussians():
    cam = centred_camera()
    A, B = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    means = np.array([[0.0, 0.0, 0.1], [0.0, 0.0, 0.0]])   # B is nearer
    out = render(means, np.tile(np.eye(3) * 1e-4, (2, 1, 1)), np.stack([A, B]), np.full(2, 0.5), cam)
    assert np.allclose(out.color[16, 16], 0.5 * B + 0.25 * A, atol=1e-15)
    assert np.isclose(out.alpha[16, 16], 0.75)
    assert out.n_contrib[16, 16] == 2


def test_tiled_matches_definition():
    for seed in range(3):
        means, cov, colors, opac, cam = random_scene(40, seed, 24, 20)
        proj = project(means, cov, cam)
        out = rasterize(proj, colors, opac, cam, (0.1, 0.0, 0.3))
        ref, acc = composite_reference(proj.mean2d, proj.conic, proj.depth, proj.valid, colors, opac,
                                       24, 20, (0.1, 0.0, 0.3))
        assert np.abs(out.color - ref).max() <= 1e-5
        assert np.abs(out.alpha - acc).max() <= 1e-5


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 400))
def test_tiled_matches_bruteforce(seed, n):
    means, cov, colors, opac, cam = random_scene(n, seed, 48, 40)
    proj = project(means, cov, cam)
    out = rasterize(proj, colors, opac, cam)
    img, alpha = rasterize_bruteforce(proj, colors, opac, cam)
    assert np.abs(out.color - img).max() <= 1e-5
    assert np.abs(out.alpha - alpha).max() <= 1e-5
    assert out.alpha.max() <= 1 + 1e-6 and out.alpha.min() >= 0


def test_float32_close_to_float64():
    means, cov, colors, opac, cam = random_scene(200, 7)
    a = render(means, cov, colors, opac, cam, dtype=np.float64).color
    b = render(means, cov, colors, opac, cam, dtype=np.float32).color
    assert b.dtype == np.float32
    assert np.abs(a - b).max() < 1e-4


# -- backward ------------------------------------------------------------------------


def test_zero_cotangent_gives_zero_gradients():
    means, cov, colors, opac, cam = random_scene(30, 1)
    out = render(means, cov, colors, opac, cam)
    for g in render_backward(out, np.zeros_like(out.color))[:4]:
        assert np.all(g == 0)


def test_colour_gradient_is_blend_weight():
    cam = front_camera()
    out = render(np.zeros((1, 3)), np.eye(3)[None] * 1e-4, np.full((1, 3), 0.5), np.full(1, 0.8), cam)
    g = np.zeros_like(out.color)
    g[..., 1] = 1.0
    _, _, gc, _, _ = render_backward(out, g)
    assert np.isclose(gc[0, 1], out.alpha.sum(), rtol=1e-12)
    assert gc[0, 0] == 0 and gc[0, 2] == 0


def test_backward_matches_finite_differences():
    means, cov, colors, opac, cam = random_scene(16, 11, 8, 8, spread=0.006)
    cam = Camera(100, 100, 4, 4, np.eye(3), [0, 0, 0.5], 8, 8)
    rng = np.random.default_rng(0)
    G = rng.normal(size=(8, 8, 3))
    Ga = rng.normal(size=(8, 8))

    def f():
        o = render(means, cov, colors, opac, cam, bg=(0.2, 0.1, 0.0))
        return float((o.color * G).sum() + (o.alpha * Ga).sum())

    out = render(means, cov, colors, opac, cam, bg=(0.2, 0.1, 0.0))
    gm, gcov, gcol, gop, _ = render_backward(out, G, Ga)
    gcov_sym = 0.5 * (gcov + np.swapaxes(gcov, 1, 2))
    worst = 0.0
    for arr, ana, h in ((means, gm, 1e-7), (colors, gcol, 1e-6), (opac, gop, 1e-6)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            a = f()
            arr[idx] = old - h
            b = f()
            arr[idx] = old
            num = (a - b) / (2 * h)
            worst = max(worst, abs(ana[idx] - num) / max(abs(num), 1e-2))
    # symmetric perturbation of the covariance
    for i in range(16):
        for (r, c) in ((0, 0), (0, 1), (1, 2), (2, 2)):
            E = np.zeros((3, 3))
            E[r, c] = E[c, r] = 1.0
            h = 1e-9
            cov[i] += h * E
            a = f()
            cov[i] -= 2 * h * E
            b = f()
            cov[i] += h * E
            num = (a - b) / (2 * h)
            ana = (gcov_sym[i] * E).sum()
            worst = max(worst, abs(ana - num) / max(abs(num), 1e2))
    assert worst <= 1e-3


def test_backward_is_deterministic():
    means, cov, colors, opac, cam = random_scene(300, 5, 64, 64)
    G = np.random.default_rng(1).normal(size=(64, 64, 3))
    out1 = render(means, cov, colors, opac, cam)
    out2 = render(means, cov, colors, opac, cam)
    assert np.array_equal(out1.color, out2.color)
    for a, b in zip(render_backward(out1, G), render_backward(out2, G)):
        assert np.array_equal(a, b)
