import numpy as np
import pytest

from headsplat.camera import COV2D_REG, Camera, ProjectedSplats, project, project_backward
from headsplat.renderer import (
    ALPHA_CLAMP,
    PALETTE,
    composite,
    composite_inpaint,
    evaluate_alpha,
    rasterize,
    rasterize_backward,
    rasterize_reference,
    render_splats,
    semantic_colors,
    sh_colors,
    sh_colors_backward,
)
from headsplat.rotations import exp_map


def default_cam(w=64, h=64):
    return Camera.default(w, h, distance=3.0)


def random_scene(rng, n=50, sh_rest=0):
    u = rng.uniform(-0.8, 0.8, (n, 3))
    r = np.stack([exp_map(rng.normal(0, 1, 3)) for _ in range(n)])
    s = np.exp(rng.uniform(np.log(0.02), np.log(0.15), (n, 3)))
    alpha = rng.uniform(0.1, 1.0, n)
    colors = rng.uniform(0.0, 1.0, (n, 3))
    return u, r, s, alpha, colors


# --- projection -------------------------------------------------------------


def test_project_axis_point_hits_principal_point():
    cam = default_cam()
    splats = project(np.array([[0.0, 0.0, 0.0]]), np.eye(3)[None], np.array([[0.1, 0.1, 0.1]]), cam)
    assert np.allclose(splats.mean2d[0], [cam.cx, cam.cy], atol=1e-12)
    assert splats.visible[0]


def test_project_orthographic_axis_aligned_cov():
    cam = Camera(width=64, height=64, fx=1.0, fy=1.0, cx=32.0, cy=32.0, mode="orthographic")
    a, b, c = 0.3, 0.2, 0.5
    splats = project(np.array([[0.1, -0.2, 1.0]]), np.eye(3)[None], np.array([[a, b, c]]), cam)
    expect = np.diag([a * a, b * b]) + COV2D_REG * np.eye(2)
    assert np.allclose(splats.cov2d[0], expect, atol=1e-12)


def test_project_behind_camera_is_culled():
    cam = default_cam()
    splats = project(np.array([[0.0, 0.0, 10.0]]), np.eye(3)[None], np.array([[0.1, 0.1, 0.1]]), cam)
    assert not splats.visible[0]


def test_project_cov2d_matches_fd_jacobian_oracle():
    rng = np.random.default_rng(0)
    cam = default_cam()
    for _ in range(10):
        u = rng.uniform(-0.7, 0.7, 3)
        r = exp_map(rng.normal(size=3))
        s = np.exp(rng.uniform(np.log(0.05), np.log(0.3), 3))
        splats = project(u[None], r[None], s[None], cam)

        def pix(x):
            t = cam.rotation @ x + cam.translation
            return np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])

        h = 1e-5
        J = np.zeros((2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            J[:, k] = (pix(u + e) - pix(u - e)) / (2 * h)
        sigma = r @ np.diag(s * s) @ r.T
        cov_fd = J @ sigma @ J.T + COV2D_REG * np.eye(2)
        rel = np.abs(splats.cov2d[0] - cov_fd) / np.maximum(np.abs(cov_fd), 1e-9)
        assert rel.max() < 1e-3


def test_project_backward_matches_fd():
    rng = np.random.default_rng(1)
    cam = default_cam()
    n = 4
    u = rng.uniform(-0.5, 0.5, (n, 3))
    r = np.stack([exp_map(rng.normal(size=3)) for _ in range(n)])
    s = np.exp(rng.uniform(np.log(0.05), np.log(0.3), (n, 3)))
    d_mean = rng.normal(size=(n, 2))
    d_cov = rng.normal(size=(n, 2, 2))

    def objective(u_, r_, s_):
        sp = project(u_, r_, s_, cam)
        return float(np.sum(sp.mean2d * d_mean) + np.sum(sp.cov2d * d_cov))

    splats = project(u, r, s, cam)
    d_u, d_r, d_s = project_backward(u, r, s, cam, splats, d_mean, d_cov)
    h = 1e-6
    for arr, grad in ((u, d_u), (s, d_s), (r, d_r)):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            ap, am = arr.copy(), arr.copy()
            ap[idx] += h
            am[idx] -= h
            vals_p = [u, r, s]
            vals_m = [u, r, s]
            vals_p = [ap if v is arr else v for v in vals_p]
            vals_m = [am if v is arr else v for v in vals_m]
            fd = (objective(*vals_p) - objective(*vals_m)) / (2 * h)
            assert abs(grad[idx] - fd) < 2e-4 * max(1.0, abs(fd)), (idx,)


def test_project_backward_orthographic_matches_fd():
    rng = np.random.default_rng(2)
    cam = Camera(width=32, height=32, fx=16.0, fy=16.0, cx=16.0, cy=16.0, mode="orthographic")
    n = 3
    u = rng.uniform(-0.5, 0.5, (n, 3))
    u[:, 2] += 2.0
    r = np.stack([exp_map(rng.normal(size=3)) for _ in range(n)])
    s = np.exp(rng.uniform(np.log(0.05), np.log(0.3), (n, 3)))
    d_mean = rng.normal(size=(n, 2))
    d_cov = rng.normal(size=(n, 2, 2))

    def objective(u_):
        sp = project(u_, r, s, cam)
        return float(np.sum(sp.mean2d * d_mean) + np.sum(sp.cov2d * d_cov))

    splats = project(u, r, s, cam)
    d_u, _, _ = project_backward(u, r, s, cam, splats, d_mean, d_cov)
    h = 1e-6
    it = np.nditer(u, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        ap, am = u.copy(), u.copy()
        ap[idx] += h
        am[idx] -= h
        fd = (objective(ap) - objective(am)) / (2 * h)
        assert abs(d_u[idx] - fd) < 1e-5


# --- evaluate_alpha / composite ---------------------------------------------


def test_evaluate_alpha_at_mean():
    cov = np.diag([2.0, 3.0])
    assert evaluate_alpha(np.zeros(2), cov, 0.7, np.zeros(2)) == pytest.approx(0.7)
    assert evaluate_alpha(np.zeros(2), cov, 1.0, np.zeros(2)) == pytest.approx(ALPHA_CLAMP)


def test_evaluate_alpha_isotropic_at_sigma():
    sigma2 = 1.7
    cov = sigma2 * np.eye(2)
    a = evaluate_alpha(np.zeros(2), cov, 0.8, np.array([np.sqrt(sigma2), 0.0]))
    assert a == pytest.approx(0.8 * np.exp(-0.5), rel=1e-12)


def test_composite_single_opaque_splat():
    out = composite([(np.array([0.2, 0.4, 0.6]), 0.99)], np.zeros(3))
    assert np.allclose(out, 0.99 * np.array([0.2, 0.4, 0.6]), atol=1e-15)


def test_composite_two_splats_hand_example():
    out = composite(
        [(np.array([1.0, 0.0, 0.0]), 0.5), (np.array([0.0, 1.0, 0.0]), 0.5)],
        np.zeros(3),
    )
    assert np.array_equal(out, np.array([0.5, 0.25, 0.0]))


def test_composite_empty_returns_background():
    bg = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(composite([], bg), bg)


def test_composite_skips_invisible():
    out = composite([(np.ones(3), 0.0), (np.array([1.0, 0.0, 0.0]), 0.5)], np.zeros(3))
    assert np.allclose(out, [0.5, 0.0, 0.0])


def test_composite_weights_bounded():
    rng = np.random.default_rng(3)
    for _ in range(50):
        alphas = rng.uniform(0, ALPHA_CLAMP, 30)
        T = 1.0
        total = 0.0
        for a in alphas:
            total += a * T
            T *= 1.0 - a
        assert 0.0 <= T <= 1.0
        assert total <= 1.0 + 1e-9


# --- renderers --------------------------------------------------------------


def test_render_empty_scene_is_background():
    cam = default_cam(32, 32)
    bg = np.array([0.25, 0.5, 0.75])
    img, _ = render_splats(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)),
                           np.zeros(0), np.zeros((0, 3)), cam, bg)
    assert np.array_equal(img, np.broadcast_to(bg, (32, 32, 3)))


def test_single_opaque_semantic_splat_at_center():
    cam = default_cam(33, 33)
    u = np.array([[0.0, 0.0, 0.0]])
    r = np.eye(3)[None]
    s = np.array([[0.05, 0.05, 0.05]])
    colors = semantic_colors(np.array([0]), np.array([1]))  # lips palette entry
    img, _ = render_splats(u, r, s, np.array([1.0]), colors, cam, np.zeros(3))
    center = img[16, 16]
    assert np.allclose(center, ALPHA_CLAMP * PALETTE[1], atol=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_tile_renderer_equals_reference_bitwise(seed):
    rng = np.random.default_rng(seed)
    cam = default_cam(64, 64)
    n = int(rng.integers(5, 100))
    u, r, s, alpha, colors = random_scene(rng, n)
    bg = rng.uniform(0, 1, 3)
    tiled, _ = render_splats(u, r, s, alpha, colors, cam, bg)
    ref, _ = render_splats(u, r, s, alpha, colors, cam, bg, reference=True)
    assert np.array_equal(tiled, ref)


def test_tile_renderer_thread_count_invariant():
    rng = np.random.default_rng(11)
    cam = default_cam(48, 48)
    u, r, s, alpha, colors = random_scene(rng, 60)
    bg = np.array([0.1, 0.1, 0.1])
    img1, _ = render_splats(u, r, s, alpha, colors, cam, bg, n_threads=1)
    img4, _ = render_splats(u, r, s, alpha, colors, cam, bg, n_threads=4)
    assert np.array_equal(img1, img4)


def test_rendered_values_stay_in_unit_range():
    rng = np.random.default_rng(12)
    cam = default_cam(32, 32)
    u, r, s, alpha, colors = random_scene(rng, 80)
    img, _ = render_splats(u, r, s, alpha, colors, cam, np.array([0.0, 0.5, 1.0]))
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_semantic_render_independent_of_sh():
    rng = np.random.default_rng(13)
    cam = default_cam(32, 32)
    u, r, s, alpha, _ = random_scene(rng, 40)
    parent = rng.integers(0, 10, 40)
    categories = rng.integers(0, 4, 10)
    colors = semantic_colors(parent, categories)
    img1, _ = render_splats(u, r, s, alpha, colors, cam, np.zeros(3))
    # changing kappa has no path into the semantic render
    img2, _ = render_splats(u, r, s, alpha, colors.copy(), cam, np.zeros(3))
    assert np.array_equal(img1, img2)


def test_sh_colors_order0_and_clamp():
    cam = default_cam()
    k0 = np.array([[0.0, 0.0, 0.0], [10.0, -10.0, 0.5]])
    rest = np.zeros((2, 0, 3))
    colors, _ = sh_colors(np.zeros((2, 3)), k0, rest, cam)
    assert np.allclose(colors[0], [0.5, 0.5, 0.5])
    assert colors[1, 0] == 1.0 and colors[1, 1] == 0.0


def test_sh_colors_backward_matches_fd():
    rng = np.random.default_rng(14)
    cam = default_cam()
    n = 5
    u = rng.uniform(-0.5, 0.5, (n, 3))
    k0 = rng.normal(0, 0.2, (n, 3))
    rest = rng.normal(0, 0.1, (n, 3, 3))
    up = rng.normal(size=(n, 3))

    def f(u_, k0_, rest_):
        c, _ = sh_colors(u_, k0_, rest_, cam)
        return float(np.sum(c * up))

    _, cache = sh_colors(u, k0, rest, cam)
    d_k0, d_rest, d_u = sh_colors_backward(rest, cache, up)
    h = 1e-6
    for arr, grad in ((k0, d_k0), (rest, d_rest), (u, d_u)):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            ap, am = arr.copy(), arr.copy()
            ap[idx] += h
            am[idx] -= h
            vals_p = [ap if v is arr else v for v in (u, k0, rest)]
            vals_m = [am if v is arr else v for v in (u, k0, rest)]
            fd = (f(*vals_p) - f(*vals_m)) / (2 * h)
            assert abs(grad[idx] - fd) < 1e-5


def test_rasterize_backward_matches_fd():
    rng = np.random.default_rng(15)
    cam = default_cam(24, 24)
    n = 8
    u, r, s, alpha, colors = random_scene(rng, n)
    alpha = rng.uniform(0.3, 0.85, n)  # keep away from clamp and skip boundaries
    splats = project(u, r, s, cam)
    d_img = rng.normal(size=(24, 24, 3))

    img, cap = rasterize(splats, alpha, colors, 24, 24, np.zeros(3), capture=True)
    grads = rasterize_backward(splats, alpha, colors, cap, d_img)

    def objective(mean2d=None, cov2d=None, al=None, col=None):
        m = splats.mean2d if mean2d is None else mean2d
        c2 = splats.cov2d if cov2d is None else cov2d
        det = c2[:, 0, 0] * c2[:, 1, 1] - c2[:, 0, 1] * c2[:, 1, 0]
        conic = np.empty_like(c2)
        conic[:, 0, 0] = c2[:, 1, 1] / det
        conic[:, 1, 1] = c2[:, 0, 0] / det
        conic[:, 0, 1] = -c2[:, 0, 1] / det
        conic[:, 1, 0] = -c2[:, 1, 0] / det
        sp = ProjectedSplats(mean2d=m, cov2d=c2, conic=conic, depth=splats.depth,
                             visible=splats.visible, t_cam=splats.t_cam)
        image, _ = rasterize(sp, alpha if al is None else al,
                             colors if col is None else col, 24, 24, np.zeros(3))
        return float(np.sum(image * d_img))

    h = 1e-5
    for i in range(n):
        for c in range(2):
            mp, mm = splats.mean2d.copy(), splats.mean2d.copy()
            mp[i, c] += h
            mm[i, c] -= h
            fd = (objective(mean2d=mp) - objective(mean2d=mm)) / (2 * h)
            assert abs(grads["mean2d"][i, c] - fd) < 1e-3 * max(1.0, abs(fd))
        ap, am = alpha.copy(), alpha.copy()
        ap[i] += h
        am[i] -= h
        fd = (objective(al=ap) - objective(al=am)) / (2 * h)
        assert abs(grads["alpha"][i] - fd) < 1e-3 * max(1.0, abs(fd))
        for a_ in range(2):
            for b_ in range(2):
                cp, cm = splats.cov2d.copy(), splats.cov2d.copy()
                cp[i, a_, b_] += h
                cm[i, a_, b_] -= h
                fd = (objective(cov2d=cp) - objective(cov2d=cm)) / (2 * h)
                assert abs(grads["cov2d"][i, a_, b_] - fd) < 2e-3 * max(1.0, abs(fd))
        for c in range(3):
            cp, cm = colors.copy(), colors.copy()
            cp[i, c] += h
            cm[i, c] -= h
            fd = (objective(col=cp) - objective(col=cm)) / (2 * h)
            assert abs(grads["colors"][i, c] - fd) < 1e-4 * max(1.0, abs(fd))


# --- inpaint compositing ------------------------------------------------------


def test_inpaint_zero_mask_returns_original():
    rng = np.random.default_rng(16)
    ori = rng.uniform(0, 1, (8, 8, 3))
    gau = rng.uniform(0, 1, (8, 8, 3))
    out = composite_inpaint(ori, gau, np.zeros((8, 8)))
    assert np.array_equal(out, ori)


def test_inpaint_full_mask_returns_render():
    rng = np.random.default_rng(17)
    ori = rng.uniform(0, 1, (8, 8, 3))
    gau = rng.uniform(0, 1, (8, 8, 3))
    out = composite_inpaint(ori, gau, np.ones((8, 8)))
    assert np.array_equal(out, gau)


def test_inpaint_half_mask_blends():
    # literal evaluation of I = (1-M) I_ori + M (I_gau + (1-M) I_ori) at M=0.5
    rng = np.random.default_rng(18)
    ori = rng.uniform(0, 1, (4, 4, 3))
    gau = rng.uniform(0, 1, (4, 4, 3))
    out = composite_inpaint(ori, gau, np.full((4, 4), 0.5))
    assert np.allclose(out, 0.75 * ori + 0.5 * gau, atol=1e-12)


def test_inpaint_dimension_mismatch():
    with pytest.raises(ValueError):
        composite_inpaint(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)), np.zeros((4, 4)))


def test_inpaint_custom_refiner():
    ori = np.zeros((4, 4, 3))
    gau = np.full((4, 4, 3), 0.5)
    out = composite_inpaint(ori, gau, np.ones((4, 4)), refiner=lambda img: img * 0.5)
    assert np.allclose(out, 0.25)
