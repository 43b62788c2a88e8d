"""Ray generation round trips, march mechanics, and end-to-end render
differentiability on tiny images."""

import numpy as np
import pytest

from artifield import gradcore as gc
from artifield import worldgen as wg
from artifield.gradcore import Tensor, backward
from artifield.neuralfield import (
    ArchConfig,
    LatentCode,
    ModelWeights,
    articulation_to_code,
    code_features_t,
    hyper_map,
)
from artifield.raymarch import (
    MarchResult,
    RayBatch,
    march,
    march_bounds,
    pixel_ray,
    pixel_rays,
    render_image,
    render_rays,
    render_segmentation,
)

from test_gradcore import finite_diff_grad, max_rel_err

TINY = ArchConfig(k_obj=4, feature_dim=6, field_hidden=8, hyper_hidden=10,
                  rgb_hidden=6, seg_hidden=6, kp_hidden=8, lstm_hidden=4, n_march=3)


def tiny_weights(seed=0):
    return ModelWeights.init(TINY, np.random.default_rng(seed))


def offset_identity_extrinsic(dist=2.0):
    """Camera at (0, 0, -dist) looking along +z with identity rotation."""
    e = np.hstack([np.eye(3), np.array([[0.0], [0.0], [dist]])])
    return e


# ---------------------------------------------------------------------------
# rays


def test_principal_ray_points_forward():
    h = w = 17  # odd: center pixel's center coincides with the principal point
    k = wg.make_intrinsics(h, w)
    e = offset_identity_extrinsic()
    ray = pixel_ray(e, k, u=w // 2, v=h // 2)
    np.testing.assert_allclose(ray.direction, [0.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(ray.origin, [0.0, 0.0, -2.0], atol=1e-12)


def test_all_rays_unit_norm():
    m = wg.sample_scene(0, "closet")
    rng = np.random.default_rng(1)
    e, k = wg.sample_camera(rng, m, 128, 128)
    batch = pixel_rays(e, k, 128, 128)
    np.testing.assert_allclose(np.linalg.norm(batch.dirs, axis=1), 1.0, atol=1e-12)
    assert batch.count == 128 * 128


def test_singular_intrinsics_rejected():
    e = offset_identity_extrinsic()
    k = np.array([[0.0, 0.0, 8.0], [0.0, 10.0, 8.0], [0.0, 0.0, 1.0]])
    with pytest.raises(ValueError):
        pixel_ray(e, k, 3, 3)


def test_projection_ray_round_trip():
    """Project 100 random points, cast the containing pixel's ray: the point
    must sit within half the pixel's diagonal footprint at its depth."""
    m = wg.sample_scene(2, "closet")
    rng = np.random.default_rng(3)
    e, k = wg.sample_camera(rng, m, 64, 64)
    f = k[0, 0]
    origin = wg.camera_center(e)
    checked = 0
    for _ in range(200):
        p = rng.uniform(-0.4, 0.4, size=3)
        uv, z = wg.project_points(e, k, p)
        u, v = int(uv[0, 0]), int(uv[0, 1])
        if not (0 <= u < 64 and 0 <= v < 64) or z[0] <= 0:
            continue
        ray = pixel_ray(e, k, u, v)
        to_p = p - origin
        dist_along = to_p @ ray.direction
        perp = np.linalg.norm(to_p - dist_along * ray.direction)
        footprint = z[0] * np.sqrt(2.0) / f
        assert perp <= footprint / 2.0 + 1e-12
        checked += 1
    assert checked >= 100


def test_keypoint_pixel_ray_round_trip():
    """The ray of the handle keypoint's pixel passes within half a pixel
    footprint of the keypoint itself."""
    m = wg.sample_scene(4, "closet")
    rng = np.random.default_rng(5)
    e, k = wg.sample_camera(rng, m, 96, 96)
    for q in (0.0, 0.5, 1.0):
        kp = wg.keypoints_analytic(m, q)["handle"]
        uv, z = wg.project_points(e, k, kp)
        u, v = int(uv[0, 0]), int(uv[0, 1])
        if not (0 <= u < 96 and 0 <= v < 96):
            continue
        ray = pixel_ray(e, k, u, v)
        to_p = kp - ray.origin
        perp = np.linalg.norm(to_p - (to_p @ ray.direction) * ray.direction)
        assert perp <= z[0] * np.sqrt(2.0) / k[0, 0] / 2.0 + 1e-12


def test_march_bounds_positive_and_ordered():
    near, far = march_bounds(np.array([0.0, -2.0, 0.5]), 1.5)
    assert 0 < near < far


# ---------------------------------------------------------------------------
# march


def _ray_batch(n=5, seed=0):
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.tile(np.array([0.0, -2.0, 0.3]), (n, 1))
    return RayBatch(origins=origins, dirs=dirs,
                    d_near=np.full((n, 1), 0.5), d_far=np.full((n, 1), 3.5))


def test_march_zero_weights_fixed_bias_step():
    w = tiny_weights()
    rm = w.raymarcher
    rm.lstm.w.data[:] = 0.0
    rm.lstm.b.data[:] = 0.0
    rm.step_w.data[:] = 0.0
    rm.step_b.data[:] = 0.0
    theta = Tensor(np.zeros(TINY.field_param_count))
    rays = _ray_batch()
    result = march(theta, rm, rays, TINY)
    # every step is softplus(0) = ln 2
    expected = 0.5 + TINY.n_march * np.log(2.0)
    np.testing.assert_allclose(result.d_final.data, expected, atol=1e-12)
    np.testing.assert_allclose(
        result.x_surface.data, rays.origins + expected * rays.dirs, atol=1e-12)


def test_march_deterministic_for_identical_rays():
    w = tiny_weights(1)
    feats = code_features_t(Tensor(articulation_to_code(0.3)), Tensor(np.zeros(TINY.k_obj)))
    theta = hyper_map(w.hyper, feats)
    rays = _ray_batch(2, seed=7)
    rays.dirs[1] = rays.dirs[0]
    result = march(theta, w.raymarcher, rays, TINY)
    assert result.d_final.data[0] == result.d_final.data[1]
    np.testing.assert_array_equal(result.v_final.data[0], result.v_final.data[1])


def test_march_depths_monotone():
    w = tiny_weights(2)
    theta = Tensor(np.random.default_rng(3).normal(size=TINY.field_param_count) * 0.1)
    result = march(theta, w.raymarcher, _ray_batch(4, seed=9), TINY)
    prev = np.full((4, 1), 0.5)
    for d in result.step_depths:
        assert np.all(d.data > prev)
        prev = d.data


def test_march_gradient_wrt_raymarcher_params():
    w = tiny_weights(4)
    rm = w.raymarcher
    theta = Tensor(np.random.default_rng(5).normal(size=TINY.field_param_count) * 0.2)
    rays = _ray_batch(3, seed=11)

    packs = [rm.lstm.w, rm.lstm.b, rm.step_w, rm.step_b]
    flat0 = np.concatenate([p.data.ravel() for p in packs])
    sizes = [p.data.size for p in packs]

    def loss_np(flat):
        saved = [p.data.copy() for p in packs]
        off = 0
        for p, n in zip(packs, sizes):
            p.data = flat[off:off + n].reshape(p.data.shape)
            off += n
        try:
            res = march(theta, rm, rays, TINY)
            return float(res.d_final.data.sum())
        finally:
            for p, s in zip(packs, saved):
                p.data = s

    res = march(theta, rm, rays, TINY)
    backward(gc.tsum(res.d_final))
    analytic = np.concatenate([p.grad.ravel() for p in packs])
    fd = finite_diff_grad(loss_np, flat0)
    assert max_rel_err(analytic, fd) < 1e-4


# ---------------------------------------------------------------------------
# rendering


def test_render_zeroed_hypernetwork_constant_image():
    w = tiny_weights(6)
    for wt, bt in w.hyper:
        wt.data[:] = 0.0
        bt.data[:] = 0.0
    code = LatentCode.from_articulation(0.2, np.random.default_rng(7).normal(size=TINY.k_obj))
    e = offset_identity_extrinsic()
    img = render_image(w, code, e, wg.make_intrinsics(8, 8), 8, 8)
    assert np.ptp(img.reshape(-1, 3), axis=0).max() < 1e-12


def test_render_bit_identical_repeat():
    w = tiny_weights(8)
    code = LatentCode.from_articulation(0.6, np.random.default_rng(9).normal(size=TINY.k_obj))
    m = wg.sample_scene(0, "closet")
    e, k = wg.sample_camera(np.random.default_rng(10), m, 8, 8)
    img1 = render_image(w, code, e, k, 8, 8)
    img2 = render_image(w, code, e, k, 8, 8)
    assert img1.tobytes() == img2.tobytes()


def test_render_segmentation_uniform_logits_tie_break():
    w = tiny_weights(11)
    for wt, bt in w.seg:
        wt.data[:] = 0.0
        bt.data[:] = 0.0
    code = LatentCode.from_articulation(0.5, np.zeros(TINY.k_obj))
    e = offset_identity_extrinsic()
    seg, logits = render_segmentation(w, code, e, wg.make_intrinsics(8, 8), 8, 8)
    assert np.all(seg == 0)
    np.testing.assert_array_equal(logits, np.zeros_like(logits))


def test_render_segmentation_argmax_shift_invariant():
    w = tiny_weights(12)
    code = LatentCode.from_articulation(0.1, np.random.default_rng(13).normal(size=TINY.k_obj))
    e = offset_identity_extrinsic()
    k = wg.make_intrinsics(8, 8)
    seg, logits = render_segmentation(w, code, e, k, 8, 8)
    np.testing.assert_array_equal(seg, np.argmax(logits + 5.0, axis=2).astype(np.uint8))


def test_render_rays_graph_chunking_consistency():
    w = tiny_weights(14)
    code = LatentCode.from_articulation(0.4, np.random.default_rng(15).normal(size=TINY.k_obj))
    e = offset_identity_extrinsic()
    k = wg.make_intrinsics(8, 8)
    whole = render_image(w, code, e, k, 8, 8, chunk=4096)
    pieces = render_image(w, code, e, k, 8, 8, chunk=7)
    np.testing.assert_allclose(whole, pieces, rtol=1e-12, atol=1e-14)


def test_full_render_gradient_wrt_latent_code():
    """End-to-end differentiability: 4x4 render, loss gradient wrt z within
    1e-3 of finite differences (deep unrolled graph, looser tolerance)."""
    w = tiny_weights(16)
    rng = np.random.default_rng(17)
    z0 = np.concatenate([articulation_to_code(0.3), rng.normal(size=TINY.k_obj) * 0.3])
    target = rng.uniform(0, 1, size=(16, 3))
    e = offset_identity_extrinsic()
    k = wg.make_intrinsics(4, 4)
    rays = pixel_rays(e, k, 4, 4, scene_radius=TINY.scene_radius)

    def loss_np(z):
        with gc.no_grad():
            feats = code_features_t(Tensor(z[:2]), Tensor(z[2:]))
            theta = hyper_map(w.hyper, feats)
            rgb, _, _ = render_rays(w, theta, rays, want_seg=False)
        return float(((rgb.data - target) ** 2).mean())

    za = Tensor(z0[:2], requires_grad=True)
    zo = Tensor(z0[2:], requires_grad=True)
    theta = hyper_map(w.hyper, code_features_t(za, zo))
    rgb, _, _ = render_rays(w, theta, rays, want_seg=False)
    loss = gc.mse(rgb, target)
    backward(loss)
    analytic = np.concatenate([za.grad, zo.grad])
    fd = finite_diff_grad(loss_np, z0)
    assert max_rel_err(analytic, fd) < 1e-3
