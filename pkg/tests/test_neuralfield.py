"""Latent code algebra (exact properties) and gradient checks for the
hypernetwork, field and heads."""

import numpy as np
import pytest

from artifield import gradcore as gc
from artifield import neuralfield as nf
from artifield.gradcore import Tensor, backward
from artifield.neuralfield import (
    ArchConfig,
    LatentCode,
    ModelWeights,
    articulation_to_code,
    code_features_t,
    field_eval,
    hyper_map,
    keypoint_head,
    keypoint_predict,
    normalize_articulation,
    rgb_head,
    seg_head,
)

from test_gradcore import finite_diff_grad, max_rel_err

TINY = ArchConfig(k_obj=4, feature_dim=6, field_hidden=8, hyper_hidden=10,
                  rgb_hidden=6, seg_hidden=6, kp_hidden=8, lstm_hidden=4, n_march=3)


# ---------------------------------------------------------------------------
# articulation code


def test_normalize_closed_pose():
    z_hat, q = normalize_articulation(np.array([2.0, 0.0]))
    np.testing.assert_array_equal(z_hat, [1.0, 0.0])
    assert q == 0.0


def test_normalize_antipode_fully_open():
    z_hat, q = normalize_articulation(np.array([-3.0, 0.0]))
    np.testing.assert_array_equal(z_hat, [-1.0, 0.0])
    assert q == 1.0


def test_normalize_mirror_halves_agree():
    _, q_up = normalize_articulation(np.array([0.0, 1.0]))
    _, q_dn = normalize_articulation(np.array([0.0, -1.0]))
    assert q_up == q_dn == 0.5


def test_normalize_mirror_symmetry_exact_property():
    rng = np.random.default_rng(0)
    for _ in range(500):
        x, y = rng.normal(size=2)
        if abs(x) + abs(y) < 1e-6:
            continue
        _, q1 = normalize_articulation(np.array([x, y]))
        _, q2 = normalize_articulation(np.array([x, -y]))
        assert q1 == q2


def test_normalize_degenerate_fallback():
    z_hat, q = normalize_articulation(np.array([1e-12, -1e-12]))
    np.testing.assert_array_equal(z_hat, [1.0, 0.0])
    assert q == 0.0


def test_normalize_continuity_lipschitz():
    # |q(phi) - q(phi + d)| <= d/2 along the circle
    phis = np.linspace(0, 2 * np.pi, 2000)
    qs = np.array([normalize_articulation(np.array([np.cos(p), np.sin(p)]))[1]
                   for p in phis])
    dq = np.abs(np.diff(qs))
    dphi = np.diff(phis)
    assert np.all(dq <= dphi / 2.0 + 1e-12)


def test_articulation_code_endpoints():
    np.testing.assert_array_equal(articulation_to_code(0.0), [1.0, 0.0])
    np.testing.assert_array_equal(articulation_to_code(1.0), [-1.0, 0.0])


def test_articulation_code_out_of_range():
    with pytest.raises(ValueError):
        articulation_to_code(-0.01)
    with pytest.raises(ValueError):
        articulation_to_code(1.01)


def test_articulation_round_trip_101_values():
    for q in np.linspace(0.0, 1.0, 101):
        _, q_back = normalize_articulation(articulation_to_code(float(q)))
        assert abs(q_back - q) < 1e-12


def test_latent_code_features_layout():
    code = LatentCode.from_articulation(0.25, np.arange(4.0))
    assert code.features.shape == (6,)
    np.testing.assert_allclose(code.features[:2], articulation_to_code(0.25))
    np.testing.assert_array_equal(code.features[2:], np.arange(4.0))
    assert abs(code.q - 0.25) < 1e-12


# ---------------------------------------------------------------------------
# hypernetwork


def _weights(seed=0, arch=TINY):
    return ModelWeights.init(arch, np.random.default_rng(seed))


def test_hyper_scale_invariance_exact():
    w = _weights()
    z_obj = np.random.default_rng(1).normal(size=TINY.k_obj)
    z_art = np.array([0.6, -0.8])
    th1 = hyper_map(w.hyper, code_features_t(Tensor(z_art), Tensor(z_obj)))
    th2 = hyper_map(w.hyper, code_features_t(Tensor(4.0 * z_art), Tensor(z_obj)))
    assert th1.data.tobytes() == th2.data.tobytes()


def test_hyper_zeroed_final_layer_returns_bias():
    w = _weights()
    w.hyper[-1][0].data[:] = 0.0
    bias = w.hyper[-1][1].data
    for q in (0.0, 0.4, 1.0):
        code = LatentCode.from_articulation(q, np.random.default_rng(2).normal(size=TINY.k_obj))
        th = hyper_map(w.hyper, code_features_t(Tensor(code.z_art), Tensor(code.z_obj)))
        np.testing.assert_array_equal(th.data, bias)


def test_hyper_gradient_wrt_latent_code():
    w = _weights(3)
    z0 = np.random.default_rng(4).normal(size=TINY.latent_dim)

    def loss_np(z):
        za, zo = Tensor(z[:2]), Tensor(z[2:])
        th = hyper_map(w.hyper, code_features_t(za, zo))
        return float((th.data ** 2).sum())

    za = Tensor(z0[:2], requires_grad=True)
    zo = Tensor(z0[2:], requires_grad=True)
    th = hyper_map(w.hyper, code_features_t(za, zo))
    backward(gc.tsum(gc.square(th)))
    analytic = np.concatenate([za.grad, zo.grad])
    fd = finite_diff_grad(loss_np, z0)
    assert max_rel_err(analytic, fd) < 1e-4


# ---------------------------------------------------------------------------
# field and heads


def test_field_eval_deterministic_and_batched():
    w = _weights(5)
    feats = code_features_t(Tensor(articulation_to_code(0.3)),
                            Tensor(np.zeros(TINY.k_obj)))
    theta = hyper_map(w.hyper, feats)
    pts = np.random.default_rng(6).normal(size=(100, 3))
    v_batch = field_eval(theta, pts, TINY)
    v_again = field_eval(theta, pts, TINY)
    assert v_batch.data.tobytes() == v_again.data.tobytes()
    for i in (0, 17, 99):
        v_one = field_eval(theta, pts[i:i + 1], TINY)
        # BLAS may pick different kernels per batch shape; agreement is to
        # rounding, not bit level
        np.testing.assert_allclose(v_one.data[0], v_batch.data[i], rtol=1e-13, atol=1e-15)


def test_field_gradient_wrt_position():
    w = _weights(7)
    theta = hyper_map(w.hyper, code_features_t(
        Tensor(articulation_to_code(0.5)), Tensor(np.zeros(TINY.k_obj)))).detach()
    x0 = np.array([0.2, -0.4, 0.1])

    def loss_np(x):
        return float(field_eval(theta, x.reshape(1, 3), TINY).data.sum())

    xt = Tensor(x0.reshape(1, 3), requires_grad=True)
    backward(gc.tsum(field_eval(theta, xt, TINY)))
    fd = finite_diff_grad(loss_np, x0)
    assert max_rel_err(xt.grad.ravel(), fd) < 1e-4


def test_field_wrong_theta_length_rejected():
    with pytest.raises(gc.ShapeMismatchError):
        field_eval(Tensor(np.zeros(10)), np.zeros((1, 3)), TINY)


def test_rgb_head_zero_weights_give_half():
    layers = [(Tensor(np.zeros((6, 4))), Tensor(np.zeros(4))),
              (Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))]
    out = rgb_head(layers, Tensor(np.random.default_rng(0).normal(size=(5, 6))))
    np.testing.assert_array_equal(out.data, np.full((5, 3), 0.5))


def test_rgb_head_bounded():
    w = _weights(8)
    v = Tensor(np.random.default_rng(9).normal(size=(1000, TINY.feature_dim)) * 3)
    out = rgb_head(w.rgb, v)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_rgb_head_gradient():
    w = _weights(10)
    v0 = np.random.default_rng(11).normal(size=(2, TINY.feature_dim))

    def loss_np(flat):
        return float((rgb_head(w.rgb, Tensor(flat.reshape(2, -1))).data ** 2).sum())

    vt = Tensor(v0, requires_grad=True)
    backward(gc.tsum(gc.square(rgb_head(w.rgb, vt))))
    fd = finite_diff_grad(loss_np, v0.ravel())
    assert max_rel_err(vt.grad.ravel(), fd) < 1e-4


def test_seg_head_uniform_logits_for_zero_weights():
    layers = [(Tensor(np.zeros((6, 4))), Tensor(np.zeros(4))),
              (Tensor(np.zeros((4, 4))), Tensor(np.zeros(4)))]
    logits = seg_head(layers, Tensor(np.ones((3, 6))))
    np.testing.assert_array_equal(logits.data, np.zeros((3, 4)))


def test_seg_argmax_shift_invariant():
    w = _weights(12)
    v = Tensor(np.random.default_rng(13).normal(size=(20, TINY.feature_dim)))
    logits = seg_head(w.seg, v).data
    shifted = logits + 3.7
    np.testing.assert_array_equal(np.argmax(logits, axis=1), np.argmax(shifted, axis=1))


def test_seg_cross_entropy_gradient():
    w = _weights(14)
    v0 = np.random.default_rng(15).normal(size=(6, TINY.feature_dim))
    labels = np.arange(6) % 4

    def loss_np(flat):
        logits = seg_head(w.seg, Tensor(flat.reshape(6, -1))).data
        logits = logits - logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(6), labels].mean())

    vt = Tensor(v0, requires_grad=True)
    backward(gc.cross_entropy_logits(seg_head(w.seg, vt), labels))
    fd = finite_diff_grad(loss_np, v0.ravel())
    assert max_rel_err(vt.grad.ravel(), fd) < 1e-4


# ---------------------------------------------------------------------------
# keypoint head


def test_keypoint_scale_invariance():
    w = _weights(16)
    z_obj = np.random.default_rng(17).normal(size=TINY.k_obj)
    k1 = keypoint_predict(w, LatentCode(np.array([0.3, 0.4]), z_obj))
    k2 = keypoint_predict(w, LatentCode(np.array([0.6, 0.8]), z_obj))
    assert k1.positions.tobytes() == k2.positions.tobytes()


def test_keypoint_predict_deterministic_and_named():
    w = _weights(18)
    code = LatentCode.from_articulation(0.7, np.zeros(TINY.k_obj))
    k1 = keypoint_predict(w, code)
    k2 = keypoint_predict(w, code)
    assert k1.names == ("handle", "hinge_top", "hinge_bottom", "goal")
    np.testing.assert_array_equal(k1.positions, k2.positions)


def test_keypoint_dimension_mismatch():
    w = _weights(19)
    with pytest.raises(gc.ShapeMismatchError):
        keypoint_predict(w, LatentCode(np.array([1.0, 0.0]), np.zeros(TINY.k_obj + 3)))


def test_keypoint_gradient_wrt_weights_and_code():
    w = _weights(20)
    target = np.random.default_rng(21).normal(size=(TINY.n_keypoints, 3))
    z0 = np.random.default_rng(22).normal(size=TINY.latent_dim)
    kw0, kb0 = w.keypoint[0][0].data.copy(), None

    def loss_np(z):
        feats = code_features_t(Tensor(z[:2]), Tensor(z[2:]))
        pts = keypoint_head(w.keypoint, feats, TINY).data
        return float(((pts - target) ** 2).sum())

    za = Tensor(z0[:2], requires_grad=True)
    zo = Tensor(z0[2:], requires_grad=True)
    pts = keypoint_head(w.keypoint, code_features_t(za, zo), TINY)
    loss = gc.tsum(gc.square(gc.sub(pts, target)))
    backward(loss)
    fd = finite_diff_grad(loss_np, z0)
    assert max_rel_err(np.concatenate([za.grad, zo.grad]), fd) < 1e-4
    # weight gradient on the first layer too
    g_first = w.keypoint[0][0].grad
    assert g_first is not None

    def loss_np_w(flat):
        w.keypoint[0][0].data = flat.reshape(kw0.shape)
        try:
            feats = code_features_t(Tensor(z0[:2]), Tensor(z0[2:]))
            pts = keypoint_head(w.keypoint, feats, TINY).data
            return float(((pts - target) ** 2).sum())
        finally:
            w.keypoint[0][0].data = kw0.copy()

    fd_w = finite_diff_grad(loss_np_w, kw0.ravel())
    assert max_rel_err(g_first.ravel(), fd_w) < 1e-4


def test_named_parameters_fixed_order():
    w = _weights(23)
    names = [n for n, _ in w.named_parameters()]
    assert names[0] == "hyper.0.w"
    assert names[-1] == "raymarcher.step.b"
    assert len(names) == len(set(names))
    assert names == [n for n, _ in w.named_parameters()]
