"""Tape engine: primitive oracles, finite-difference checks, Adam, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfgen import autodiff as ad


def t(data, rg=False):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------------------
# Hand-computed forward oracles
# ---------------------------------------------------------------------------

def test_add_elementwise():
    assert ad.add(t([1.0, 2.0]), t([3.0, 4.0])).data.tolist() == [4.0, 6.0]


def test_matmul_hand_oracle():
    out = ad.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[5.0, 6.0], [7.0, 8.0]]))
    assert out.data.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_conv3d_identity_kernel():
    rng = np.random.default_rng(0)
    x = t(rng.standard_normal((2, 1, 4, 4, 4)))
    w = t(np.ones((1, 1, 1, 1, 1)))
    out = ad.conv3d(x, w, stride=1, pad=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_shape_mismatch_reports_dimensions():
    with pytest.raises(ad.ShapeError) as ei:
        ad.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))
    assert "(2, 3)" in str(ei.value)


def test_non_finite_output_rejected():
    big = t(np.array([1e308]))
    with pytest.raises(ad.NonFiniteError):
        ad.mul(big, big)


def test_unknown_primitive_rejected():
    with pytest.raises(ad.ShapeError):
        ad.apply_primitive("definitely_not_registered", (t([1.0]),))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_square():
    x = t(3.0, rg=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    grads = ad.backward(tape, y)
    assert grads[x] == pytest.approx(6.0, abs=0)


def test_backward_softmax_sum_is_zero():
    v = t(np.array([0.3, -1.2, 2.0]), rg=True)
    with ad.Tape() as tape:
        y = ad.tsum(ad.softmax(v))
    grads = ad.backward(tape, y)
    np.testing.assert_array_equal(grads[v], np.zeros(3))


def test_backward_rejects_non_scalar_loss():
    x = t(np.ones(3), rg=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, y)


def test_backward_unreached_tensor_gets_zero():
    x = t(np.ones(2), rg=True)
    unused = t(np.ones(4), rg=True)
    with ad.Tape() as tape:
        y = ad.tsum(ad.mul(x, x))
        _ = ad.mul(unused, unused)  # on the tape, off the loss path
    grads = ad.backward(tape, y)
    np.testing.assert_array_equal(grads[unused], np.zeros(4))


def test_backward_is_linear_in_loss():
    rng = np.random.default_rng(3)
    x = t(rng.standard_normal((3, 3)), rg=True)
    c1 = t(rng.standard_normal((3, 3)))
    c2 = t(rng.standard_normal((3, 3)))
    a, b = 1.7, -0.4

    def run(fa, fb):
        with ad.Tape() as tape:
            l1 = ad.tsum(ad.mul(ad.silu(x), c1))
            l2 = ad.tsum(ad.mul(ad.tanh(x), c2))
            loss = ad.add(ad.scale(l1, fa), ad.scale(l2, fb))
        return ad.backward(tape, loss)[x]

    combined = run(a, b)
    separate = a * run(1.0, 0.0) + b * run(0.0, 1.0)
    np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-10)


def test_conv3d_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = t(rng.standard_normal((1, 2, 5, 5, 5)))
    w = t(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3)
    err = ad.grad_check(lambda xx: ad.tsum(ad.conv3d(xx, w, stride=2, pad=1)), x, step=1e-5)
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# grad_check over every registered primitive
# ---------------------------------------------------------------------------

def _const(rng, shape):
    return ad.constant(rng.standard_normal(shape))


# Builders return (scalar-valued function, input shape). Shapes stay tiny so
# the whole sweep runs in seconds. stop_gradient / straight_through are
# excluded: their whole point is a gradient that differs from the numeric one.
def _primitive_cases(rng):
    c23 = _const(rng, (2, 3))
    c34 = _const(rng, (3, 4))
    c24 = _const(rng, (2, 4))
    c6 = _const(rng, (6,))
    c32 = _const(rng, (3, 2))
    c43 = _const(rng, (4, 3))
    c2 = _const(rng, (2,))
    c33 = _const(rng, (3, 3))
    w2 = ad.constant(rng.standard_normal((2, 2, 3, 3)) * 0.4)
    w3 = ad.constant(rng.standard_normal((2, 2, 3, 3, 3)) * 0.4)
    w3t = ad.constant(rng.standard_normal((2, 3, 2, 2, 2)) * 0.4)
    c2d = _const(rng, (1, 2, 3, 3))
    c3d = _const(rng, (1, 2, 4, 4, 4))
    c2u = _const(rng, (1, 2, 5, 5))
    c3u = _const(rng, (1, 3, 6, 6, 6))
    gn_g = ad.constant(rng.standard_normal(4))
    gn_b = ad.constant(rng.standard_normal(4))
    gn_c = _const(rng, (2, 4, 3, 3))
    att_k = _const(rng, (2, 5, 4))
    att_v = _const(rng, (2, 5, 5))
    att_c = _const(rng, (2, 3, 5))
    tri_pts = rng.uniform(0, 2, (6, 3))
    tri_c = _const(rng, (6, 2))
    mix_src = rng.integers(0, 9, 12)
    mix_dst = rng.integers(0, 4, 12)
    mix_w = rng.standard_normal(12)
    mix_c = _const(rng, (4, 2))
    return {
        "add": (lambda x: ad.tsum(ad.mul(ad.add(x, c23), c23)), (3,)),
        "mul": (lambda x: ad.tsum(ad.mul(ad.mul(x, c23), c23)), (2, 3)),
        "scale": (lambda x: ad.tsum(ad.scale(x, -2.5)), (4,)),
        "matmul": (lambda x: ad.tsum(ad.mul(ad.matmul(x, c34), c24)), (2, 3)),
        "reshape": (lambda x: ad.tsum(ad.mul(ad.reshape(x, (6,)), c6)), (2, 3)),
        "transpose": (lambda x: ad.tsum(ad.mul(ad.transpose(x, (1, 0)), c32)), (2, 3)),
        "concat": (lambda x: ad.tsum(ad.mul(ad.concat([x, c23], axis=0), c43)), (2, 3)),
        "sum": (lambda x: ad.tsum(ad.mul(ad.tsum(x, axis=1), c2)), (2, 3)),
        "silu": (lambda x: ad.tsum(ad.mul(ad.silu(x), c23)), (2, 3)),
        "tanh": (lambda x: ad.tsum(ad.mul(ad.tanh(x), c23)), (2, 3)),
        "softmax": (lambda x: ad.tsum(ad.mul(ad.softmax(x, axis=-1), c23)), (2, 3)),
        "mse": (lambda x: ad.mse(x, c23), (2, 3)),
        "l1": (lambda x: ad.l1(x, c23), (2, 3)),
        "embedding_lookup": (
            lambda x: ad.tsum(ad.mul(ad.embedding_lookup(x, np.array([0, 2, 2])), c33)),
            (4, 3)),
        "conv2d": (
            lambda x: ad.tsum(ad.mul(ad.conv2d(x, w2, stride=2, pad=1), c2d)),
            (1, 2, 5, 5)),
        "conv3d": (
            lambda x: ad.tsum(ad.mul(ad.conv3d(x, w3, stride=1, pad=1), c3d)),
            (1, 2, 4, 4, 4)),
        "conv_transpose2d": (
            lambda x: ad.tsum(ad.mul(ad.conv_transpose2d(x, w2, stride=2, pad=1), c2u)),
            (1, 2, 3, 3)),
        "conv_transpose3d": (
            lambda x: ad.tsum(ad.mul(ad.conv_transpose3d(x, w3t, stride=2, pad=0), c3u)),
            (1, 2, 3, 3, 3)),
        "group_norm": (
            lambda x: ad.tsum(ad.mul(ad.group_norm(x, gn_g, gn_b, groups=2), gn_c)),
            (2, 4, 3, 3)),
        "scaled_dot_attention": (
            lambda x: ad.tsum(ad.mul(ad.scaled_dot_attention(x, att_k, att_v), att_c)),
            (2, 3, 4)),
        "trilinear_sample": (
            lambda x: ad.tsum(ad.mul(ad.trilinear_sample(x, tri_pts), tri_c)),
            (2, 3, 3, 3)),
        "sparse_mix": (
            lambda x: ad.tsum(ad.mul(ad.sparse_mix(x, mix_src, mix_dst, mix_w, 4), mix_c)),
            (2, 9)),
    }


_SKIP_FD = {"stop_gradient", "straight_through"}


def test_every_primitive_has_a_gradient_case():
    rng = np.random.default_rng(11)
    missing = set(ad.primitive_names()) - set(_primitive_cases(rng)) - _SKIP_FD
    assert not missing, f"primitives without a grad_check case: {sorted(missing)}"


@pytest.mark.parametrize("name", sorted(set(ad.primitive_names()) - _SKIP_FD))
def test_primitive_grad_check(name):
    rng = np.random.default_rng(sum(name.encode()))
    f, shape = _primitive_cases(rng)[name]
    x = t(rng.standard_normal(shape))
    err = ad.grad_check(f, x, step=1e-5)
    assert err <= 1e-4, f"{name}: relative error {err}"


def test_stop_gradient_blocks_and_straight_through_routes():
    rng = np.random.default_rng(2)
    z_e = t(rng.standard_normal((2, 3)), rg=True)
    z_q = t(rng.standard_normal((2, 3)), rg=True)
    cot = rng.standard_normal((2, 3))
    with ad.Tape() as tape:
        out = ad.straight_through(z_e, z_q)
        loss = ad.tsum(ad.mul(out, ad.constant(cot)))
    grads = ad.backward(tape, loss)
    np.testing.assert_array_equal(out.data, z_q.data)       # exact value pass-through
    np.testing.assert_array_equal(grads[z_e], cot)           # identity gradient path
    np.testing.assert_array_equal(grads[z_q], np.zeros_like(cot))

    s = ad.stop_gradient(z_e)
    assert not s.requires_grad
    np.testing.assert_array_equal(s.data, z_e.data)


def test_grad_check_quadratic_is_tight():
    x = t(np.array([1.0, -2.0, 0.5]))
    err = ad.grad_check(lambda v: ad.tsum(ad.mul(v, v)), x, step=1e-5)
    assert err < 1e-8


def test_group_norm_composite_grad_check():
    rng = np.random.default_rng(9)
    x = t(rng.standard_normal((2, 4, 4, 4, 4)))
    gamma = ad.constant(rng.standard_normal(4))
    beta = ad.constant(rng.standard_normal(4))
    c = ad.constant(rng.standard_normal((2, 4, 4, 4, 4)))

    def f(v):
        return ad.tsum(ad.mul(ad.silu(ad.group_norm(v, gamma, beta, groups=2)), c))

    assert ad.grad_check(f, x, step=1e-5) <= 1e-4


def test_attention_block_grad_check():
    rng = np.random.default_rng(10)
    q = t(rng.standard_normal((2, 3, 4)))
    k = ad.constant(rng.standard_normal((2, 5, 4)))
    v = ad.constant(rng.standard_normal((2, 5, 4)))
    wq = ad.constant(rng.standard_normal((4, 4)) * 0.5)
    c = ad.constant(rng.standard_normal((2, 3, 4)))

    def f(x):
        return ad.tsum(ad.mul(ad.scaled_dot_attention(ad.matmul(x, wq), k, v), c))

    assert ad.grad_check(f, q, step=1e-5) <= 1e-4


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(12)
    for stride, pad, d in ((1, 1, 5), (2, 1, 6), (2, 0, 5), (3, 2, 7)):
        x = t(rng.standard_normal((2, 3, d, d, d)))
        w = t(rng.standard_normal((4, 3, 3, 3, 3)))
        y_shape = ad.conv3d(x, w, stride=stride, pad=pad).shape
        y = t(rng.standard_normal(y_shape))
        lhs = np.vdot(ad.conv3d(x, w, stride=stride, pad=pad).data, y.data)
        rhs = np.vdot(x.data, ad.conv_transpose3d(
            y, w, stride=stride, pad=pad, output_size=(d, d, d)).data)
        assert abs(lhs - rhs) / max(1.0, abs(lhs)) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_broadcast_add_gradients_unbroadcast_correctly(a, b, c):
    rng = np.random.default_rng(a * 100 + b * 10 + c)
    x = t(rng.standard_normal((a, 1, c)), rg=True)
    y = t(rng.standard_normal((1, b, 1)), rg=True)
    cot = rng.standard_normal((a, b, c))
    with ad.Tape() as tape:
        loss = ad.tsum(ad.mul(ad.add(x, y), ad.constant(cot)))
    grads = ad.backward(tape, loss)
    assert grads[x].shape == x.shape and grads[y].shape == y.shape
    np.testing.assert_allclose(grads[x], cot.sum(axis=1, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(grads[y], cot.sum(axis=(0, 2), keepdims=True)[:1, :, :1],
                               atol=1e-12)


# ---------------------------------------------------------------------------
# Adam + parameter store
# ---------------------------------------------------------------------------

def test_adam_zero_gradients_leave_parameters_unchanged():
    store = ad.ParamStore()
    p = store.add("w", np.array([1.0, -2.0]))
    before = p.data.copy()
    ad.adam_step(store, {p: np.zeros(2)}, lr=1e-3)
    np.testing.assert_array_equal(p.data, before)
    assert store.step == 1


def test_adam_first_step_closed_form():
    # Bias-corrected first step with g=1 moves the parameter by exactly
    # lr * 1 / (1 + eps) regardless of betas.
    store = ad.ParamStore()
    p = store.add("w", np.array([0.0]))
    ad.adam_step(store, {p: np.ones(1)}, lr=1e-3)
    expected = -1e-3 * 1.0 / (1.0 + 1e-8)
    assert p.data[0] == pytest.approx(expected, rel=1e-12)
    assert abs(p.data[0] + 1e-3) < 1e-10


def test_adam_missing_gradient_rejected():
    store = ad.ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(KeyError, match="w"):
        ad.adam_step(store, {}, lr=1e-3)


def test_adam_training_is_bit_deterministic():
    def run():
        rng = np.random.default_rng(42)
        store = ad.ParamStore()
        w = store.add("w", rng.standard_normal((3, 3)))
        data = rng.standard_normal((5, 3))
        for i in range(10):
            x = ad.constant(data[i % 5][None, :])
            with ad.Tape() as tape:
                loss = ad.mse(ad.matmul(x, w), ad.constant(np.ones((1, 3))))
            ad.adam_step(store, ad.backward(tape, loss), lr=1e-2)
        return w.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_checkpoint_roundtrip_and_format(tmp_path):
    rng = np.random.default_rng(7)
    store = ad.ParamStore()
    store.add("enc.w", rng.standard_normal((2, 3, 4)))
    store.add("bias", rng.standard_normal(5))
    path = tmp_path / "model.ckpt"
    store.save(path)
    raw = path.read_bytes()
    assert raw[:8] == b"SDFTNSR1"
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:16], "little") == len(b"enc.w")
    assert raw[16:21] == b"enc.w"
    assert int.from_bytes(raw[21:25], "little") == 3  # rank
    back = ad.ParamStore.load(path)
    assert list(back.params) == ["enc.w", "bias"]
    for name in store.params:
        np.testing.assert_array_equal(back[name].data, store[name].data)
