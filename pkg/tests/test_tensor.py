import math

import numpy as np
import pytest

from scanet import tensor as T
from scanet.tensor import ShapeError, Tape, TapeError, Tensor

from gradsuite import OP_CASES, SEEDS
from oracles import conv_configs, naive_conv2d, naive_matmul

CONV_CONFIGS = conv_configs()


@pytest.mark.parametrize("cfg", CONV_CONFIGS, ids=lambda c: f"cin{c[1]}-g{c[5]}-k{c[6]}-s{c[7]}")
def test_conv2d_matches_loop_oracle(cfg, backend):
    n, cin, h, w, cout, groups, k, s, p = cfg
    rng = np.random.default_rng(hash(cfg) % 2**32)
    x = rng.standard_normal((n, cin, h, w))
    wt = rng.standard_normal((cout, cin // groups) + k)
    got = T.conv2d(Tensor(x), Tensor(wt), stride=s, padding=p, groups=groups).data
    np.testing.assert_allclose(got, naive_conv2d(x, wt, s, p, groups), rtol=0, atol=1e-10)


def test_conv2d_hand_examples(backend):
    x = np.random.default_rng(0).standard_normal((1, 3, 4, 5))
    eye = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(eye)).data, x)
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data[0, 0, 0, 0] == 9.0
    x = np.random.default_rng(1).standard_normal((2, 3, 8, 8))
    w = np.random.default_rng(2).standard_normal((4, 3, 3, 3))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), padding=1).data,
                               naive_conv2d(x, w, (1, 1), (1, 1)), atol=1e-10, rtol=0)


def test_depthwise_is_per_channel_conv(backend, rng):
    x = rng.standard_normal((2, 5, 9, 7))
    w = rng.standard_normal((5, 1, 3, 3))
    dw = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1, groups=5).data
    for c in range(5):
        single = T.conv2d(Tensor(x[:, c:c + 1]), Tensor(w[c:c + 1]), stride=2, padding=1).data
        np.testing.assert_allclose(dw[:, c:c + 1], single, atol=1e-12, rtol=0)


def test_pointwise_equals_dense(backend, rng):
    x = rng.standard_normal((3, 6, 4, 5))
    w = rng.standard_normal((4, 6, 1, 1))
    conv = T.conv2d(Tensor(x), Tensor(w)).data
    pix = x.transpose(0, 2, 3, 1).reshape(-1, 6)
    dense = T.dense(Tensor(pix), Tensor(w[:, :, 0, 0].T)).data
    np.testing.assert_allclose(conv, dense.reshape(3, 4, 5, 4).transpose(0, 3, 1, 2),
                               atol=1e-10, rtol=0)


def test_conv2d_errors_name_dimension():
    x = Tensor(np.zeros((1, 4, 5, 5)))
    with pytest.raises(ShapeError, match="channel"):
        T.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))))
    with pytest.raises(ValueError, match="groups"):
        T.conv2d(x, Tensor(np.zeros((3, 4, 3, 3))), groups=3)
    with pytest.raises(ShapeError, match="height"):
        T.conv2d(x, Tensor(np.zeros((2, 4, 7, 1))))
    with pytest.raises(ShapeError, match="width"):
        T.conv2d(x, Tensor(np.zeros((2, 4, 1, 7))))


def test_dense_examples(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(T.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    out = T.dense(Tensor([[1.0, 2.0]]), Tensor(2 * np.eye(2)), Tensor([1.0, 1.0])).data
    np.testing.assert_array_equal(out, [[3.0, 5.0]])
    a, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 4))
    np.testing.assert_allclose(T.dense(Tensor(a), Tensor(b)).data, naive_matmul(a, b),
                               atol=1e-12, rtol=0)
    with pytest.raises(ShapeError):
        T.dense(Tensor(a), Tensor(a))


def test_elementwise_examples(rng):
    np.testing.assert_array_equal(T.elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert T.elementwise("sigmoid", Tensor([0.0])).data[0] == 0.5
    x = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(T.elementwise("mul", Tensor(x), Tensor(np.ones_like(x))).data, x)
    np.testing.assert_array_equal(T.elementwise("scale", Tensor(x), k=3.0).data, 3.0 * x)
    with pytest.raises(ShapeError):
        T.add(Tensor(x), Tensor(x.T))
    # large magnitudes must not overflow
    s = T.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    np.testing.assert_array_equal(s, [0.0, 1.0])


def test_pool_examples(backend):
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert T.pool2d(x, "max", 2, 2).data.item() == 4.0
    c = Tensor(np.full((2, 3, 5, 7), 2.5))
    np.testing.assert_allclose(T.pool2d(c, "global_avg").data, np.full((2, 3, 1, 1), 2.5))
    with pytest.raises(ShapeError):
        T.pool2d(Tensor(np.zeros((1, 1, 2, 2))), "max", 3, 3)


def test_avg_pool_backward_distributes_area(backend):
    tape = Tape()
    x = tape.watch(np.random.default_rng(0).standard_normal((1, 1, 4, 4)))
    g = T.backward(T.sum_all(T.pool2d(x, "avg", 2, 2)), tape)[x]
    np.testing.assert_allclose(g, np.full((1, 1, 4, 4), 0.25))


def test_ceil_mode_covers_odd_sizes(backend):
    assert T.pool_output_size(7, 2, 2, 0, ceil_mode=False) == 3
    assert T.pool_output_size(7, 2, 2, 0, ceil_mode=True) == 4
    # last window must start inside the (left-padded) input
    assert T.pool_output_size(4, 2, 2, 1, ceil_mode=True) == 3
    x = np.arange(49.0).reshape(1, 1, 7, 7)
    out = T.pool2d(Tensor(x), "max", 2, 2, ceil_mode=True).data
    assert out.shape == (1, 1, 4, 4)
    assert out[0, 0, 3, 3] == 48.0
    avg = T.pool2d(Tensor(x), "avg", 2, 2, ceil_mode=True).data
    assert avg[0, 0, 3, 3] == 48.0  # partial window averages in-bounds cells only


def test_upsample_examples():
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
    np.testing.assert_array_equal(T.upsample_nearest(Tensor(x), (3, 3)).data, x)
    np.testing.assert_array_equal(T.upsample_nearest(Tensor(np.full((1, 1, 1, 1), 7.0)), 2).data,
                                  np.full((1, 1, 2, 2), 7.0))
    tape = Tape()
    t = tape.watch(np.ones((1, 1, 2, 2)))
    g = T.backward(T.sum_all(T.upsample_nearest(t, 4)), tape)[t]
    np.testing.assert_array_equal(g, np.full((1, 1, 2, 2), 4.0))
    with pytest.raises(ShapeError):
        T.upsample_nearest(Tensor(x), 2)


def test_batchnorm_examples(rng):
    x = rng.standard_normal((4, 3, 5, 5))
    ident = T.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                        T.RunningStats.create(3), train=False).data
    np.testing.assert_allclose(ident, x / math.sqrt(1 + 1e-5), rtol=1e-12)
    gamma, beta = np.array([0.5, 2.0, 1.5]), np.array([1.0, -1.0, 0.3])
    stats = T.RunningStats.create(3)
    y = T.batchnorm(Tensor(3 * x + 1), Tensor(gamma), Tensor(beta), stats, train=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), beta, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), gamma ** 2, atol=1e-5 * 4)
    # running stats moved by momentum 0.1 towards the batch statistics
    np.testing.assert_allclose(stats.mean, 0.1 * (3 * x + 1).mean(axis=(0, 2, 3)))
    with pytest.raises(ShapeError):
        T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), T.RunningStats.create(2))


def test_softmax_cross_entropy_examples(rng):
    loss, probs = T.softmax_cross_entropy(Tensor(np.zeros((1, 2))), [0])
    np.testing.assert_allclose(probs, [[0.5, 0.5]])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)
    z = 50 * rng.standard_normal((20, 4))
    loss, probs = T.softmax_cross_entropy(Tensor(z), rng.integers(0, 4, 20))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert loss.item() >= 0
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(z), np.full(20, 4))


def test_backward_examples(rng):
    x0 = rng.standard_normal((3, 4))
    tape = Tape()
    x = tape.watch(x0)
    np.testing.assert_array_equal(T.backward(T.sum_all(x), tape)[x], np.ones((3, 4)))
    tape = Tape()
    x = tape.watch(x0)
    g = T.backward(T.scale(T.sum_all(T.mul(x, x)), 0.5), tape)[x]
    np.testing.assert_allclose(g, x0)


def test_unreachable_leaf_gets_exact_zero(rng):
    tape = Tape()
    x = tape.watch(rng.standard_normal((2, 3)))
    unused = tape.watch(rng.standard_normal((4,)))
    grads = T.backward(T.sum_all(T.relu(x)), tape)
    assert unused in grads
    np.testing.assert_array_equal(grads[unused], np.zeros(4))


def test_backward_errors(rng):
    tape = Tape()
    x = tape.watch(rng.standard_normal((2, 3)))
    with pytest.raises(TapeError):
        T.backward(x, tape)  # not scalar
    with pytest.raises(TapeError):
        T.backward(T.sum_all(x), Tape())  # foreign tape
    with pytest.raises(TapeError):
        T.add(x, Tape().watch(np.zeros((2, 3))))


def test_untaped_ops_record_nothing():
    tape = Tape()
    T.relu(Tensor(np.ones(3)))
    assert tape.nodes == []


def test_grad_check_linear_is_exact(rng):
    w = rng.standard_normal((4, 3))
    rep = T.grad_check(lambda a: T.sum_all(T.mul(a, Tensor(w))), [rng.standard_normal((4, 3))])
    assert rep.max_rel_error < 1e-9


def test_grad_check_flags_corrupted_backward(rng):
    def doubled(x):
        # forward is the identity, backward reports twice the true gradient
        return T._emit("bad", (x,), x.data.copy(), lambda g: (2 * g,))

    rep = T.grad_check(lambda x: T.sum_all(doubled(x)), [rng.standard_normal((3, 3))])
    assert rep.max_rel_error == pytest.approx(0.5, abs=1e-6)
    assert not rep.passed


def test_grad_check_rejects_32bit_and_non_scalar(rng):
    with pytest.raises(TypeError):
        T.grad_check(T.sum_all, [rng.standard_normal(3).astype(np.float32)])
    with pytest.raises(TapeError):
        T.grad_check(T.relu, [rng.standard_normal(3)])


def test_rel_error_floor():
    assert T.rel_error(0.0, 1e-12) == pytest.approx(1e-12 / 1e-8)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("case", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_gradients(case, seed, backend):
    rep = case[1](seed)
    assert rep.max_rel_error < 1e-4, (rep.op_name, rep.per_input_errors)


def test_backends_agree_on_random_graph(rng):
    from scanet import kernels

    x = rng.standard_normal((2, 4, 9, 9))
    w = rng.standard_normal((4, 1, 3, 3))

    def run():
        tape = Tape()
        xt, wt = tape.watch(x), tape.watch(w)
        y = T.pool2d(T.relu(T.conv2d(xt, wt, stride=2, padding=1, groups=4)), "max", 2, 2,
                     ceil_mode=True)
        g = T.backward(T.sum_all(y), tape)
        return y.data, g[xt], g[wt]

    saved = kernels.active
    try:
        kernels.active = kernels.numpy_
        a = run()
        kernels.active = kernels.jit
        b = run()
    finally:
        kernels.active = saved
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, atol=1e-12, rtol=0)


def test_he_normal_statistics():
    w = T.he_normal(np.random.default_rng(0), (100, 100), fan_in=50, dtype=np.float64)
    assert abs(w.mean()) < 0.05 * math.sqrt(2 / 50)
    assert abs(w.std() / math.sqrt(2 / 50) - 1) < 0.05
