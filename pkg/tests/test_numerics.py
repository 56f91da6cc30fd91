import math

import numpy as np
import pytest

from conftest import fd_gradient, tape_gradient
from skelact.errors import NumericalError, ValidationError
from skelact.numerics import Tape, Tensor, grad_check, ops


def test_tensor_rejects_too_many_axes():
    with pytest.raises(ValidationError):
        Tensor(np.zeros((1, 1, 1, 1, 1, 1)))


def test_tensor_rejects_zero_extent():
    with pytest.raises(ValidationError):
        Tensor(np.zeros((2, 0)))


def test_matmul_identity():
    b = np.arange(9.0).reshape(3, 3)
    out = ops.matmul(Tensor(np.eye(3)), Tensor(b))
    assert np.array_equal(out.data, b)


def test_matmul_hand_expansion():
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_mismatch_rejected():
    with pytest.raises(ValidationError):
        ops.matmul(Tensor(np.zeros((4, 5))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ValidationError):
        ops.matmul(Tensor(np.zeros((4, 5, 1))), Tensor(np.zeros((5, 2))))


def test_matmul_gradient_matches_central_differences(rng):
    # frozen oracle: gradient of sum(a @ b) w.r.t. a is ones @ b.T, but we
    # check against raw finite differences to stay independent of algebra
    a = Tensor(rng.standard_normal((4, 5)))
    b = Tensor(rng.standard_normal((5, 2)))
    (ga, gb) = tape_gradient(lambda: ops.matmul(a, b), [a, b])
    fa = fd_gradient(lambda: float(np.sum(a.data @ b.data)), a.data)
    fb = fd_gradient(lambda: float(np.sum(a.data @ b.data)), b.data)
    assert np.max(np.abs(ga - fa) / np.maximum(1.0, np.abs(fa))) < 1e-6
    assert np.max(np.abs(gb - fb) / np.maximum(1.0, np.abs(fb))) < 1e-6


def test_temporal_conv_identity_kernel():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 5)))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = ops.temporal_conv(x, Tensor(w), stride=1, pad=0)
    assert np.allclose(out.data, x.data)


def test_temporal_conv_output_length():
    x = Tensor(np.zeros((1, 2, 90, 5)))
    w = Tensor(np.zeros((4, 2, 9, 1)))
    out = ops.temporal_conv(x, w, stride=2, pad=4)
    assert out.shape == (1, 4, 45, 5)


def test_temporal_conv_length_formula_grid(rng):
    for t in (1, 5, 12, 90):
        for kt in (1, 3, 9):
            for stride in (1, 2):
                for pad in (0, (kt - 1) // 2, kt):
                    expected = (t + 2 * pad - kt) // stride + 1
                    x = Tensor(rng.standard_normal((1, 1, t, 2)))
                    w = Tensor(rng.standard_normal((1, 1, kt, 1)))
                    if expected < 1:
                        with pytest.raises(ValidationError):
                            ops.temporal_conv(x, w, stride=stride, pad=pad)
                    else:
                        out = ops.temporal_conv(x, w, stride=stride, pad=pad)
                        assert out.shape[2] == expected


def test_temporal_conv_rejects_even_kernel():
    with pytest.raises(ValidationError):
        ops.temporal_conv(Tensor(np.zeros((1, 1, 8, 2))), Tensor(np.zeros((1, 1, 4, 1))))


def test_temporal_conv_weight_gradient_matches_fd(rng):
    x = Tensor(rng.standard_normal((2, 3, 12, 5)))
    w = Tensor(rng.standard_normal((4, 3, 3, 1)))

    def value():
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (0, 0)))
        t_out = 12
        acc = np.zeros((2, 4, t_out, 5))
        for k in range(3):
            xs = xp[:, :, k: k + t_out, :]
            acc += np.moveaxis(np.tensordot(w.data[:, :, k, 0], xs, axes=([1], [1])), 0, 1)
        return float(acc.sum())

    (gx, gw) = tape_gradient(lambda: ops.temporal_conv(x, w, stride=1, pad=1), [x, w])
    fw = fd_gradient(value, w.data)
    fx = fd_gradient(value, x.data)
    assert np.max(np.abs(gw - fw) / np.maximum(1.0, np.abs(fw))) < 1e-6
    assert np.max(np.abs(gx - fx) / np.maximum(1.0, np.abs(fx))) < 1e-6


def test_batch_norm_constant_channel_gives_beta():
    x = Tensor(np.full((4, 2, 3, 5), 7.0))
    gamma = Tensor(np.array([2.0, 3.0]))
    beta = Tensor(np.array([0.5, -1.5]))
    out = ops.batch_norm(x, gamma, beta, np.zeros(2), np.ones(2), training=True)
    assert np.allclose(out.data[:, 0], 0.5)
    assert np.allclose(out.data[:, 1], -1.5)


def test_batch_norm_standardized_input_is_identity(rng):
    # "already standardized" in the op's own convention: mean 0 and batch
    # variance 1 - eps, so that var + eps == 1 and the map is the identity
    raw = rng.standard_normal((8, 3, 10, 5))
    x = (raw - raw.mean(axis=(0, 2, 3), keepdims=True)) / raw.std(axis=(0, 2, 3), keepdims=True)
    x *= np.sqrt(1.0 - 1e-5)
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                         np.zeros(3), np.ones(3), training=True)
    assert np.max(np.abs(out.data - x)) < 1e-6


def test_batch_norm_gamma_gradient_matches_fd(rng):
    x = rng.standard_normal((3, 2, 4, 5))
    gamma = Tensor(rng.uniform(0.5, 1.5, 2))
    beta = Tensor(rng.standard_normal(2))
    rm, rv = np.zeros(2), np.ones(2)

    def run():
        return ops.batch_norm(Tensor(x), gamma, beta, rm.copy(), rv.copy(), training=True)

    def value():
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        xhat = (x - mu) / np.sqrt(var + 1e-5)
        g = gamma.data.reshape(1, 2, 1, 1)
        b = beta.data.reshape(1, 2, 1, 1)
        return float((g * xhat + b).sum())

    (gg,) = tape_gradient(run, [gamma])
    fg = fd_gradient(value, gamma.data)
    assert np.max(np.abs(gg - fg) / np.maximum(1.0, np.abs(fg))) < 1e-5


def test_batch_norm_zero_variance_stays_finite():
    x = Tensor(np.zeros((2, 1, 3, 4)))
    out = ops.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                         np.zeros(1), np.zeros(1), training=True)
    assert np.all(np.isfinite(out.data))


def test_batch_norm_running_stats_update():
    x = np.random.default_rng(3).standard_normal((16, 2, 5, 5)) * 3.0 + 1.0
    rm, rv = np.zeros(2), np.ones(2)
    ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    mu = x.mean(axis=(0, 2, 3))
    assert np.allclose(rm, 0.1 * mu)
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                         rm, rv, training=False)
    assert np.allclose(out.data, (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5))


def test_softmax_uniform_logits_and_loss():
    logits = Tensor(np.zeros((4, 10)))
    probs = ops.softmax(logits)
    assert np.allclose(probs, 0.1)
    loss = ops.softmax_cross_entropy(logits, np.zeros(4, dtype=np.int64))
    assert abs(float(loss.data) - math.log(10.0)) < 1e-12


def test_softmax_rows_sum_to_one(rng):
    probs = ops.softmax(Tensor(rng.standard_normal((50, 7)) * 20.0))
    assert np.all(probs >= 0.0)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-9


def test_cross_entropy_rejects_out_of_range_labels():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        ops.softmax_cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(ValidationError):
        ops.softmax_cross_entropy(logits, np.array([-1, 0]))


def test_cross_entropy_adjoint_is_probs_minus_onehot(rng):
    logits = Tensor(rng.standard_normal((5, 4)))
    y = np.array([0, 3, 1, 1, 2])
    with Tape() as tape:
        tape.watch(logits)
        loss = ops.softmax_cross_entropy(logits, y)
        tape.backward(loss)
        probs = ops.softmax(logits.data)
        onehot = np.eye(4)[y]
        assert np.allclose(logits.grad, (probs - onehot) / 5.0)


def test_dropout_eval_mode_is_identity(rng):
    x = Tensor(rng.standard_normal((10, 10)))
    out = ops.dropout(x, 0.5, None, training=False)
    assert out is x


def test_dropout_train_keep_rate_monte_carlo():
    gen = np.random.default_rng(7)
    x = Tensor(np.ones((100, 1000)))
    out = ops.dropout(x, 0.5, gen, training=True)
    kept = out.data != 0.0
    # kept fraction estimates the keep probability before inverse scaling
    assert abs(kept.mean() - 0.5) < 0.02
    assert np.allclose(out.data[kept], 2.0)  # inverse scaling by 1/keep


def test_dropout_gradient_uses_mask(rng):
    x = Tensor(rng.standard_normal((4, 6)))
    gen = np.random.default_rng(5)
    with Tape() as tape:
        tape.watch(x)
        out = ops.dropout(x, 0.75, gen, training=True)
        mask = out.data != 0.0
        tape.backward(ops.scale(ops.mean(out, axis=(0, 1)), out.size))
        assert np.allclose(x.grad, mask / 0.75)


def test_elementwise_and_shape_op_gradients_match_fd(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    y = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((4,)))
    cases = {
        "add": (lambda: ops.add(x, y), lambda: float((x.data + y.data).sum())),
        "mul": (lambda: ops.mul(x, y), lambda: float((x.data * y.data).sum())),
        "scale": (lambda: ops.scale(x, 2.5), lambda: float((x.data * 2.5).sum())),
        "relu": (lambda: ops.relu(x), lambda: float(np.maximum(x.data, 0).sum())),
        "reshape": (lambda: ops.reshape(x, (4, 3)), lambda: float(x.data.sum())),
        "transpose": (lambda: ops.transpose(x, (1, 0)), lambda: float(x.data.sum())),
        "mean": (lambda: ops.mean(x, axis=(1,)), lambda: float(x.data.mean(axis=1).sum())),
    }
    for name, (op, value) in cases.items():
        (gx,) = tape_gradient(op, [x])
        fx = fd_gradient(value, x.data)
        err = np.max(np.abs(gx - fx) / np.maximum(1.0, np.abs(fx)))
        assert err < 1e-5, f"{name}: {err}"
    (gb,) = tape_gradient(lambda: ops.bias_add(ops.reshape(x, (3, 4, 1, 1)), b), [b])
    fb = fd_gradient(lambda: float((x.data + b.data.reshape(1, 4)).sum()), b.data)
    assert np.max(np.abs(gb - fb)) < 1e-5


def test_partition_mix_matches_naive_loops(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    adj = rng.uniform(0.0, 1.0, (3, 5, 5))
    w = rng.standard_normal((3, 4, 3))
    out = ops.partition_mix(Tensor(x), adj, Tensor(w))
    naive = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            for t in range(6):
                for i in range(5):
                    acc = 0.0
                    for k in range(3):
                        for c in range(3):
                            for j in range(5):
                                acc += adj[k, i, j] * w[k, o, c] * x[n, c, t, j]
                    naive[n, o, t, i] = acc
    assert np.max(np.abs(out.data - naive)) < 1e-12


def test_partition_mix_gradients_match_fd(rng):
    x = Tensor(rng.standard_normal((2, 2, 4, 5)))
    adj = rng.uniform(0.0, 1.0, (2, 5, 5))
    w = Tensor(rng.standard_normal((2, 3, 2)))

    def value():
        acc = 0.0
        for k in range(2):
            xk = np.tensordot(x.data, adj[k], axes=([3], [1]))
            acc += np.moveaxis(np.tensordot(w.data[k], xk, axes=([1], [1])), 0, 1)
        return float(acc.sum())

    (gx, gw) = tape_gradient(lambda: ops.partition_mix(x, adj, w), [x, w])
    assert np.max(np.abs(gx - fd_gradient(value, x.data))) < 1e-5
    assert np.max(np.abs(gw - fd_gradient(value, w.data))) < 1e-5


def test_global_avg_pool_shape_and_value(rng):
    x = rng.standard_normal((3, 4, 7, 5))
    out = ops.global_avg_pool(Tensor(x))
    assert out.shape == (3, 4)
    assert np.allclose(out.data, x.mean(axis=(2, 3)))


def test_tape_accumulators_reset_between_backwards(rng):
    x = Tensor(rng.standard_normal((3, 3)))
    with Tape() as tape:
        tape.watch(x)
        out = ops.mean(ops.relu(x), axis=(0, 1))
        tape.backward(out)
        first = x.grad.copy()
        tape.backward(out)
        assert np.array_equal(x.grad, first)


def test_tape_detaches_on_exit(rng):
    x = Tensor(rng.standard_normal((2, 2)))
    with Tape() as tape:
        tape.watch(x)
        ops.relu(x)
    assert x.tape is None
    out = ops.relu(x)  # records nothing afterwards
    assert out.tape is None


def test_mixed_tapes_rejected(rng):
    a = Tensor(rng.standard_normal((2, 2)))
    b = Tensor(rng.standard_normal((2, 2)))
    t1, t2 = Tape(), Tape()
    t1.watch(a)
    t2.watch(b)
    try:
        with pytest.raises(ValidationError):
            ops.add(a, b)
    finally:
        t1.detach_all()
        t2.detach_all()


def test_forward_determinism_bitwise(rng):
    x = rng.standard_normal((4, 8))
    w = rng.standard_normal((8, 3))
    one = ops.matmul(Tensor(x), Tensor(w)).data
    two = ops.matmul(Tensor(x.copy()), Tensor(w.copy())).data
    assert one.tobytes() == two.tobytes()
