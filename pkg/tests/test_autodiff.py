import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from proxconnect import autodiff as ad
from proxconnect.autodiff import CustomGradSpec, DimensionError, Tensor, apply_custom, grad_check
from proxconnect.quantizers import sign_q, ss_backward, ss_forward


def fd_grad(f, x, h=1e-6):
    """Independent central-difference gradient of a numpy scalar function."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / (np.abs(b) + 1e-8)))


# ---------------------------------------------------------------- matmul

def test_matmul_examples():
    assert ad.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[2], [3]])).data.tolist() == [[2], [3]]
    assert ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    a0, b0 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    a = Tensor(a0, requires_grad=True)
    ad.sum(a @ Tensor(b0)).backward()
    assert rel_err(a.grad, fd_grad(lambda x: (x @ b0).sum(), a0)) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- conv2d

def test_conv2d_sum_of_ones():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data.reshape(-1).tolist() == [9.0]


def test_conv2d_delta_kernel_is_identity():
    x = np.random.default_rng(1).standard_normal((2, 1, 5, 4))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    assert np.array_equal(ad.conv2d(Tensor(x), Tensor(k), padding=1).data, x)


def test_conv2d_output_size_and_direct_oracle():
    rng = np.random.default_rng(2)
    x, k = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 2))
    out = ad.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    oh, ow = (7 + 2 - 3) // 2 + 1, (6 + 2 - 2) // 2 + 1
    assert out.shape == (2, 4, oh, ow)
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for y in range(oh):
                for z in range(ow):
                    ref[n, o, y, z] = np.sum(xp[n, :, 2 * y:2 * y + 3, 2 * z:2 * z + 2] * k[o])
    assert np.allclose(out, ref, atol=1e-12)


def test_conv2d_kernel_gradient_matches_fd():
    rng = np.random.default_rng(3)
    x0, k0 = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    w = rng.standard_normal((1, 3, 5, 5))

    def f(kv):
        return float(np.sum(ad.conv2d(Tensor(x0), Tensor(kv), padding=1).data * w))

    k = Tensor(k0, requires_grad=True)
    ad.sum(ad.mul(ad.conv2d(Tensor(x0), k, padding=1), Tensor(w))).backward()
    assert rel_err(k.grad, fd_grad(f, k0)) < 1e-5


def test_conv2d_input_gradient_matches_fd():
    rng = np.random.default_rng(4)
    x0, k0 = rng.standard_normal((2, 2, 6, 5)), rng.standard_normal((2, 2, 3, 3))
    err = grad_check(lambda x: ad.sum(ad.mul(ad.conv2d(x, Tensor(k0), stride=2, padding=1),
                                             ad.conv2d(x, Tensor(k0), stride=2, padding=1))), x0)
    assert err < 1e-5


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 5, 5))))
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_uniform():
    assert ad.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.zeros((1, 3))
    logits[0, 2] = 1000.0
    assert ad.softmax_cross_entropy(Tensor(logits), [2]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_gradient_matches_fd():
    rng = np.random.default_rng(5)
    z0, y = rng.standard_normal((2, 3)), np.array([2, 0])

    def f(z):
        z = z - z.max(axis=1, keepdims=True)
        return float(np.mean(-(z[np.arange(2), y] - np.log(np.exp(z).sum(axis=1)))))

    z = Tensor(z0, requires_grad=True)
    ad.softmax_cross_entropy(z, y).backward()
    assert rel_err(z.grad, fd_grad(f, z0)) < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------- custom gradients

def test_apply_custom_sign_with_unit_backward():
    x = Tensor([0.3, -2.0], requires_grad=True)
    y = apply_custom(x, CustomGradSpec(sign_q, np.ones_like))
    assert y.data.tolist() == [1.0, -1.0]
    ad.sum(y).backward()
    assert x.grad.tolist() == [1.0, 1.0]


def test_apply_custom_identity_passthrough():
    x0 = np.random.default_rng(6).standard_normal(5)
    x = Tensor(x0, requires_grad=True)
    y = apply_custom(x, CustomGradSpec(lambda v: v.copy(), np.ones_like))
    assert np.array_equal(y.data, x0)
    ad.sum(ad.mul(y, y)).backward()
    assert np.array_equal(x.grad, 2 * x0)


def test_apply_custom_ss_at_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    ad.sum(apply_custom(x, CustomGradSpec(lambda v: ss_forward(v, 5), lambda v: ss_backward(v, 5)))).backward()
    assert x.grad.tolist() == [5.0, 5.0, 5.0]


def test_apply_custom_uses_original_input_and_never_forward_derivative():
    seen = []

    def backward(v):
        seen.append(v.copy())
        return np.full_like(v, 7.0)

    x0 = np.array([0.2, -0.4])
    x = Tensor(x0, requires_grad=True)
    ad.sum(apply_custom(x, CustomGradSpec(sign_q, backward))).backward()
    assert len(seen) == 1 and np.array_equal(seen[0], x0)
    assert x.grad.tolist() == [7.0, 7.0]


@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=20))
def test_custom_with_true_derivative_matches_autodiff(values):
    x0 = np.array(values)
    a = Tensor(x0, requires_grad=True)
    ad.sum(ad.mul(ad.mul(a, a), Tensor(np.arange(x0.size, dtype=float)))).backward()
    b = Tensor(x0, requires_grad=True)
    sq = apply_custom(b, CustomGradSpec(lambda v: v * v, lambda v: 2 * v))
    ad.sum(ad.mul(sq, Tensor(np.arange(x0.size, dtype=float)))).backward()
    assert np.max(np.abs(a.grad - b.grad)) <= 1e-10


# ---------------------------------------------------------------- grad_check and other ops

def test_grad_check_examples():
    rng = np.random.default_rng(7)
    assert grad_check(lambda x: ad.sum(ad.mul(x, x)), rng.standard_normal(10)) < 1e-7
    w, y = rng.standard_normal((4, 3)), np.array([0, 2, 1, 1, 0])
    assert grad_check(lambda x: ad.softmax_cross_entropy(ad.matmul(x, Tensor(w)), y), rng.standard_normal((5, 4))) < 1e-5
    assert grad_check(lambda x: ad.sum(Tensor(np.ones(3))), rng.standard_normal(3)) == 0.0


@pytest.mark.parametrize("name", ["add_broadcast", "mean", "relu", "reshape", "maxpool", "bn_train", "bn_eval", "sub_neg"])
def test_builtin_ops_match_fd(name):
    rng = np.random.default_rng(8)
    c = Tensor(rng.standard_normal((1, 3, 1, 1)))
    probe = Tensor(rng.standard_normal((2, 3, 4, 4)))
    fns = {
        "add_broadcast": lambda x: ad.sum(ad.mul(ad.add(x, c), probe)),
        "mean": lambda x: ad.mean(ad.mul(x, x)),
        "relu": lambda x: ad.sum(ad.mul(ad.relu(x), probe)),
        "reshape": lambda x: ad.sum(ad.mul(ad.reshape(x, (2, 48)), Tensor(probe.data.reshape(2, 48)))),
        "maxpool": lambda x: ad.sum(ad.mul(ad.maxpool2d(x, 2), Tensor(probe.data[:, :, :2, :2]))),
        "bn_train": lambda x: ad.sum(ad.mul(ad.batch_norm(x, Tensor(np.full(3, 1.5)), Tensor(np.zeros(3)),
                                                          np.zeros(3), np.ones(3), True), probe)),
        "bn_eval": lambda x: ad.sum(ad.mul(ad.batch_norm(x, Tensor(np.full(3, 1.5)), Tensor(np.ones(3)),
                                                         np.full(3, 0.2), np.full(3, 2.0), False), probe)),
        "sub_neg": lambda x: ad.sum(ad.mul(-(x - c), probe)),
    }
    x0 = rng.standard_normal((2, 3, 4, 4))
    assert grad_check(fns[name], x0) < 1e-5


def test_leaf_gradients_accumulate_across_uses():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.sum(ad.add(ad.mul(x, 3.0), ad.mul(x, x))).backward()
    assert x.grad.tolist() == [5.0, 7.0]


def test_tape_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        k = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((32, 4)), requires_grad=True)
        x = Tensor(rng.standard_normal((3, 1, 4, 4)))
        h = ad.reshape(ad.relu(ad.conv2d(x, k, padding=1)), (3, 32))
        loss = ad.softmax_cross_entropy(ad.matmul(h, w), [0, 1, 2])
        loss.backward()
        return loss.data.copy(), k.grad.copy(), w.grad.copy()

    first, second = run(), run()
    assert all(np.array_equal(a, b) for a, b in zip(first, second))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert y.op == "leaf" or not y.requires_grad
