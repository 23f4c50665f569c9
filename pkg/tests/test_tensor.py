import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adoc.tensor import (
    AdamState,
    ContractError,
    GradTape,
    OPS,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    channel_norm,
    concat,
    conv2d,
    layer_norm,
    log_softmax_rows,
    logaddexp,
    matmul,
    mul,
    narrow,
    relu,
    softmax_rows,
    take,
    tmean,
    tsum,
)


def matmul_oracle(a, b):
    """Triple-loop reference product."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def conv2d_oracle(x, k, stride, padding):
    """Direct six-loop cross-correlation."""
    ci, h, w = x.shape
    co, _, kh, kw = k.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(ci):
                    for u in range(kh):
                        for v in range(kw):
                            acc += k[o, c, u, v] * xp[c, i * sh + u, j * sw + v]
                out[o, i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_row_times_column(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        got = matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, matmul_oracle(a, b), rtol=0, atol=1e-12)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9, dtype=float).reshape(1, 3, 3)
        k = np.ones((1, 1, 1, 1))
        out = conv2d(Tensor(x), Tensor(k))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_sums(self):
        out = conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(out.data, [[[4.0]]])

    @pytest.mark.parametrize("stride,padding", [((1, 1), (0, 0)), ((2, 1), (1, 1)), ((2, 2), (1, 0))])
    def test_matches_nested_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 5, 8))
        k = rng.normal(size=(3, 2, 3, 3))
        got = conv2d(Tensor(x), Tensor(k), stride, padding).data
        np.testing.assert_allclose(got, conv2d_oracle(x, k, stride, padding), rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(softmax_rows(Tensor([2.0, 2.0])).data, [0.5, 0.5], atol=1e-12)

    def test_exp_ratio(self):
        out = softmax_rows(Tensor([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_large_values_do_not_overflow(self):
        out = softmax_rows(Tensor([1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = softmax_rows(Tensor(rng.normal(size=(4, 7)) * 10))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
           st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, row, c):
        x = np.array(row)
        a = softmax_rows(Tensor(x)).data
        b = softmax_rows(Tensor(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_empty_last_axis(self):
        with pytest.raises(ShapeError):
            softmax_rows(Tensor(np.ones((2, 0))))


class TestLayerNorm:
    def test_constant_row_is_zeroed(self):
        out = layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_two_point_row(self):
        out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-12)

    def test_standardizes_arbitrary_rows(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 16)) * 4 + 2
        out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-12)
        np.testing.assert_allclose(out.var(axis=-1), np.ones(3), atol=1e-9)


class TestBackward:
    def test_square_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        with GradTape():
            loss = mul(x, x)
        backward(loss)
        np.testing.assert_allclose(x.grad, 6.0, atol=1e-12)

    def test_softmax_sum_is_constant(self):
        x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
        with GradTape():
            loss = tsum(softmax_rows(x))
        backward(loss)
        np.testing.assert_allclose(x.grad, np.zeros(3), atol=1e-12)

    def test_unreachable_tracked_tensor_gets_zero_grad(self):
        x = Tensor(2.0, requires_grad=True)
        y = Tensor(4.0, requires_grad=True)
        with GradTape():
            _side = mul(y, y)
            loss = mul(x, x)
        backward(loss)
        np.testing.assert_array_equal(y.grad, 0.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with GradTape():
            y = mul(x, x)
        with pytest.raises(ContractError):
            backward(y)

    def test_loss_outside_tape_rejected(self):
        x = Tensor(3.0, requires_grad=True)
        loss = mul(x, x)
        with pytest.raises(ContractError):
            backward(loss)

    def test_tape_is_single_use(self):
        x = Tensor(3.0, requires_grad=True)
        with GradTape():
            loss = mul(x, x)
        backward(loss)
        with pytest.raises(ContractError):
            backward(loss)

    def test_grad_accumulates_across_uses(self):
        x = Tensor(2.0, requires_grad=True)
        with GradTape():
            loss = tsum(concat([mul(x, x).reshape(1), mul(x, x).reshape(1)]))
        backward(loss)
        np.testing.assert_allclose(x.grad, 8.0, atol=1e-12)


def finite_difference(fn, arrays, wrt, h=1e-5):
    """Central-difference gradient of scalar fn(*arrays) w.r.t. arrays[wrt]."""
    base = arrays[wrt]
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = [a.copy() for a in arrays]
        bumped[wrt].reshape(-1)[i] += h
        fp = fn(*bumped)
        bumped[wrt].reshape(-1)[i] -= 2 * h
        fm = fn(*bumped)
        flat[i] = (fp - fm) / (2 * h)
    return grad


def op_gradient_cases(rng):
    """One (callable, input arrays) pair per registered op, with inputs kept
    away from kinks so central differences are trustworthy."""
    a23 = rng.normal(size=(2, 3))
    b23 = rng.normal(size=(2, 3))
    pos = np.abs(rng.normal(size=(2, 3))) + 0.5
    away = rng.normal(size=(2, 3))
    away[np.abs(away) < 0.2] += 0.5
    x_conv = rng.normal(size=(2, 4, 5))
    k_conv = rng.normal(size=(3, 2, 3, 3))
    gain = rng.normal(size=(3,)) + 1.5
    bias = rng.normal(size=(3,))
    cgain = rng.normal(size=(2,)) + 1.5
    cbias = rng.normal(size=(2,))
    idx = np.array([[0, 5], [3, 3]])
    return {
        "add": (lambda a, b: a + b, [a23, rng.normal(size=(3,))]),
        "sub": (lambda a, b: a - b, [a23, b23]),
        "mul": (lambda a, b: a * b, [a23, rng.normal(size=(3,))]),
        "div": (lambda a, b: a / b, [a23, pos]),
        "neg": (lambda a: -a, [a23]),
        "relu": (lambda a: relu(a), [away]),
        "exp": (lambda a: __import__("adoc.tensor", fromlist=["exp"]).exp(a), [a23]),
        "log": (lambda a: __import__("adoc.tensor", fromlist=["log"]).log(a), [pos]),
        "logaddexp": (lambda a, b: logaddexp(a, b), [a23, b23]),
        "tsum": (lambda a: tsum(a, axis=1, keepdims=True), [a23]),
        "tmean": (lambda a: tmean(a, axis=0), [a23]),
        "reshape": (lambda a: a.reshape(3, 2), [a23]),
        "transpose": (lambda a: a.transpose(), [a23]),
        "narrow": (lambda a: narrow(a, 1, 1, 2), [a23]),
        "concat": (lambda a, b: concat([a, b], axis=1), [a23, b23]),
        "take": (lambda a: take(a, idx), [a23]),
        "matmul": (lambda a, b: matmul(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "conv2d": (lambda x, k: conv2d(x, k, (2, 1), (1, 1)), [x_conv, k_conv]),
        "softmax_rows": (lambda a: softmax_rows(a), [a23]),
        "log_softmax_rows": (lambda a: log_softmax_rows(a), [a23]),
        "layer_norm": (lambda x, g, b: layer_norm(x, g, b), [a23, gain, bias]),
        "channel_norm": (lambda x, g, b: channel_norm(x, g, b), [x_conv, cgain, cbias]),
    }


def check_op_gradients(op_fn, arrays, rel_tol=1e-4):
    """Compare tape gradients of a random projection of op(...) against
    central differences. The projection keeps the scalar loss sensitive to
    every output entry (a plain sum is constant for normalizing ops)."""
    probe = np.random.default_rng(29).normal(size=op_fn(*[Tensor(a) for a in arrays]).shape)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape():
        loss = tsum(op_fn(*tensors) * Tensor(probe))
    backward(loss)

    def scalar(*arrs):
        return tsum(op_fn(*[Tensor(a) for a in arrs]) * Tensor(probe)).item()

    for i, t in enumerate(tensors):
        numeric = finite_difference(scalar, arrays, i)
        denom = max(np.abs(numeric).max(), np.abs(t.grad).max(), 1e-8)
        rel = np.abs(t.grad - numeric).max() / denom
        assert rel < rel_tol, f"input {i}: rel err {rel}"


class TestGradientChecks:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_op_matches_finite_differences(self, name):
        cases = op_gradient_cases(np.random.default_rng(13))
        assert name in cases, f"no gradient-check case registered for op {name!r}"
        fn, arrays = cases[name]
        check_op_gradients(fn, arrays)

    def test_every_case_targets_a_registered_op(self):
        cases = op_gradient_cases(np.random.default_rng(13))
        assert set(cases) == set(OPS)


class TestAdam:
    def test_first_step_magnitude(self):
        p = Tensor(0.0, requires_grad=True, name="p")
        state = AdamState({"p": p})
        p.grad = np.ones(())
        adam_step({"p": p}, state, lr=1e-3)
        # Hand evaluation: m_hat = v_hat = 1 after step 1, so the update is
        # -lr / (1 + eps).
        expected = -1e-3 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-18)

    def test_zero_grad_leaves_params_unchanged(self):
        p = Tensor([1.0, -2.0], requires_grad=True, name="p")
        state = AdamState({"p": p})
        p.grad = np.zeros(2)
        adam_step({"p": p}, state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_two_steps_match_scalar_reference(self):
        def reference(x0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
            x, m, v = x0, 0.0, 0.0
            for t, g in enumerate(grads, start=1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                mh = m / (1 - b1 ** t)
                vh = v / (1 - b2 ** t)
                x -= lr * mh / (math.sqrt(vh) + eps)
            return x

        p = Tensor(0.7, requires_grad=True, name="p")
        state = AdamState({"p": p})
        for _ in range(2):
            p.grad = np.full((), 0.3)
            adam_step({"p": p}, state, lr=1e-2)
        np.testing.assert_allclose(p.data, reference(0.7, [0.3, 0.3], 1e-2), atol=1e-12)

    def test_missing_grad_is_an_error(self):
        p = Tensor(1.0, requires_grad=True, name="p")
        state = AdamState({"p": p})
        with pytest.raises(ContractError):
            adam_step({"p": p}, state, lr=1e-3)


class TestDeterminism:
    def test_same_seed_same_computation(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            with GradTape():
                loss = tsum(softmax_rows(matmul(x, w)) * Tensor(rng.normal(size=(4, 4))))
            backward(loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run(99)
        l2, gx2, gw2 = run(99)
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)
