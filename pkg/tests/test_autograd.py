import math

import numpy as np
import pytest

from core import ops
from core.autograd import Tensor, Parameter, Tape, backward
from core.gradcheck import grad_check
from tools.verify import Verifier


def test_tensor_normalizes_input():
    t = Tensor(3.0)
    assert t.shape == (1,)
    assert Tensor(np.arange(4)).dtype == np.float32
    assert Tensor(np.ones(2), dtype="f64").dtype == np.float64
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Tensor([1.0], dtype="f16")


def test_parameter_copies_and_tracks_grad():
    src = np.ones((2, 2))
    p = Parameter(src)
    p.data[0, 0] = 5.0
    assert src[0, 0] == 1.0
    assert p.requires_grad
    assert np.all(p.grad == 0)


def test_no_tape_means_no_recording():
    p = Parameter(np.ones(3))
    y = ops.mul(p, 2.0)
    assert not y.requires_grad


def test_shared_input_gradients_sum():
    x = Parameter(np.array([1.0, -2.0, 3.0]), dtype="f64")
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x], 2 * x.data)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_across_tapes():
    x = Parameter(np.array([1.0, 2.0]), dtype="f64")
    for _ in range(2):
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, 3.0))
        backward(tape, loss)
    np.testing.assert_allclose(x.grad, [6.0, 6.0])

    x.zero_grad()
    with Tape() as tape:
        loss = ops.sum(x)
    grads = tape.backward(loss, accumulate=False)
    np.testing.assert_allclose(grads[x], [1.0, 1.0])
    assert np.all(x.grad == 0)


def test_backward_twice_is_rejected():
    x = Parameter(np.ones(2), dtype="f64")
    with Tape() as tape:
        loss = ops.sum(x)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_backward_requires_scalar_on_tape():
    x = Parameter(np.ones(3), dtype="f64")
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)

    outside = ops.sum(x)
    with Tape() as tape:
        ops.sum(x)
    with pytest.raises(RuntimeError):
        tape.backward(outside)


def test_nan_in_forward_raises():
    with pytest.raises(FloatingPointError):
        ops.exp(Tensor([1000.0], dtype="f32"))


def test_primitive_forward_dispatch():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 4)))
    assert ops.primitive_forward("matmul", (a, b)).shape == (2, 4)
    with pytest.raises(ValueError, match="未知原语"):
        ops.primitive_forward("conv5x5", (a,))
    with pytest.raises(ValueError, match="matmul"):
        ops.matmul(b, b)


@pytest.mark.parametrize("smoothing", [0.0, 0.1, 0.5])
def test_cross_entropy_uniform_logits_is_log_k(smoothing):
    logits = Tensor(np.zeros((4, 7)), dtype="f64")
    loss = ops.cross_entropy(logits, [0, 3, 6, 1], smoothing)
    assert loss.item() == pytest.approx(math.log(7), abs=1e-12)


def test_softmax_rows_sum_to_one(rng):
    y = ops.softmax(Tensor(rng.normal(size=(3, 5)), dtype="f64"))
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0, atol=1e-12)


CASES = Verifier()._primitive_cases(np.random.default_rng(0))


@pytest.mark.parametrize("name,fn,inputs", CASES, ids=[c[0] for c in CASES])
def test_primitive_gradients(name, fn, inputs):
    w = {}

    def scalar(*xs):
        y = fn(*xs)
        if y.size == 1:
            return y
        w.setdefault("w", np.random.default_rng(5).normal(size=y.shape))
        return ops.sum(ops.mul(y, ops.constant(w["w"], y)))

    assert grad_check(scalar, inputs) < 1e-5


def test_grad_check_rejects_f32_and_nondeterminism():
    with pytest.raises(ValueError):
        grad_check(lambda x: ops.sum(x), [Parameter(np.ones(2), dtype="f32")])

    rng = np.random.default_rng(0)
    x = Parameter(np.ones(3), dtype="f64")
    with pytest.raises(RuntimeError):
        grad_check(lambda x: ops.sum(ops.mul(x, float(rng.normal()))), [x])


def test_grad_check_sampled(rng):
    x = Parameter(rng.normal(size=(10, 10)), dtype="f64")
    assert grad_check(lambda x: ops.sum(ops.gelu(x)), [x], samples=20) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_primitive_vjps_across_seeds(seed):
    wrng = np.random.default_rng(1000 + seed)
    for name, fn, inputs in Verifier()._primitive_cases(np.random.default_rng(seed)):
        w = wrng.normal(size=fn(*inputs).shape)

        def scalar(*xs, fn=fn, w=w):
            y = fn(*xs)
            return y if y.size == 1 else ops.sum(ops.mul(y, ops.constant(w, y)))

        assert grad_check(scalar, inputs) < 1e-6, name


def test_backward_is_additive(rng):
    x = Parameter(rng.normal(size=(3, 4)), dtype="f64")

    def f(x):
        return ops.sum(ops.gelu(x))

    def g(x):
        return ops.sum(ops.mul(ops.exp(x), x))

    def grad_of(fn):
        with Tape() as tape:
            loss = fn(x)
        return tape.backward(loss, accumulate=False)[x]

    combined = grad_of(lambda x: ops.add(f(x), g(x)))
    np.testing.assert_allclose(combined, grad_of(f) + grad_of(g), rtol=0, atol=1e-12)


def test_relu_masks_negative_inputs():
    x = Parameter(np.array([-2.0, 0.5, 3.0]), dtype="f64")
    with Tape() as tape:
        loss = ops.sum(ops.relu(x))
    np.testing.assert_array_equal(tape.backward(loss)[x], [0.0, 1.0, 1.0])
    assert loss.item() == 3.5
