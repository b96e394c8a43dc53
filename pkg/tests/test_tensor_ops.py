"""Forward semantics of the tensor ops: known values, shape and domain
errors, tape recording rules."""
import numpy as np
import pytest

from dpfrl.engine import (
    OP_TABLE,
    BatchNormState,
    Tape,
    Tensor,
    add,
    assert_finite,
    backward,
    batchnorm,
    clamp,
    concat,
    constant,
    detach,
    exp,
    forward_op,
    gather_rows,
    gaussian_sample,
    log,
    logsumexp,
    matmul,
    parameter,
    relu,
    reshape,
    sigmoid,
    slice_,
    softplus,
    sqrt,
    square,
    sum_,
    RngStream,
)
from dpfrl.errors import ContractError, DomainError, NumericsError, ShapeError


def test_square_forward_and_grad():
    x = parameter(3.0)
    with Tape() as tape:
        y = square(x)
        tape.backward(y)
    assert y.item() == pytest.approx(9.0)
    assert x.grad == pytest.approx(6.0)


def test_logsumexp_ln2():
    x = constant([0.0, 0.0])
    assert logsumexp(x, axis=0).item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_matmul_identity():
    a = constant([[1.0, 2.0], [3.0, 4.0]])
    eye = constant(np.eye(2))
    np.testing.assert_allclose(matmul(a, eye).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_shape_error_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))


def test_log_sqrt_domain_errors():
    with pytest.raises(DomainError):
        log(constant([-1.0]))
    with pytest.raises(DomainError):
        sqrt(constant([-0.5]))


def test_backward_sum_of_squares():
    x = parameter([1.0, 2.0, 3.0])
    with Tape() as tape:
        y = sum_(square(x))
        tape.backward(y)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_logsumexp_equal_logits():
    x = parameter([0.0, 0.0])
    with Tape() as tape:
        y = logsumexp(x, axis=0)
        tape.backward(y)
    np.testing.assert_allclose(x.grad, [0.5, 0.5])


def test_backward_requires_scalar_root():
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        y = square(x)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_backward_accumulates_over_two_consumers():
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        y = sum_(add(square(x), square(x)))
        tape.backward(y)
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_detach_blocks_gradient():
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        y = sum_(square(detach(x)))
        z = add(y, sum_(x))
        tape.backward(z)
    np.testing.assert_allclose(x.grad, [1.0, 1.0])


def test_constants_not_recorded():
    with Tape() as tape:
        y = square(constant([1.0, 2.0]))
        assert y.node is None
        assert not tape.nodes


def test_no_tape_no_recording():
    x = parameter([1.0])
    y = square(x)
    assert y.node is None


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(ContractError):
            with Tape():
                pass


def test_tape_paused_suspends_recording():
    x = parameter([2.0])
    with Tape() as tape:
        with Tape.paused():
            y = square(x)
        assert y.node is None
        z = square(x)
        tape.backward(z)
    assert x.grad == pytest.approx(4.0)


def test_gaussian_sample_bit_reproducible():
    mean = constant(np.zeros((3, 4)))
    log_var = constant(np.zeros((3, 4)))
    a = gaussian_sample(mean, log_var, RngStream(9, 5))
    b = gaussian_sample(mean, log_var, RngStream(9, 5))
    assert np.array_equal(a.data, b.data)


def test_gaussian_sample_shape_mismatch():
    with pytest.raises(ShapeError):
        gaussian_sample(constant(np.zeros(3)), constant(np.zeros(4)), RngStream(0, 0))


def test_gather_rows_values_and_repeats():
    x = constant(np.arange(12.0).reshape(2, 3, 2))
    idx = np.array([[0, 0], [2, 1]])
    out = gather_rows(x, idx)
    np.testing.assert_allclose(out.data[0, 0], x.data[0, 0])
    np.testing.assert_allclose(out.data[0, 1], x.data[0, 0])
    np.testing.assert_allclose(out.data[1, 0], x.data[1, 2])


def test_clamp_one_sided():
    x = constant([-50.0, 0.0, 50.0])
    np.testing.assert_allclose(clamp(x, hi=30.0).data, [-50.0, 0.0, 30.0])
    np.testing.assert_allclose(clamp(x, lo=-30.0).data, [-30.0, 0.0, 50.0])


def test_softplus_at_zero_is_ln2():
    assert softplus(constant([0.0])).data[0] == pytest.approx(np.log(2.0))


def test_assert_finite_raises_with_context():
    with pytest.raises(NumericsError, match="belief"):
        assert_finite(constant([np.nan]), "belief")
    # identity on finite input
    t = constant([1.0])
    assert assert_finite(t, "x") is t


def test_forward_op_dispatch():
    out = forward_op("add", constant([1.0]), constant([2.0]))
    assert out.item() == pytest.approx(3.0)
    with pytest.raises(ContractError):
        forward_op("conv2d", constant([1.0]))
    # every documented op kind is dispatchable
    for kind in ("add", "sub", "mul", "matmul", "concat", "slice", "sum", "mean",
                 "exp", "log", "tanh", "sigmoid", "softplus", "relu", "clamp",
                 "logsumexp", "square", "sqrt", "scale", "gaussian_sample",
                 "detach", "batchnorm"):
        assert kind in OP_TABLE


def test_batchnorm_eval_is_affine_and_deterministic():
    state = BatchNormState(3)
    state.running_mean = np.array([1.0, 2.0, 3.0])
    state.running_var = np.array([4.0, 4.0, 4.0])
    gamma = constant(np.full(3, 2.0))
    beta = constant(np.ones(3))
    x = constant(np.array([[3.0, 4.0, 5.0], [1.0, 2.0, 3.0]]))
    out1 = batchnorm(x, gamma, beta, state, training=False)
    out2 = batchnorm(x, gamma, beta, state, training=False)
    assert np.array_equal(out1.data, out2.data)
    expected = 2.0 * (x.data - state.running_mean) / np.sqrt(4.0 + state.eps) + 1.0
    np.testing.assert_allclose(out1.data, expected, rtol=1e-12)


def test_batchnorm_train_normalizes_batch():
    state = BatchNormState(2)
    rng = np.random.default_rng(3)
    x = constant(rng.normal(2.0, 3.0, (64, 2)))
    out = batchnorm(x, constant(np.ones(2)), constant(np.zeros(2)), state, True)
    np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.std(axis=0), 1.0, atol=1e-3)
    # running stats moved toward the batch stats
    assert np.all(state.running_mean != 0.0)


def test_slice_and_concat_round_trip():
    x = constant(np.arange(12.0).reshape(3, 4))
    left = slice_(x, (slice(None), slice(0, 2)))
    right = slice_(x, (slice(None), slice(2, 4)))
    np.testing.assert_allclose(concat([left, right], axis=1).data, x.data)


def test_finite_inputs_nonfinite_exp_is_visible():
    # exp may legitimately overflow to inf; the NaN check op reports it
    big = exp(constant([1000.0]))
    with pytest.raises(NumericsError):
        assert_finite(big, "exp overflow")


def test_reshape_shape_error():
    with pytest.raises(ShapeError):
        reshape(constant(np.ones((2, 3))), (4, 2))
