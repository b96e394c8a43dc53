"""Finite-difference verification of every op's backward pass, plus the
reparameterization and batchnorm gradient paths."""
import numpy as np
import pytest

from dpfrl.engine import (
    BatchNormState,
    RngStream,
    Tape,
    batchnorm,
    broadcast_to,
    clamp,
    concat,
    exp,
    gather_rows,
    gaussian_sample,
    grad_check,
    log,
    logsumexp,
    matmul,
    mean_,
    mul,
    parameter,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softplus,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
    transpose2d,
)
from dpfrl.errors import ContractError


def _rand(gen, shape, positive=False, away_from_kinks=False):
    x = gen.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    if away_from_kinks:
        x = x + 0.25 * np.sign(x) + (x == 0.0)
    return parameter(x)


# one scalar-valued builder per op kind; shapes drawn per trial
CASES = {
    "add": lambda g, s: (lambda a, b: sum_(tanh(a + b)), [_rand(g, s), _rand(g, s)]),
    "add_broadcast": lambda g, s: (lambda a, b: sum_(tanh(a + b)),
                                   [_rand(g, s), _rand(g, s[-1:])]),
    "sub": lambda g, s: (lambda a, b: sum_(tanh(sub(a, b))), [_rand(g, s), _rand(g, s)]),
    "mul": lambda g, s: (lambda a, b: sum_(mul(a, b)), [_rand(g, s), _rand(g, s)]),
    "scale": lambda g, s: (lambda a: sum_(scale(a, -1.7)), [_rand(g, s)]),
    "matmul": lambda g, s: (lambda a, b: sum_(tanh(matmul(a, b))),
                            [_rand(g, (s[0], s[1])), _rand(g, (s[1], 3))]),
    "transpose2d": lambda g, s: (lambda a: sum_(square(transpose2d(a))),
                                 [_rand(g, (s[0], s[1]))]),
    "concat": lambda g, s: (lambda a, b: sum_(tanh(concat([a, b], axis=0))),
                            [_rand(g, s), _rand(g, s)]),
    "slice": lambda g, s: (lambda a: sum_(square(slice_(a, (slice(0, max(1, s[0] // 2)),)))),
                           [_rand(g, s)]),
    "reshape": lambda g, s: (lambda a: sum_(tanh(reshape(a, (a.size,)))), [_rand(g, s)]),
    "broadcast_to": lambda g, s: (
        lambda a: sum_(square(broadcast_to(reshape(a, (1,) + tuple(s)), (4,) + tuple(s)))),
        [_rand(g, s)]),
    "sum": lambda g, s: (lambda a: sum_(square(sum_(a, axis=0))), [_rand(g, s)]),
    "mean": lambda g, s: (lambda a: sum_(square(mean_(a, axis=-1))), [_rand(g, s)]),
    "exp": lambda g, s: (lambda a: sum_(exp(a)), [_rand(g, s)]),
    "log": lambda g, s: (lambda a: sum_(log(a)), [_rand(g, s, positive=True)]),
    "tanh": lambda g, s: (lambda a: sum_(tanh(a)), [_rand(g, s)]),
    "sigmoid": lambda g, s: (lambda a: sum_(sigmoid(a)), [_rand(g, s)]),
    "softplus": lambda g, s: (lambda a: sum_(softplus(a)), [_rand(g, s)]),
    "relu": lambda g, s: (lambda a: sum_(relu(a)), [_rand(g, s, away_from_kinks=True)]),
    "clamp": lambda g, s: (lambda a: sum_(clamp(a, -0.5, 0.5)),
                           [_rand(g, s, away_from_kinks=True)]),
    "logsumexp": lambda g, s: (lambda a: sum_(logsumexp(a, axis=-1)), [_rand(g, s)]),
    "square": lambda g, s: (lambda a: sum_(square(a)), [_rand(g, s)]),
    "sqrt": lambda g, s: (lambda a: sum_(sqrt(a)), [_rand(g, s, positive=True)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name):
    """100 random shapes/seeds per op kind, rel. error < 1e-4 at 64-bit."""
    worst = 0.0
    for trial in range(100):
        gen = np.random.default_rng(hash((name, trial)) % 2**32)
        shape = tuple(int(d) for d in gen.integers(1, 5, size=2))
        f, inputs = CASES[name](gen, shape)
        worst = max(worst, grad_check(f, inputs))
    assert worst < 1e-4, f"{name}: max rel err {worst:.3e}"


def test_gather_rows_gradient_with_repeats():
    gen = np.random.default_rng(0)
    idx = np.array([[0, 0, 2], [1, 1, 1]])
    err = grad_check(
        lambda a: sum_(square(gather_rows(a, idx))), [_rand(gen, (2, 3, 4))]
    )
    assert err < 1e-6


def test_gaussian_sample_reparameterized_gradient():
    gen = np.random.default_rng(1)

    def f(mean, log_var):
        s = gaussian_sample(mean, log_var, RngStream(11, 3))
        return sum_(square(s))

    err = grad_check(f, [_rand(gen, (4, 3)), _rand(gen, (4, 3))])
    assert err < 1e-6


def test_batchnorm_train_gradient():
    gen = np.random.default_rng(2)
    state = BatchNormState(4)

    def f(x, gamma, beta):
        return sum_(square(batchnorm(x, gamma, beta, state, training=True)))

    err = grad_check(f, [_rand(gen, (8, 4)), _rand(gen, (4,), positive=True),
                         _rand(gen, (4,))])
    assert err < 1e-6


def test_batchnorm_eval_gradient():
    gen = np.random.default_rng(3)
    state = BatchNormState(4)
    state.running_mean = gen.standard_normal(4)
    state.running_var = np.abs(gen.standard_normal(4)) + 0.5

    def f(x, gamma, beta):
        return sum_(square(batchnorm(x, gamma, beta, state, training=False)))

    err = grad_check(f, [_rand(gen, (8, 4)), _rand(gen, (4,), positive=True),
                         _rand(gen, (4,))])
    assert err < 1e-6


def test_grad_check_rejects_nonscalar():
    gen = np.random.default_rng(4)
    with pytest.raises(ContractError):
        grad_check(lambda a: square(a), [_rand(gen, (3,))])


def test_softplus_derivative_at_zero_is_half():
    x = parameter([0.0])
    with Tape() as tape:
        y = sum_(softplus(x))
        tape.backward(y)
    assert x.grad[0] == pytest.approx(0.5, abs=1e-12)
