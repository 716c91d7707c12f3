from __future__ import annotations

import numpy as np
import pytest

from gpe.errors import ConfigurationError, DimensionError, NumericError
from gpe.numcore import (
    ParamBlock,
    dense,
    finite_diff_check,
    matmul,
    relu,
    relu_grad,
    sgd_step,
)


def triple_loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_matmul_identity() -> None:
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 5))
    assert np.array_equal(matmul(np.eye(3), m), m)


def test_matmul_zero() -> None:
    a = dense([[1.0, 2.0], [3.0, 4.0]])
    z = dense([[0.0], [0.0]])
    assert np.array_equal(matmul(a, z), z)


def test_matmul_against_triple_loop_oracle() -> None:
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(7, 3))
    assert np.max(np.abs(matmul(a, b) - triple_loop_matmul(a, b))) < 1e-12


def test_matmul_identity_associativity_bit_exact() -> None:
    rng = np.random.default_rng(2)
    a = rng.normal(size=(4, 6))
    b = rng.normal(size=(6, 2))
    i6 = np.eye(6)
    left = matmul(matmul(a, i6), b)
    right = matmul(a, matmul(i6, b))
    direct = matmul(a, b)
    assert np.array_equal(left, right)
    assert np.array_equal(left, direct)


def test_matmul_shape_error_names_both_shapes() -> None:
    with pytest.raises(DimensionError) as err:
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    assert "(2, 3)" in str(err.value)
    assert "x" in str(err.value)


def test_matmul_deterministic_repeats() -> None:
    rng = np.random.default_rng(3)
    a = rng.normal(size=(16, 32))
    b = rng.normal(size=(32, 8))
    first = matmul(a, b)
    for _ in range(5):
        assert np.array_equal(matmul(a, b), first)


def test_relu_values() -> None:
    assert np.array_equal(relu(dense([-1.0, 0.0, 2.0])), dense([0.0, 0.0, 2.0]))


def test_relu_grad_subgradient_zero_at_zero() -> None:
    x = dense([-1.0, 0.0, 2.0])
    up = dense([5.0, 5.0, 5.0])
    assert np.array_equal(relu_grad(x, up), dense([0.0, 0.0, 5.0]))


def test_relu_grad_matches_finite_differences_off_zero() -> None:
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 5))
    x[np.abs(x) < 1e-2] = 0.5  # keep away from the kink
    up = np.ones_like(x)
    eps = 1e-6
    fd = (relu(x + eps) - relu(x - eps)) / (2 * eps)
    assert np.max(np.abs(relu_grad(x, up) - fd)) < 1e-6


def test_sgd_step_noop_on_zero_grad() -> None:
    p = ParamBlock([[1.0, 1.0]])
    sgd_step(p, 0.1)
    assert np.array_equal(p.value, dense([1.0, 1.0]))


def test_sgd_step_arithmetic_and_grad_clear() -> None:
    p = ParamBlock([[1.0]])
    p.grad[:] = 2.0
    sgd_step(p, 0.5)
    assert p.value[0, 0] == 0.0
    assert np.array_equal(p.grad, np.zeros((1, 1)))


def test_sgd_converges_on_quadratic() -> None:
    p = ParamBlock([[1.0]])
    for _ in range(100):
        p.grad[:] = 2.0 * p.value  # d/dw of w^2
        sgd_step(p, 0.1)
    assert abs(p.value[0, 0]) < 1e-3


def test_sgd_rejects_bad_lr() -> None:
    with pytest.raises(ConfigurationError):
        sgd_step(ParamBlock([[1.0]]), 0.0)
    with pytest.raises(ConfigurationError):
        sgd_step(ParamBlock([[1.0]]), -1.0)


def quadratic_loss(blocks) -> float:
    return sum(float(np.sum(b.value**2)) for b in blocks)


def test_finite_diff_quadratic_is_exact() -> None:
    p = ParamBlock([[1.3]])
    p.grad[:] = 2.0 * p.value
    assert finite_diff_check(quadratic_loss, [p], 1e-5) < 1e-8


def test_finite_diff_catches_corrupted_gradient() -> None:
    p = ParamBlock([[1.0]])
    p.grad[:] = 2.0 * 2.0 * p.value  # doubled on purpose
    assert finite_diff_check(quadratic_loss, [p], 1e-5) > 0.4


def test_finite_diff_multi_block_subset() -> None:
    rng = np.random.default_rng(5)
    blocks = [ParamBlock(rng.normal(size=(9, 7))) for _ in range(4)]
    for b in blocks:
        b.grad[:] = 2.0 * b.value
    err = finite_diff_check(quadratic_loss, blocks, 1e-5, rng=np.random.default_rng(6))
    assert err < 1e-8


def test_finite_diff_validates_epsilon() -> None:
    p = ParamBlock([[1.0]])
    with pytest.raises(ConfigurationError):
        finite_diff_check(quadratic_loss, [p], 1e-2)
    with pytest.raises(ConfigurationError):
        finite_diff_check(quadratic_loss, [p], 1e-8)


def test_finite_diff_flags_non_finite_loss() -> None:
    p = ParamBlock([[0.0]])

    def bad_loss(blocks) -> float:
        with np.errstate(invalid="ignore", divide="ignore"):
            return float(np.log(blocks[0].value[0, 0]))  # -inf at 0, nan below

    with pytest.raises(NumericError):
        finite_diff_check(bad_loss, [p], 1e-5)


def test_dense_rejects_non_finite() -> None:
    with pytest.raises(NumericError):
        dense([np.inf, 0.0])
