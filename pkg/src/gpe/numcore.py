"""Dense numerical kernel for the fixed computation graph used here.

Matrices are 2-D C-order float64 numpy arrays throughout ("dense matrix"
below always means that). numpy supplies the arithmetic; this module pins
the contracts the rest of the package relies on: shape checking with real
error messages, the ReLU subgradient convention, in-place SGD steps, and a
central-difference gradient checker used as the repo-wide gradient gate.

Determinism: with a fixed BLAS configuration, every operation here is a pure
function of its inputs, so repeated calls are bit-identical.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError

DenseMatrix = np.ndarray


def dense(data, rows: int | None = None, cols: int | None = None) -> DenseMatrix:
    """Build a 2-D float64 matrix, validating shape and finiteness."""
    m = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains non-finite entries")
    return m


class ParamBlock:
    """A learnable matrix plus its gradient accumulator (same shape)."""

    __slots__ = ("value", "grad")

    def __init__(self, value) -> None:
        self.value: DenseMatrix = dense(value)
        self.grad: DenseMatrix = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def copy(self) -> "ParamBlock":
        block = ParamBlock(self.value.copy())
        block.grad = self.grad.copy()
        return block


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """Matrix product with explicit shape validation."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply shapes {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return a @ b


def relu(x: DenseMatrix) -> DenseMatrix:
    return np.maximum(x, 0.0)


def relu_grad(x: DenseMatrix, upstream: DenseMatrix) -> DenseMatrix:
    """Pass upstream gradient where x > 0; the subgradient at 0 is 0."""
    if x.shape != upstream.shape:
        raise DimensionError(
            f"relu_grad shapes differ: {tuple(x.shape)} vs {tuple(upstream.shape)}"
        )
    return np.where(x > 0.0, upstream, 0.0)


def sgd_step(param: ParamBlock, lr: float) -> ParamBlock:
    """value <- value - lr * grad, then clear the gradient."""
    if not lr > 0.0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    param.value -= lr * param.grad
    param.zero_grad()
    return param


def _blocks_of(state) -> list[ParamBlock]:
    if hasattr(state, "params"):
        return list(state.params())
    if isinstance(state, ParamBlock):
        return [state]
    if isinstance(state, Iterable):
        return list(state)
    raise ConfigurationError(f"cannot extract parameter blocks from {type(state)!r}")


def finite_diff_check(
    loss_fn: Callable[[object], float],
    state,
    epsilon: float,
    rng: np.random.Generator | None = None,
    min_coords: int = 200,
) -> float:
    """Compare analytic gradients in ``state`` against central differences.

    ``state`` is anything exposing ``params()`` (or a bare sequence of
    ParamBlocks) whose ``grad`` fields were already populated by the caller's
    backward pass. A random subset of at least ``min_coords`` coordinates
    (all of them if there are fewer) is perturbed in place by +/- epsilon.
    Returns max |analytic - fd| / max(1, |fd|) over the subset.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ConfigurationError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    if rng is None:
        rng = np.random.default_rng(0)

    blocks = _blocks_of(state)
    coords: list[tuple[int, int]] = []  # (block index, flat index)
    for bi, block in enumerate(blocks):
        coords.extend((bi, fi) for fi in range(block.value.size))
    if not coords:
        raise ConfigurationError("state has no parameters to check")
    if len(coords) > min_coords:
        picked = rng.choice(len(coords), size=min_coords, replace=False)
        coords = [coords[i] for i in picked]

    worst = 0.0
    for bi, fi in coords:
        flat = blocks[bi].value.reshape(-1)
        original = flat[fi]
        flat[fi] = original + epsilon
        loss_plus = float(loss_fn(state))
        flat[fi] = original - epsilon
        loss_minus = float(loss_fn(state))
        flat[fi] = original
        if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
            raise NumericError(
                f"non-finite loss while perturbing block {bi} coordinate {fi}"
            )
        fd = (loss_plus - loss_minus) / (2.0 * epsilon)
        analytic = blocks[bi].grad.reshape(-1)[fi]
        worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return worst


def assert_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{name} produced non-finite values")


__all__ = [
    "DenseMatrix",
    "ParamBlock",
    "dense",
    "matmul",
    "relu",
    "relu_grad",
    "sgd_step",
    "finite_diff_check",
    "assert_finite",
]
