"""Prototype-distance classifier.

A two-hidden-layer MLP encoder followed by an affine head maps inputs to an
m-dimensional feature space. Each class owns a bank of learnable prototype
rows; the class distance is the L2 distance from the feature to the nearest
row of that class's bank, and class probabilities are a softmax over negated
distances. Training minimizes mean cross-entropy of those probabilities,
optionally plus a multiplier-weighted penalty on prototype drift (see
constraint.py). All gradients are derived by hand; finite_diff_check in
numcore is the safety net.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, InvariantError
from .numcore import DenseMatrix, ParamBlock, assert_finite, dense

_LOG_CLAMP = 1e-300


class PrototypeBank:
    """Learnable prototype rows for one class.

    frozen_rows counts the leading rows inherited from earlier stages; only
    those rows are drift-constrained in dynamic mode. birth_stages records,
    per row, the stage at which the row was created (for export/analysis).
    """

    __slots__ = ("class_id", "block", "frozen_rows", "birth_stages")

    def __init__(self, class_id: int, prototypes, birth_stage: int = 1) -> None:
        self.class_id = class_id
        self.block = ParamBlock(prototypes)
        if self.block.value.shape[0] < 1:
            raise InvariantError(f"bank for class {class_id} has no rows")
        self.frozen_rows = 0
        self.birth_stages = [birth_stage] * self.block.value.shape[0]

    @property
    def prototypes(self) -> DenseMatrix:
        return self.block.value

    @property
    def rows(self) -> int:
        return self.block.value.shape[0]

    @property
    def cols(self) -> int:
        return self.block.value.shape[1]

    def append_rows(self, new_rows: DenseMatrix, birth_stage: int) -> None:
        new_rows = dense(new_rows, cols=self.cols)
        grad = self.block.grad
        self.block.value = np.ascontiguousarray(
            np.vstack([self.block.value, new_rows])
        )
        self.block.grad = np.zeros_like(self.block.value)
        self.block.grad[: grad.shape[0]] = grad
        self.birth_stages.extend([birth_stage] * new_rows.shape[0])


@dataclass
class ModelState:
    """Encoder + head parameters and one prototype bank per class."""

    encoder: list[ParamBlock]  # [W1, b1, W2, b2]
    head: list[ParamBlock]  # [W, b]
    banks: list[PrototypeBank]
    feature_dim: int

    def params(self) -> list[ParamBlock]:
        return [*self.encoder, *self.head, *[b.block for b in self.banks]]

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    @property
    def class_count(self) -> int:
        return len(self.banks)


def init_model(
    input_dim: int,
    hidden: int,
    feature_dim: int,
    classes: int,
    prototypes_per_class: int,
    rng: np.random.Generator,
) -> ModelState:
    """Random initial state; fully determined by the passed generator."""
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    if prototypes_per_class < 1:
        raise ConfigurationError("need at least one prototype per class")

    def affine(n_in: int, n_out: int, gain: float) -> tuple[ParamBlock, ParamBlock]:
        w = rng.normal(0.0, gain / np.sqrt(n_in), size=(n_in, n_out))
        return ParamBlock(w), ParamBlock(np.zeros((1, n_out)))

    w1, b1 = affine(input_dim, hidden, np.sqrt(2.0))
    w2, b2 = affine(hidden, hidden, np.sqrt(2.0))
    wh, bh = affine(hidden, feature_dim, 1.0)
    banks = [
        PrototypeBank(
            c,
            rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(prototypes_per_class, feature_dim)),
        )
        for c in range(classes)
    ]
    return ModelState([w1, b1, w2, b2], [wh, bh], banks, feature_dim)


# ---------------------------------------------------------------------------
# forward pieces


def encode_forward(x: DenseMatrix, state: ModelState):
    """Return (features, cache). cache feeds encode_backward."""
    w1, b1, w2, b2 = state.encoder
    wh, bh = state.head
    if x.ndim != 2 or x.shape[1] != w1.value.shape[0]:
        raise DimensionError(
            f"input shape {tuple(x.shape)} does not match encoder input "
            f"width {w1.value.shape[0]}"
        )
    z1 = x @ w1.value + b1.value
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w2.value + b2.value
    a2 = np.maximum(z2, 0.0)
    feats = a2 @ wh.value + bh.value
    return feats, (x, z1, a1, z2, a2)


def encode(x: DenseMatrix, state: ModelState) -> DenseMatrix:
    """Feature batch g(h(x)): affine, ReLU, affine, ReLU, affine."""
    feats, _ = encode_forward(np.asarray(x, dtype=np.float64), state)
    return feats


def encode_backward(d_feats: DenseMatrix, cache, state: ModelState, weight: float = 1.0) -> None:
    """Accumulate weight * d(loss)/d(encoder, head params) given d(loss)/d(features)."""
    x, z1, a1, z2, a2 = cache
    w1, b1, w2, b2 = state.encoder
    wh, bh = state.head
    g = weight * d_feats
    wh.grad += a2.T @ g
    bh.grad += g.sum(axis=0, keepdims=True)
    da2 = g @ wh.value.T
    dz2 = np.where(z2 > 0.0, da2, 0.0)
    w2.grad += a1.T @ dz2
    b2.grad += dz2.sum(axis=0, keepdims=True)
    da1 = dz2 @ w2.value.T
    dz1 = np.where(z1 > 0.0, da1, 0.0)
    w1.grad += x.T @ dz1
    b1.grad += dz1.sum(axis=0, keepdims=True)


def class_distance(feature: np.ndarray, bank: PrototypeBank) -> float:
    """Distance from one feature vector to the nearest row of one bank.

    Exhaustive row scan; ties resolve to the lowest row index (the batch
    path records that index for the backward pass).
    """
    feature = np.asarray(feature, dtype=np.float64).reshape(-1)
    if bank.rows == 0:
        raise InvariantError(f"bank for class {bank.class_id} is empty")
    if feature.shape[0] != bank.cols:
        raise DimensionError(
            f"feature length {feature.shape[0]} != prototype width {bank.cols}"
        )
    return float(np.min(np.linalg.norm(bank.prototypes - feature, axis=1)))


def batch_distances(feats: DenseMatrix, state: ModelState):
    """Per-class nearest-prototype distances for a feature batch.

    Returns (distances B x C, argmin row index B x C). Uses the expanded
    quadratic form so the inner loop is a matrix product; the tiny negative
    values it can produce by cancellation are clamped before the sqrt.
    """
    n = feats.shape[0]
    c = state.class_count
    dist = np.empty((n, c))
    arg = np.empty((n, c), dtype=np.int64)
    fnorm = np.einsum("ij,ij->i", feats, feats)
    for ci, bank in enumerate(state.banks):
        p = bank.prototypes
        pnorm = np.einsum("ij,ij->i", p, p)
        d2 = fnorm[:, None] + pnorm[None, :] - 2.0 * (feats @ p.T)
        np.maximum(d2, 0.0, out=d2)
        j = np.argmin(d2, axis=1)
        arg[:, ci] = j
        dist[:, ci] = np.sqrt(d2[np.arange(n), j])
    return dist, arg


def class_probabilities(distances: np.ndarray) -> np.ndarray:
    """Softmax over negated distances, stabilized by max subtraction.

    Accepts a length-C vector or a B x C matrix (row-wise). Probabilities
    are clamped to at least 1e-300 so they stay strictly positive even when
    a distance gap underflows exp.
    """
    d = np.asarray(distances, dtype=np.float64)
    squeeze = d.ndim == 1
    if squeeze:
        d = d[None, :]
    if d.shape[1] < 2:
        raise ConfigurationError("need at least 2 classes")
    assert_finite("class_probabilities", d)
    s = -d
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=1, keepdims=True)
    # keep the open interval (0, 1) even when a distance gap underflows exp
    np.clip(p, _LOG_CLAMP, np.nextafter(1.0, 0.0), out=p)
    return p[0] if squeeze else p


def classification_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean over the batch of -log(probability of the true class)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != p.shape[0]:
        raise DimensionError(f"{p.shape[0]} prob rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise ConfigurationError("label outside class range")
    rows = np.abs(p.sum(axis=1) - 1.0)
    if np.any(rows > 1e-6):
        raise ConfigurationError("probability rows must sum to 1")
    picked = np.maximum(p[np.arange(p.shape[0]), y], _LOG_CLAMP)
    return float(np.mean(-np.log(picked)))


def predict(x: DenseMatrix, state: ModelState):
    """(label, per-class probability scores) per sample.

    Labels are the argmin of the class distances, which is exactly the
    argmax of the softmax scores (the softmax is strictly decreasing in
    distance) and stays correct even when remote-class scores underflow.
    Ties resolve to the lowest class id.
    """
    x = np.asarray(x, dtype=np.float64)
    feats, _ = encode_forward(x, state)
    dist, _ = batch_distances(feats, state)
    labels = np.argmin(dist, axis=1)
    return labels, class_probabilities(dist)


@dataclass
class ForwardBackward:
    total_loss: float
    cls_loss: float
    bank_dist: float | None
    scores: np.ndarray  # negated distances of the current batch, B x C


def _distance_backward(
    d_dist: np.ndarray,
    feats: DenseMatrix,
    dist: np.ndarray,
    arg: np.ndarray,
    state: ModelState,
) -> DenseMatrix:
    """Route d(loss)/d(distances) to features and prototype rows.

    Only the argmin row of each (sample, class) pair receives gradient.
    Where a distance is exactly 0 the subgradient is taken as 0.
    """
    d_feats = np.zeros_like(feats)
    for ci, bank in enumerate(state.banks):
        j = arg[:, ci]
        diff = feats - bank.prototypes[j]
        d = dist[:, ci]
        safe = np.where(d > 0.0, d, 1.0)
        unit = diff / safe[:, None]
        unit[d == 0.0] = 0.0
        contrib = d_dist[:, ci][:, None] * unit
        d_feats += contrib
        np.add.at(bank.block.grad, j, -contrib)
    return d_feats


def classification_term(
    x: DenseMatrix,
    labels: np.ndarray,
    state: ModelState,
    weight: float = 1.0,
):
    """Cross-entropy term; accumulates weight * gradients into state.

    Returns (loss value, negated-distance scores of the batch).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    feats, cache = encode_forward(x, state)
    dist, arg = batch_distances(feats, state)
    probs = class_probabilities(dist)
    loss = classification_loss(probs, y)

    n = x.shape[0]
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    d_dist = (onehot - probs) / n  # d(loss)/d(distance)
    d_feats = _distance_backward(weight * d_dist, feats, dist, arg, state)
    encode_backward(d_feats, cache, state, weight=1.0)
    return loss, -dist


def logit_match_term(
    x: DenseMatrix,
    stored_logits: np.ndarray,
    state: ModelState,
    weight: float = 1.0,
) -> float:
    """Mean squared error between current negated distances and stored logits.

    Accumulates weight * gradients into state; returns the unweighted MSE.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(stored_logits, dtype=np.float64)
    feats, cache = encode_forward(x, state)
    dist, arg = batch_distances(feats, state)
    if z.shape != dist.shape:
        raise DimensionError(
            f"stored logits shape {tuple(z.shape)} != scores shape {tuple(dist.shape)}"
        )
    scores = -dist
    loss = float(np.mean((scores - z) ** 2))
    d_dist = -2.0 * (scores - z) / scores.size  # d(mse)/d(distance)
    d_feats = _distance_backward(weight * d_dist, feats, dist, arg, state)
    encode_backward(d_feats, cache, state, weight=1.0)
    return loss


def forward_backward(x, labels, state: ModelState, constraint=None) -> ForwardBackward:
    """Full training loss and gradients for one batch.

    total = cross-entropy + lambda * (bank drift - gamma) when a drift
    constraint with a snapshot is active. Encoder and head receive only the
    cross-entropy gradient; prototype banks additionally receive the
    lambda-weighted drift gradient (the penalty depends on no other
    parameters). With no active constraint the result is bit-identical to a
    penalty-free implementation.
    """
    from . import constraint as constraint_mod

    state.zero_grads()
    cls_loss, scores = classification_term(x, labels, state, weight=1.0)

    bank_dist = None
    total = cls_loss
    if constraint is not None and constraint.active:
        bank_dist = constraint_mod.bank_distance(
            constraint.snapshot, state.banks, constraint.mode
        )
        total = cls_loss + constraint.lam * (bank_dist - constraint.gamma)
        if constraint.lam != 0.0:
            constraint_mod.accumulate_drift_gradient(
                constraint.snapshot, state.banks, constraint.lam
            )
    return ForwardBackward(total, cls_loss, bank_dist, scores)


def export_prototypes(state: ModelState) -> str:
    """Plain-text table: class_id, birth stage, then the m coordinates."""
    lines = []
    for bank in state.banks:
        for r in range(bank.rows):
            coords = ",".join(repr(float(v)) for v in bank.prototypes[r])
            lines.append(f"{bank.class_id},{bank.birth_stages[r]},{coords}")
    return "\n".join(lines) + "\n"
