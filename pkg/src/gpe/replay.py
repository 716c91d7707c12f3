"""Fixed-capacity reservoir memory and replay loss terms.

The buffer keeps a uniform sample of every training example observed so far
(classic reservoir sampling). Each stored item carries the model scores
(negated distances) captured at observation time; those never get refreshed.
Two augmentation terms are offered: a cross-entropy term on replayed items
(unit weight) and a mean-squared-error term matching current scores to the
stored ones (weighted by a configurable alpha).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as md
from .errors import ConfigurationError
from .model import ModelState


@dataclass
class ReplayItem:
    input: np.ndarray  # one flattened sample
    label: int
    logits: np.ndarray  # per-class scores at observation time
    source_task: int


@dataclass
class ReplayBatch:
    inputs: np.ndarray
    labels: np.ndarray
    logits: np.ndarray | None

    def __len__(self) -> int:
        return 0 if self.inputs is None else self.inputs.shape[0]


EMPTY_BATCH = ReplayBatch(np.zeros((0, 1)), np.zeros(0, dtype=np.int64), None)


class ReplayBuffer:
    def __init__(self, capacity: int, class_count: int) -> None:
        if capacity < 0:
            raise ConfigurationError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.class_count = class_count
        self.items: list[ReplayItem] = []
        self.seen_count = 0

    def __len__(self) -> int:
        return len(self.items)


def observe(buffer: ReplayBuffer, item: ReplayItem, rng: np.random.Generator) -> ReplayBuffer:
    """Reservoir step: append while below capacity, then replace uniformly.

    The i-th observed item (0-based) replaces slot j drawn uniformly from
    [0, i]; the replacement happens only when j lands inside the buffer, so
    every item is retained with probability capacity / seen_count.
    """
    if item.logits.shape != (buffer.class_count,):
        raise ConfigurationError(
            f"stored logits must have length {buffer.class_count}, "
            f"got {item.logits.shape}"
        )
    if buffer.capacity == 0:
        buffer.seen_count += 1
        return buffer
    if len(buffer.items) < buffer.capacity:
        buffer.items.append(item)
    else:
        j = int(rng.integers(0, buffer.seen_count + 1))
        if j < buffer.capacity:
            buffer.items[j] = item
    buffer.seen_count += 1
    return buffer


def observe_batch(
    buffer: ReplayBuffer,
    inputs: np.ndarray,
    labels: np.ndarray,
    scores: np.ndarray,
    source_task: int,
    rng: np.random.Generator,
) -> None:
    for i in range(inputs.shape[0]):
        observe(
            buffer,
            ReplayItem(inputs[i].copy(), int(labels[i]), scores[i].copy(), source_task),
            rng,
        )


def sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> ReplayBatch:
    """n items uniformly with replacement; empty buffer yields an empty batch."""
    if n == 0 or len(buffer.items) == 0:
        return EMPTY_BATCH
    idx = rng.integers(0, len(buffer.items), size=n)
    return ReplayBatch(
        np.stack([buffer.items[i].input for i in idx]),
        np.array([buffer.items[i].label for i in idx], dtype=np.int64),
        np.stack([buffer.items[i].logits for i in idx]),
    )


def er_loss(state: ModelState, batch: ReplayBatch, weight: float = 1.0) -> float:
    """Cross-entropy on replayed items; accumulates weight * gradients."""
    if len(batch) == 0:
        return 0.0
    loss, _ = md.classification_term(batch.inputs, batch.labels, state, weight=weight)
    return loss


def der_loss(state: ModelState, batch: ReplayBatch, weight: float = 1.0) -> float:
    """MSE between current scores and the scores stored at observation time.

    Returns the unweighted MSE; gradients are accumulated scaled by weight.
    """
    if len(batch) == 0:
        return 0.0
    if batch.logits is None:
        raise ConfigurationError("replay batch carries no stored logits")
    return md.logit_match_term(batch.inputs, batch.logits, state, weight=weight)


def dump_buffer(buffer: ReplayBuffer, path) -> None:
    """Audit dump in the stream-manifest record shape (one frame per record)."""
    lines = ["# gpe-buffer v1", f"capacity = {buffer.capacity}", f"seen = {buffer.seen_count}"]
    for i, item in enumerate(buffer.items):
        lines.append(f"buf-{i}|{item.source_task}|1|{item.label}x1|")
        lines.append("# logits: " + ",".join(repr(float(v)) for v in item.logits))
    from pathlib import Path

    Path(path).write_text("\n".join(lines) + "\n")
