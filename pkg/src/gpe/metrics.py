"""Evaluation metrics.

Classification streams report a lower-triangular accuracy matrix (row t =
accuracy on every earlier task's test transform after stage t); the headline
number is the mean of the final row. Highlight streams report frame-wise
average precision per active domain, pooled over all test frames, and their
mean (mAP). Forgetting summarizes per-task accuracy drop from each task's
peak to its final value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as md
from .errors import ConfigurationError, EvaluationError
from .model import ModelState
from .streams import SequenceSample

logger = logging.getLogger(__name__)


class AccuracyMatrix:
    """T x T matrix, entry [t, j] = accuracy on task j after stage t (1-based)."""

    def __init__(self, t_count: int) -> None:
        self.entries = np.full((t_count, t_count), np.nan)

    @property
    def t_count(self) -> int:
        return self.entries.shape[0]

    def record(self, stage: int, task: int, value: float) -> None:
        if not (0.0 <= value <= 1.0):
            raise EvaluationError(f"accuracy {value} outside [0,1]")
        if task > stage:
            raise EvaluationError("only tasks seen so far are evaluated")
        self.entries[stage - 1, task - 1] = value

    def row(self, stage: int) -> np.ndarray:
        return self.entries[stage - 1, :stage]


@dataclass
class StageReport:
    """Everything recorded after one training stage."""

    stage: int
    per_task_accuracy: dict[int, float] = field(default_factory=dict)
    per_domain_ap: dict[str, float] = field(default_factory=dict)
    average_metric: float = float("nan")
    lambda_summary: tuple[float, float, float] | None = None  # (min, max, final)
    wall_clock: float = 0.0


def accuracy(state: ModelState, test_split: tuple[np.ndarray, np.ndarray]) -> float:
    x, y = test_split
    if x.shape[0] == 0:
        raise EvaluationError("empty test split")
    correct = 0
    step = 2048  # bound the distance workspace
    for lo in range(0, x.shape[0], step):
        labels, _ = md.predict(x[lo : lo + step], state)
        correct += int(np.sum(labels == y[lo : lo + step]))
    return correct / x.shape[0]


def average_accuracy(matrix: AccuracyMatrix) -> float:
    final = matrix.entries[-1]
    if np.any(np.isnan(final)):
        raise EvaluationError("final accuracy row is not fully populated")
    return float(np.mean(final))


def forgetting(matrix: AccuracyMatrix) -> np.ndarray:
    """Per task j < T: max over stages t >= j of a[t][j], minus a[T][j]."""
    t_count = matrix.t_count
    if t_count < 2:
        raise EvaluationError("forgetting needs at least two stages")
    out = np.zeros(t_count - 1)
    e = matrix.entries
    for j in range(t_count - 1):
        column = e[j:, j]
        out[j] = np.nanmax(column) - e[-1, j]
    return out


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall step curve.

    Frames are ranked by descending score; equal scores keep their original
    order (stable sort). AP = sum over positive ranks of precision@rank / P.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape[0] != y.shape[0]:
        raise ConfigurationError("scores and labels differ in length")
    positives = int(np.sum(y == 1))
    if positives == 0:
        raise EvaluationError("average precision undefined without positives")
    order = np.argsort(-s, kind="stable")
    ranked = y[order] == 1
    cum_pos = np.cumsum(ranked)
    ranks = np.arange(1, s.shape[0] + 1)
    precision_at = cum_pos / ranks
    return float(np.sum(precision_at[ranked]) / positives)


def highlight_scores(state: ModelState, sequences: list[SequenceSample]) -> np.ndarray:
    """Pooled per-frame highlight probabilities over a sequence list."""
    frames = np.concatenate([s.frames for s in sequences], axis=0)
    out = np.empty(frames.shape[0])
    step = 4096
    for lo in range(0, frames.shape[0], step):
        _, probs = md.predict(frames[lo : lo + step], state)
        out[lo : lo + step] = probs[:, 1]
    return out


def domain_frame_labels(sequences: list[SequenceSample], domain_id: int) -> np.ndarray:
    """Pooled binary labels: 1 iff the frame lies in a segment of the domain."""
    parts = []
    for seq in sequences:
        lab = np.zeros(seq.frames.shape[0], dtype=np.int64)
        for start, end, dom in seq.segments:
            if dom.id == domain_id:
                lab[start:end] = 1
        parts.append(lab)
    return np.concatenate(parts)


def ap_per_domain(
    scores: np.ndarray, sequences: list[SequenceSample], active_domains
) -> dict[str, float]:
    """AP per active domain from pooled scores; zero-positive domains skipped."""
    out: dict[str, float] = {}
    for dom in sorted(active_domains, key=lambda d: d.id):
        labels = domain_frame_labels(sequences, dom.id)
        if not np.any(labels == 1):
            logger.warning(
                "domain %s has no positive test frames; excluded from mAP", dom.name
            )
            continue
        out[dom.name] = average_precision(scores, labels)
    return out


def mean_ap(state: ModelState, sequences: list[SequenceSample], active_domains) -> float:
    """Mean over active domains of pooled frame-wise AP."""
    scores = highlight_scores(state, sequences)
    per_domain = ap_per_domain(scores, sequences, active_domains)
    if not per_domain:
        raise EvaluationError("every active domain lacked positive frames")
    return float(np.mean(list(per_domain.values())))


def score_trace(state: ModelState, sequence: SequenceSample) -> np.ndarray:
    """Per-frame highlight probability, in frame order."""
    if state.class_count != 2:
        raise EvaluationError("score traces need the binary configuration")
    _, probs = md.predict(sequence.frames, state)
    return probs[:, 1]
