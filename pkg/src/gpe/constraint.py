"""Stage machinery: drift measurement, the penalized objective, dual ascent.

Between stages the current prototype banks are snapshotted. During the next
stage the mean row-wise L2 distance between the snapshot and the live banks
("bank distance") is pushed below a tolerance gamma by a Lagrange multiplier
lambda that is updated by dual ascent after every optimizer step. In fixed
mode every row is compared; in dynamic mode fresh rows are appended at each
transition and only inherited rows are compared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvariantError
from .model import ModelState, PrototypeBank

MODES = ("fixed", "dynamic")


@dataclass
class ConstraintState:
    gamma: float
    lam: float
    dual_step: float
    mode: str
    initial_lambda: float
    stage_index: int = 1
    snapshot: list[np.ndarray] | None = None  # one matrix per class, frozen

    @property
    def active(self) -> bool:
        return self.snapshot is not None


def make_constraint(
    gamma: float, lambda0: float, dual_step: float, mode: str
) -> ConstraintState:
    if not gamma > 0.0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")
    if lambda0 < 0.0:
        raise ConfigurationError(f"initial lambda must be nonnegative, got {lambda0}")
    if not dual_step > 0.0:
        raise ConfigurationError(f"dual step must be positive, got {dual_step}")
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    return ConstraintState(gamma, lambda0, dual_step, mode, lambda0)


def _matrices(banks) -> list[np.ndarray]:
    return [b.prototypes if isinstance(b, PrototypeBank) else np.asarray(b) for b in banks]


def bank_distance(old, new, mode: str) -> float:
    """Mean L2 distance between corresponding prototype rows.

    Sums row distances over every class bank, then divides by the total
    number of compared rows. Fixed mode compares all rows and requires
    identical shapes; dynamic mode compares only the old (inherited) prefix.
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    old_m, new_m = _matrices(old), _matrices(new)
    if len(old_m) != len(new_m):
        raise InvariantError(
            f"bank count mismatch: {len(old_m)} vs {len(new_m)}"
        )
    total = 0.0
    rows = 0
    for o, n in zip(old_m, new_m):
        if mode == "fixed" and o.shape != n.shape:
            raise InvariantError(
                f"fixed mode requires identical shapes, got {o.shape} vs {n.shape}"
            )
        if o.shape[0] > n.shape[0] or o.shape[1] != n.shape[1]:
            raise InvariantError(
                f"snapshot rows {o.shape} are not a prefix of current rows {n.shape}"
            )
        k = o.shape[0]
        total += float(np.linalg.norm(n[:k] - o, axis=1).sum())
        rows += k
    return total / rows if rows else 0.0


def accumulate_drift_gradient(snapshot, banks: list[PrototypeBank], lam: float) -> None:
    """Add lam * d(bank_distance)/d(prototypes) to the banks' gradients.

    The snapshot is a constant, so only live rows in the compared prefix
    receive gradient: lam * (row - snapshot row) / (norm * total rows).
    Rows exactly at their snapshot get subgradient 0.
    """
    snaps = _matrices(snapshot)
    rows = sum(s.shape[0] for s in snaps)
    if rows == 0:
        return
    for snap, bank in zip(snaps, banks):
        k = snap.shape[0]
        delta = bank.prototypes[:k] - snap
        norms = np.linalg.norm(delta, axis=1)
        safe = np.where(norms > 0.0, norms, 1.0)
        scale = np.where(norms > 0.0, lam / (rows * safe), 0.0)
        bank.block.grad[:k] += scale[:, None] * delta


def penalized_loss(cls_loss: float, dist: float, state: ConstraintState) -> float:
    """cls_loss + lambda * (dist - gamma); unchanged while inactive (stage 1)."""
    if state.lam < 0.0:
        raise InvariantError(f"lambda must be nonnegative, got {state.lam}")
    if not state.active:
        return cls_loss
    return cls_loss + state.lam * (dist - state.gamma)


def dual_update(state: ConstraintState, dist: float) -> ConstraintState:
    """lambda <- max(lambda + dual_step * (dist - gamma), 0)."""
    if not state.dual_step > 0.0:
        raise ConfigurationError(f"dual step must be positive, got {state.dual_step}")
    state.lam = max(state.lam + state.dual_step * (dist - state.gamma), 0.0)
    return state


def stage_transition(
    state: ModelState,
    cstate: ConstraintState,
    mode: str,
    growth_per_class: int,
    rng: np.random.Generator | None = None,
) -> tuple[ModelState, ConstraintState]:
    """Enter the next stage.

    Snapshots the current banks (before any growth), resets lambda to its
    configured initial value, and in dynamic mode appends growth_per_class
    freshly initialized rows per class. The caller owns the learning-rate
    schedule reset. With growth g per class and g rows at stage 1, each
    class holds g*t rows after the transition into stage t, of which
    g*(t-1) are frozen (drift-constrained).
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    cstate.snapshot = [bank.prototypes.copy() for bank in state.banks]
    cstate.lam = cstate.initial_lambda
    cstate.stage_index += 1
    cstate.mode = mode

    if mode == "dynamic":
        if growth_per_class < 1:
            raise ConfigurationError(
                "dynamic mode needs growth_per_class >= 1 at each transition"
            )
        if rng is None:
            raise ConfigurationError("dynamic growth requires a generator")
        m = state.feature_dim
        for bank in state.banks:
            bank.frozen_rows = bank.rows
            bank.append_rows(
                rng.normal(0.0, 1.0 / np.sqrt(m), size=(growth_per_class, m)),
                birth_stage=cstate.stage_index,
            )
    else:
        for bank in state.banks:
            bank.frozen_rows = bank.rows
    return state, cstate
