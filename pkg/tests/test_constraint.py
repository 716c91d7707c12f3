from __future__ import annotations

import numpy as np
import pytest

from gpe import constraint as cn
from gpe import model as md
from gpe.errors import ConfigurationError, InvariantError


def banks_of(*matrices) -> list[md.PrototypeBank]:
    return [md.PrototypeBank(c, m) for c, m in enumerate(matrices)]


# --- bank_distance ------------------------------------------------------------

def test_distance_zero_for_identical_banks() -> None:
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(4, 3))
    assert cn.bank_distance([rows], [rows.copy()], "fixed") == 0.0


def test_distance_single_row_345() -> None:
    assert cn.bank_distance([[[0.0, 0.0]]], [[[3.0, 4.0]]], "fixed") == 5.0


def test_distance_mean_of_unit_norms() -> None:
    old = np.zeros((3, 3))
    new = np.eye(3)
    assert cn.bank_distance([old], [new], "fixed") == pytest.approx(1.0, rel=1e-15)


def test_distance_two_rows_moved_three_and_four() -> None:
    old = np.zeros((2, 2))
    new = np.array([[3.0, 0.0], [0.0, 4.0]])
    assert cn.bank_distance([old], [new], "fixed") == pytest.approx(3.5, rel=1e-15)


def test_distance_matches_per_row_oracle() -> None:
    rng = np.random.default_rng(1)
    old = [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
    new = [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
    total = 0.0
    for o, n in zip(old, new):
        for r in range(3):
            total += float(np.sqrt(np.sum((o[r] - n[r]) ** 2)))
    assert cn.bank_distance(old, new, "fixed") == pytest.approx(total / 6.0, rel=1e-12)


def test_distance_symmetric_nonnegative_zero_iff_equal() -> None:
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = [rng.normal(size=(3, 5))]
        b = [rng.normal(size=(3, 5))]
        dab = cn.bank_distance(a, b, "fixed")
        assert dab == cn.bank_distance(b, a, "fixed")
        assert dab > 0.0
    assert cn.bank_distance(a, [a[0].copy()], "fixed") == 0.0


def test_distance_dynamic_compares_prefix_only() -> None:
    old = [np.zeros((2, 2))]
    new = [np.array([[3.0, 4.0], [0.0, 0.0], [99.0, 99.0]])]
    assert cn.bank_distance(old, new, "dynamic") == pytest.approx(2.5, rel=1e-15)


def test_distance_shape_violations() -> None:
    with pytest.raises(InvariantError):
        cn.bank_distance([np.zeros((2, 2))], [np.zeros((3, 2))], "fixed")
    with pytest.raises(InvariantError):
        cn.bank_distance([np.zeros((4, 2))], [np.zeros((3, 2))], "dynamic")
    with pytest.raises(InvariantError):
        cn.bank_distance([np.zeros((2, 2))], [np.zeros((2, 3))], "dynamic")


def test_distance_averages_over_total_rows_across_classes() -> None:
    old = [np.zeros((1, 2)), np.zeros((2, 2))]
    new = [np.array([[3.0, 4.0]]), np.array([[0.0, 1.0], [1.0, 0.0]])]
    # row distances 5, 1, 1 over 3 compared rows
    assert cn.bank_distance(old, new, "fixed") == pytest.approx(7.0 / 3.0, rel=1e-15)


# --- penalized_loss -----------------------------------------------------------

def test_penalized_loss_identity_at_lambda_zero() -> None:
    cs = cn.make_constraint(gamma=0.1, lambda0=0.0, dual_step=0.1, mode="fixed")
    cs.snapshot = [np.zeros((1, 2))]
    assert cn.penalized_loss(0.7, 5.0, cs) == 0.7


def test_penalized_loss_arithmetic() -> None:
    cs = cn.make_constraint(gamma=0.01, lambda0=10.0, dual_step=0.1, mode="fixed")
    cs.snapshot = [np.zeros((1, 2))]
    assert cn.penalized_loss(0.5, 0.02, cs) == pytest.approx(0.6, rel=1e-12)


def test_penalized_loss_inactive_passthrough() -> None:
    cs = cn.make_constraint(gamma=0.01, lambda0=10.0, dual_step=0.1, mode="fixed")
    assert cn.penalized_loss(1.23, 99.0, cs) == 1.23


def test_penalized_loss_random_triples_match_recomputation() -> None:
    rng = np.random.default_rng(3)
    cs = cn.make_constraint(gamma=0.5, lambda0=1.0, dual_step=0.1, mode="fixed")
    cs.snapshot = [np.zeros((1, 2))]
    for _ in range(50):
        cls = float(rng.uniform(0, 3))
        dist = float(rng.uniform(0, 3))
        cs.lam = float(rng.uniform(0, 5))
        assert cn.penalized_loss(cls, dist, cs) == pytest.approx(
            cls + cs.lam * (dist - cs.gamma), rel=1e-15
        )


# --- dual_update ---------------------------------------------------------------

def test_dual_stays_clamped_at_zero() -> None:
    cs = cn.make_constraint(gamma=1.0, lambda0=0.0, dual_step=0.5, mode="fixed")
    cn.dual_update(cs, 0.5)
    assert cs.lam == 0.0


def test_dual_ascent_arithmetic() -> None:
    cs = cn.make_constraint(gamma=0.5, lambda0=1.0, dual_step=0.1, mode="fixed")
    cn.dual_update(cs, 1.0)  # dist - gamma = 0.5
    assert cs.lam == pytest.approx(1.05, rel=1e-15)


def test_dual_clamp_engages() -> None:
    cs = cn.make_constraint(gamma=0.5, lambda0=0.01, dual_step=1.0, mode="fixed")
    cn.dual_update(cs, 0.0)
    assert cs.lam == 0.0


def test_dual_randomized_invariants() -> None:
    rng = np.random.default_rng(4)
    cs = cn.make_constraint(gamma=0.3, lambda0=0.0, dual_step=0.05, mode="fixed")
    for _ in range(10_000):
        cs.gamma = float(rng.uniform(1e-3, 2.0))
        cs.dual_step = float(rng.uniform(1e-3, 1.0))
        dist = float(rng.uniform(0.0, 4.0))
        before = cs.lam
        cn.dual_update(cs, dist)
        assert cs.lam >= 0.0
        if dist > cs.gamma:
            assert cs.lam > before
        elif dist < cs.gamma and before > 0.0:
            assert cs.lam < before or cs.lam == 0.0


# --- stage_transition -----------------------------------------------------------

def make_model(per_class: int, classes: int = 3, m: int = 4) -> md.ModelState:
    return md.init_model(5, 6, m, classes, per_class, np.random.default_rng(8))


def test_fixed_transition_keeps_shapes_and_snapshots_exactly() -> None:
    state = make_model(per_class=40, classes=2, m=4)
    before = [b.prototypes.copy() for b in state.banks]
    cs = cn.make_constraint(gamma=5.0, lambda0=1.0, dual_step=0.1, mode="fixed")
    cs.lam = 77.0
    cn.stage_transition(state, cs, "fixed", 0)
    for bank, prev in zip(state.banks, before):
        assert bank.prototypes.shape == (40, 4)
        assert bank.frozen_rows == 40
    for snap, prev in zip(cs.snapshot, before):
        assert np.array_equal(snap, prev)
    assert cs.lam == 1.0  # reset to the configured initial value
    assert cs.stage_index == 2


def test_dynamic_transition_grows_and_freezes() -> None:
    state = make_model(per_class=5)
    cs = cn.make_constraint(gamma=0.01, lambda0=10.0, dual_step=0.1, mode="dynamic")
    rng = np.random.default_rng(9)
    cn.stage_transition(state, cs, "dynamic", 5, rng)  # into stage 2
    cn.stage_transition(state, cs, "dynamic", 5, rng)  # into stage 3
    for bank in state.banks:
        assert bank.rows == 15
        assert bank.frozen_rows == 10
        assert bank.birth_stages == [1] * 5 + [2] * 5 + [3] * 5


def test_growth_law_holds_through_twenty_stages() -> None:
    state = make_model(per_class=5, classes=2)
    cs = cn.make_constraint(gamma=0.01, lambda0=10.0, dual_step=0.1, mode="dynamic")
    rng = np.random.default_rng(10)
    for t in range(2, 21):
        cn.stage_transition(state, cs, "dynamic", 5, rng)
        for bank in state.banks:
            assert bank.rows == 5 * t
            assert bank.frozen_rows == 5 * (t - 1)


def test_inherited_rows_bit_identical_at_transition() -> None:
    state = make_model(per_class=5)
    cs = cn.make_constraint(gamma=0.01, lambda0=10.0, dual_step=0.1, mode="dynamic")
    rng = np.random.default_rng(11)
    before = [b.prototypes.copy() for b in state.banks]
    cn.stage_transition(state, cs, "dynamic", 5, rng)
    for bank, prev in zip(state.banks, before):
        assert np.array_equal(bank.prototypes[:5], prev)


def test_consecutive_transitions_without_training_have_zero_drift() -> None:
    state = make_model(per_class=5)
    cs = cn.make_constraint(gamma=0.01, lambda0=10.0, dual_step=0.1, mode="dynamic")
    rng = np.random.default_rng(12)
    cn.stage_transition(state, cs, "dynamic", 5, rng)
    cn.stage_transition(state, cs, "dynamic", 5, rng)
    assert cn.bank_distance(cs.snapshot, state.banks, "dynamic") == 0.0


def test_dynamic_growth_zero_rejected() -> None:
    state = make_model(per_class=5)
    cs = cn.make_constraint(gamma=0.01, lambda0=10.0, dual_step=0.1, mode="dynamic")
    with pytest.raises(ConfigurationError):
        cn.stage_transition(state, cs, "dynamic", 0, np.random.default_rng(0))


def test_make_constraint_validation() -> None:
    with pytest.raises(ConfigurationError):
        cn.make_constraint(gamma=0.0, lambda0=1.0, dual_step=0.1, mode="fixed")
    with pytest.raises(ConfigurationError):
        cn.make_constraint(gamma=1.0, lambda0=-1.0, dual_step=0.1, mode="fixed")
    with pytest.raises(ConfigurationError):
        cn.make_constraint(gamma=1.0, lambda0=1.0, dual_step=0.0, mode="fixed")
    with pytest.raises(ConfigurationError):
        cn.make_constraint(gamma=1.0, lambda0=1.0, dual_step=0.1, mode="other")


def test_drift_gradient_matches_finite_differences() -> None:
    rng = np.random.default_rng(13)
    state = make_model(per_class=3, classes=2, m=4)
    snapshot = [b.prototypes + rng.normal(scale=0.5, size=b.prototypes.shape)
                for b in state.banks]
    lam = 1.7
    state.zero_grads()
    cn.accumulate_drift_gradient(snapshot, state.banks, lam)

    eps = 1e-6
    for bank, snap in zip(state.banks, snapshot):
        flat = bank.block.value.reshape(-1)
        gflat = bank.block.grad.reshape(-1)
        for fi in range(0, flat.size, 3):
            orig = flat[fi]
            flat[fi] = orig + eps
            up = lam * cn.bank_distance(snapshot, state.banks, "fixed")
            flat[fi] = orig - eps
            dn = lam * cn.bank_distance(snapshot, state.banks, "fixed")
            flat[fi] = orig
            assert gflat[fi] == pytest.approx((up - dn) / (2 * eps), abs=1e-6)
