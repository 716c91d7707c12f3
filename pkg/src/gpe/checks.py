"""Executable property gates for the ``check`` CLI verb.

Each gate re-derives an expected result from an independent oracle (brute
force, analytic law, or byte-level fixture) and compares the library against
it. Gates return a result object instead of raising, so the CLI can print a
one-line verdict per gate and exit non-zero iff any failed.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import constraint as ct
from . import metrics as mt
from . import model as md
from . import replay as rp
from . import runner as rn
from . import streams as st
from .config import ExperimentConfig, load_config
from .seeding import child_rng


@dataclass
class GateResult:
    letter: str
    name: str
    passed: bool
    detail: str


# --- (a) gradients of the full drift-penalized loss ---------------------------


def _separated(state: md.ModelState, x: np.ndarray, cs: ct.ConstraintState) -> bool:
    """Reject instances near a kink (argmin switch, ReLU zero, drift-norm zero)."""
    feats, cache = md.encode_forward(x, state)
    _, z1, _, z2, _ = cache
    if min(np.min(np.abs(z1)), np.min(np.abs(z2))) < 1e-3:
        return False
    for bank in state.banks:
        d = np.linalg.norm(feats[:, None, :] - bank.prototypes[None, :, :], axis=2)
        if bank.rows > 1:
            srt = np.sort(d, axis=1)
            if np.min(srt[:, 1] - srt[:, 0]) < 1e-3:
                return False
        if np.min(d) < 1e-3:
            return False
    for snap, bank in zip(cs.snapshot, state.banks):
        if np.min(np.linalg.norm(bank.prototypes - snap, axis=1)) < 1e-3:
            return False
    return True


def gate_gradients(instances: int = 20) -> GateResult:
    from .numcore import finite_diff_check

    checked, worst, seed = 0, 0.0, 0
    while checked < instances and seed < 400:
        rng = np.random.default_rng(7000 + seed)
        seed += 1
        state = md.init_model(3, 4, 3, 2, 2, rng)
        x = rng.normal(size=(4, 3))
        y = rng.integers(0, 2, size=4)
        cs = ct.make_constraint(0.05, float(rng.uniform(0.1, 3.0)), 0.1, "fixed")
        cs.snapshot = [
            b.prototypes + rng.normal(scale=0.4, size=b.prototypes.shape)
            for b in state.banks
        ]
        if not _separated(state, x, cs):
            continue

        def full_loss(s: md.ModelState) -> float:
            feats = md.encode(x, s)
            dist, _ = md.batch_distances(feats, s)
            cls = md.classification_loss(md.class_probabilities(dist), y)
            return cls + cs.lam * (ct.bank_distance(cs.snapshot, s.banks, cs.mode) - cs.gamma)

        md.forward_backward(x, y, state, cs)
        err = finite_diff_check(full_loss, state, 1e-5, rng=np.random.default_rng(seed))
        worst = max(worst, err)
        checked += 1
    passed = checked >= instances and worst < 1e-5
    return GateResult(
        "a", "finite-difference gradients",
        passed, f"{checked} instances, max relative error {worst:.3e} (< 1e-5)",
    )


# --- (b) dual-ascent invariants -------------------------------------------------


def gate_dual(steps: int = 10_000) -> GateResult:
    rng = np.random.default_rng(42)
    cs = ct.make_constraint(gamma=0.5, lambda0=0.3, dual_step=0.1, mode="fixed")
    negatives = pressure_faults = 0
    for _ in range(steps):
        d = float(rng.uniform(0.0, 1.0))
        before = cs.lam
        ct.dual_update(cs, d)
        if cs.lam < 0.0:
            negatives += 1
        if d > cs.gamma and not cs.lam > before:
            pressure_faults += 1
    passed = negatives == 0 and pressure_faults == 0
    return GateResult(
        "b", "dual ascent (lambda >= 0, monotone pressure)",
        passed, f"{steps} steps, {negatives} negative, {pressure_faults} pressure faults",
    )


# --- (c) average precision vs brute force ---------------------------------------


def _brute_force_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    positives = int(np.sum(ranked == 1))
    total, prev_recall = 0.0, 0.0
    for k in range(1, len(ranked) + 1):
        true_pos = int(np.sum(ranked[:k] == 1))
        recall = true_pos / positives
        if ranked[k - 1] == 1:
            total += (true_pos / k) * (recall - prev_recall)
        prev_recall = recall
    return total


def gate_average_precision(instances: int = 50) -> GateResult:
    rng = np.random.default_rng(43)
    worst = 0.0
    for i in range(instances):
        n = int(rng.integers(5, 80))
        if i % 2:
            scores = rng.normal(size=n)
        else:
            scores = rng.integers(0, 5, size=n).astype(float)  # ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[int(rng.integers(0, n))] = 1
        diff = abs(mt.average_precision(scores, labels) - _brute_force_ap(scores, labels))
        worst = max(worst, diff)
    passed = worst <= 1e-12
    return GateResult(
        "c", "average precision vs O(n^2) oracle",
        passed, f"{instances} instances, max |difference| {worst:.2e} (<= 1e-12)",
    )


# --- (d) nested-domain combination algebra --------------------------------------


def gate_combinations() -> GateResult:
    d1, d2, d3 = (st.DomainLabel(i, f"d{i + 1}") for i in range(3))
    got = st.domain_combinations(
        [frozenset({d1}), frozenset({d1, d2}), frozenset({d1, d2, d3})]
    )
    expected = [
        {frozenset({d1})},
        {frozenset({d2}), frozenset({d1, d2})},
        {
            frozenset({d3}),
            frozenset({d1, d3}),
            frozenset({d2, d3}),
            frozenset({d1, d2, d3}),
        },
    ]
    passed = [set(stage) for stage in got] == expected
    sizes = [len(stage) for stage in got]
    return GateResult(
        "d", "stage-fresh domain combinations",
        passed, f"stage sizes {sizes} (expected [1, 2, 4])",
    )


# --- (e) reservoir retention law -------------------------------------------------


def gate_reservoir(
    capacity: int = 50, stream: int = 5000, seeds: int = 2000, buckets: int = 50
) -> GateResult:
    hits = np.zeros(stream)
    logits = np.zeros(1)
    for seed in range(seeds):
        buf = rp.ReplayBuffer(capacity=capacity, class_count=1)
        rng = np.random.default_rng(50_000 + seed)
        for i in range(stream):
            rp.observe(buf, rp.ReplayItem(np.array([float(i)]), 0, logits, 1), rng)
        for it in buf.items:
            hits[int(it.input[0])] += 1
    freq = hits.reshape(buckets, -1).mean(axis=1) / seeds
    expected = capacity / stream
    rel = np.abs(freq - expected) / expected
    passed = bool(np.all(rel <= 0.15))
    return GateResult(
        "e", "reservoir retention uniformity",
        passed,
        f"{seeds} seeds, stream {stream}, capacity {capacity}: max bucket deviation "
        f"{100 * float(rel.max()):.2f}% (<= 15%)",
    )


# --- (f) IDX byte-level round trip ------------------------------------------------


IDX_FIXTURE = bytes([0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2]) + bytes(range(8))


def gate_idx_round_trip() -> GateResult:
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "fixture.idx"
        src.write_bytes(IDX_FIXTURE)
        tensor, _ = st.load_idx(src)
        dst = Path(tmp) / "back.idx"
        st.save_idx(tensor, dst)
        back = dst.read_bytes()
    passed = back == IDX_FIXTURE and tensor.shape == (2, 2, 2)
    return GateResult(
        "f", "IDX decode/encode round trip",
        passed, f"{len(IDX_FIXTURE)} fixture bytes, byte-identical: {back == IDX_FIXTURE}",
    )


# --- (g) whole-run determinism ---------------------------------------------------


def gate_determinism(cfg: ExperimentConfig) -> GateResult:
    first = rn.run_experiment(cfg)
    second = rn.run_experiment(cfg)
    table_a, table_b = rn._metric_table(first), rn._metric_table(second)
    trace_equal = first.lambda_trace == second.lambda_trace
    passed = table_a == table_b and trace_equal
    return GateResult(
        "g", "same-seed rerun determinism",
        passed,
        f"metric tables byte-identical: {table_a == table_b}; "
        f"lambda traces identical: {trace_equal}",
    )


# --- (h) stage-1 equivalence of the three variants --------------------------------


def gate_stage1_equivalence(cfg: ExperimentConfig) -> GateResult:
    short = replace(cfg, stream=replace(cfg.stream, t_count=1))
    outcomes = {}
    for variant in ("lb", "ub", "gpe"):
        rec = rn.run_experiment(replace(short, run=replace(short.run, variant=variant)))
        outcomes[variant] = (rec.summary["final_metric"], tuple(rec.prototypes))
    values = list(outcomes.values())
    passed = values[0] == values[1] == values[2]
    metrics_shown = {v: outcomes[v][0] for v in outcomes}
    return GateResult(
        "h", "stage-1 equivalence of lb/ub/gpe",
        passed, f"final metrics {metrics_shown} and prototype dumps bit-identical: {passed}",
    )


# --- (i) dynamic prototype growth law ----------------------------------------------


def gate_growth_law(t_max: int = 20, growth: int = 5) -> GateResult:
    rng = child_rng(0, "check", "growth")
    state = md.init_model(4, 5, 6, 3, growth, rng)
    cs = ct.make_constraint(0.01, 10.0, 0.1, "dynamic")
    ok = all(bank.rows == growth for bank in state.banks)
    for t in range(2, t_max + 1):
        ct.stage_transition(state, cs, "dynamic", growth, rng)
        for bank in state.banks:
            ok = ok and bank.rows == growth * t and bank.frozen_rows == growth * (t - 1)
    final = [bank.rows for bank in state.banks]
    return GateResult(
        "i", "dynamic growth count (g*t per class)",
        ok, f"after stage {t_max}: per-class rows {final} (expected {growth * t_max})",
    )


# --- driver ------------------------------------------------------------------------


def run_checks(cfg_path: str | None = None, only: str | None = None) -> list[GateResult]:
    quick = {
        "a": gate_gradients,
        "b": gate_dual,
        "c": gate_average_precision,
        "d": gate_combinations,
        "e": gate_reservoir,
        "f": gate_idx_round_trip,
        "i": gate_growth_law,
    }
    wanted = set(only.replace(",", "")) if only else set("abcdefghi")
    results = []
    cfg = None
    for letter in "abcdefghi":
        if letter not in wanted:
            continue
        if letter in quick:
            results.append(quick[letter]())
            continue
        if cfg is None:
            cfg = load_config(cfg_path or "configs/rmnist_md.cfg")
        gate = gate_determinism if letter == "g" else gate_stage1_equivalence
        try:
            results.append(gate(cfg))
        except Exception as exc:  # surface run failures as gate failures
            name = "same-seed rerun determinism" if letter == "g" else "stage-1 equivalence"
            results.append(GateResult(letter, name, False, f"run failed: {exc}"))
    return results
