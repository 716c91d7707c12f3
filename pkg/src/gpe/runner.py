"""Experiment orchestration: stage loop, bound variants, sweeps, persistence.

One experiment = one seeded, single-threaded pass over a task stream:

    for stage t = 1..T:
        transition (snapshot banks, reset lambda and learning rate, grow)
        for each epoch, each shuffled batch:
            classification forward/backward (+ drift penalty when active)
            replay term (er / der) from the reservoir buffer
            gradient step on encoder, head, and prototypes
            dual ascent on lambda; observe the batch into the buffer
        evaluate on the full test protocol, append a StageReport

Variants: ``gpe`` trains with the drift constraint; ``lb`` trains the same
model sequentially without it (lower bound); ``ub`` trains each stage on the
union of all data seen so far (upper bound). All three share initialization,
data order, and prototype-growth draws, so stage 1 is bit-identical.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import constraint as ct
from . import metrics as mt
from . import model as md
from . import replay as rp
from . import streams as st
from .config import ExperimentConfig, config_hash, parse_config, resolved_text, set_axis
from .errors import ConfigurationError, InvariantError, NumericError
from .numcore import sgd_step
from .seeding import child_rng


@dataclass
class RunRecord:
    """Everything a finished run produced (metrics only; no tensors)."""

    config: ExperimentConfig
    config_hash: str
    seed: int
    code_version: str
    reports: list[mt.StageReport] = field(default_factory=list)
    matrix: mt.AccuracyMatrix | None = None
    lambda_trace: list[tuple[int, int, float, float]] = field(default_factory=list)
    traces: list[tuple[str, list[float]]] = field(default_factory=list)
    prototypes: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def build_stream(cfg: ExperimentConfig) -> st.TaskStream:
    s = cfg.stream
    if s.kind == "rotation":
        base = st.load_digit_dataset(s.data_dir)
        return st.build_rotation_stream(base, s.t_count, s.seed, s.spacing)
    spec = st.HighlightStreamSpec(
        train_per_task=s.train_per_task,
        test_sequences=s.test_sequences,
        seq_len_min=s.seq_len_min,
        seq_len_max=s.seq_len_max,
        feature_dim=s.frame_dim,
        signature_scale=s.signature_scale,
        signature_decay=s.signature_decay,
        noise_scale=s.noise_scale,
        combo_decay=s.combo_decay,
    )
    if s.t_count != len(spec.domain_names):
        raise ConfigurationError(
            f"highlight streams run one stage per domain "
            f"({len(spec.domain_names)}), got t_count = {s.t_count}"
        )
    return st.build_highlight_stream(spec, s.seed)


def _task_arrays(stream: st.TaskStream, t: int) -> tuple[np.ndarray, np.ndarray]:
    task = stream.tasks[t - 1]
    if stream.kind == "rotation":
        return task.samples, task.labels
    x = np.concatenate([seq.frames for seq in task.sequences], axis=0)
    y = np.concatenate([seq.frame_labels for seq in task.sequences], axis=0)
    return x, y


def stage_training_pool(
    stream: st.TaskStream, t: int, variant: str, with_ids: bool = False
):
    """Training arrays for stage t: task t alone, or the union for ``ub``."""
    stages = range(1, t + 1) if variant == "ub" else range(t, t + 1)
    xs, ys, ids = [], [], []
    for i in stages:
        x, y = _task_arrays(stream, i)
        xs.append(x)
        ys.append(y)
        if with_ids:
            task = stream.tasks[i - 1]
            if stream.kind == "rotation":
                ids.extend(task.sample_ids())
            else:
                ids.extend(
                    (seq.sid, k)
                    for seq in task.sequences
                    for k in range(seq.frames.shape[0])
                )
    x, y = np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)
    return (x, y, ids) if with_ids else (x, y)


def _grow_architecture(state, cstate, cfg: ExperimentConfig, t: int, variant: str):
    """Enter stage t > 1. Bound variants mirror the growth draws exactly."""
    grow_rng = child_rng(cfg.stream.seed, "growth", t)
    mode = cfg.model.mode
    if variant == "gpe":
        ct.stage_transition(state, cstate, mode, cfg.model.growth_per_class, grow_rng)
    elif mode == "dynamic":
        m = state.feature_dim
        for bank in state.banks:
            bank.append_rows(
                grow_rng.normal(0.0, 1.0 / np.sqrt(m), (cfg.model.growth_per_class, m)),
                birth_stage=t,
            )


def _evaluate_stage(state, stream: st.TaskStream, t: int, matrix) -> tuple[dict, dict, float]:
    """Returns (per_task_accuracy, per_domain_ap, average_metric)."""
    if stream.kind == "rotation":
        per_task = {}
        for j in range(1, t + 1):
            acc = mt.accuracy(state, stream.test.task_view(j))
            matrix.record(t, j, acc)
            per_task[j] = acc
        return per_task, {}, float(np.mean(matrix.row(t)))
    seqs = stream.test.sequences
    active = sorted(stream.tasks[t - 1].domains, key=lambda d: d.id)
    scores = mt.highlight_scores(state, seqs)
    per_domain = mt.ap_per_domain(scores, seqs, active)
    if not per_domain:
        raise NumericError(f"stage {t}: every active domain lacked test positives")
    return {}, per_domain, float(np.mean(list(per_domain.values())))


def run_experiment(cfg: ExperimentConfig, stream: st.TaskStream | None = None) -> RunRecord:
    variant = cfg.run.variant
    seed = cfg.stream.seed
    if stream is None:
        stream = build_stream(cfg)
    t_count = len(stream.tasks)

    x0, y0 = _task_arrays(stream, 1)
    input_dim = x0.shape[1]
    classes = 10 if stream.kind == "rotation" else 2
    state = md.init_model(
        input_dim,
        cfg.model.hidden,
        cfg.model.feature_dim,
        classes,
        cfg.model.prototypes_per_class,
        child_rng(seed, "init"),
    )
    cstate = ct.make_constraint(
        cfg.constraint.gamma, cfg.constraint.lambda0, cfg.constraint.dual_step,
        cfg.model.mode,
    )

    replay_on = cfg.replay.scheme != "none" and cfg.replay.capacity > 0
    buffer = rp.ReplayBuffer(cfg.replay.capacity, classes)
    res_rng = child_rng(seed, "reservoir")
    rep_rng = child_rng(seed, "replay")

    record = RunRecord(cfg, config_hash(cfg), seed, __version__)
    matrix = mt.AccuracyMatrix(t_count) if stream.kind == "rotation" else None
    record.matrix = matrix

    global_step = 0
    for t in range(1, t_count + 1):
        started = time.perf_counter()
        if t > 1:
            _grow_architecture(state, cstate, cfg, t, variant)
        x, y = stage_training_pool(stream, t, variant)
        n = x.shape[0]
        constraint_arg = cstate if variant == "gpe" else None
        stage_lambdas: list[float] = []

        for epoch in range(cfg.optim.epochs):
            if cfg.optim.lr_halve_every > 0:
                lr = cfg.optim.lr * 0.5 ** (epoch // cfg.optim.lr_halve_every)
            else:
                lr = cfg.optim.lr
            order = child_rng(seed, "shuffle", t, epoch).permutation(n)
            for lo in range(0, n, cfg.optim.batch_size):
                idx = order[lo : lo + cfg.optim.batch_size]
                xb, yb = x[idx], y[idx]
                try:
                    fb = md.forward_backward(xb, yb, state, constraint_arg)
                    step_loss = fb.total_loss
                    if replay_on and len(buffer):
                        past = rp.sample(buffer, cfg.optim.batch_size, rep_rng)
                        if cfg.replay.scheme == "er":
                            step_loss += rp.er_loss(state, past)
                        else:
                            step_loss += cfg.replay.alpha * rp.der_loss(
                                state, past, weight=cfg.replay.alpha
                            )
                except (NumericError, InvariantError) as exc:
                    raise NumericError(
                        f"training diverged: stage {t}, step {global_step}, "
                        f"lambda {cstate.lam}: {exc}"
                    ) from exc
                if not np.isfinite(step_loss):
                    raise NumericError(
                        f"training diverged: stage {t}, step {global_step}, "
                        f"loss {step_loss}, lambda {cstate.lam}"
                    )
                for p in state.params():
                    sgd_step(p, lr)
                if constraint_arg is not None and cstate.active:
                    ct.dual_update(cstate, fb.bank_dist)
                    record.lambda_trace.append(
                        (t, global_step, cstate.lam, fb.bank_dist)
                    )
                    stage_lambdas.append(cstate.lam)
                if replay_on:
                    rp.observe_batch(buffer, xb, yb, fb.scores, t, res_rng)
                global_step += 1

        per_task, per_domain, average = _evaluate_stage(state, stream, t, matrix)
        summary = (
            (min(stage_lambdas), max(stage_lambdas), stage_lambdas[-1])
            if stage_lambdas
            else None
        )
        record.reports.append(
            mt.StageReport(
                stage=t,
                per_task_accuracy=per_task,
                per_domain_ap=per_domain,
                average_metric=average,
                lambda_summary=summary,
                wall_clock=time.perf_counter() - started,
            )
        )

    record.prototypes = md.export_prototypes(state).splitlines()
    if stream.kind == "highlight":
        record.traces = [
            (seq.sid, [float(v) for v in mt.score_trace(state, seq)])
            for seq in stream.test.sequences
        ]
    record.summary = _summarize(cfg, stream, record)
    return record


def _summarize(cfg: ExperimentConfig, stream: st.TaskStream, record: RunRecord) -> dict:
    final = record.reports[-1]
    out = {
        "kind": stream.kind,
        "variant": cfg.run.variant,
        "stages": len(record.reports),
        "per_stage_average": [r.average_metric for r in record.reports],
        "mean_metric_across_stages": float(
            np.mean([r.average_metric for r in record.reports])
        ),
    }
    if stream.kind == "rotation":
        out["final_metric"] = mt.average_accuracy(record.matrix)
        if len(record.reports) >= 2:
            out["forgetting"] = [float(v) for v in mt.forgetting(record.matrix)]
    else:
        out["final_metric"] = final.average_metric
        out["final_per_domain_ap"] = dict(final.per_domain_ap)
        stage1 = sorted(stream.tasks[0].domains, key=lambda d: d.id)
        out["stage1_final_ap"] = float(
            np.mean([final.per_domain_ap[d.name] for d in stage1])
        )
    return out


def run_sweep(cfg: ExperimentConfig, axis: str, values) -> list[RunRecord]:
    """One run per value on a copy of cfg; shared seed and stream."""
    return [run_experiment(set_axis(cfg, axis, v)) for v in values]


def sweep_table(axis: str, values, records: list[RunRecord]) -> str:
    lines = [f"{axis},final_metric,mean_metric_across_stages"]
    for v, rec in zip(values, records):
        lines.append(
            f"{v},{rec.summary['final_metric']!r},"
            f"{rec.summary['mean_metric_across_stages']!r}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# persistence


def _metric_table(record: RunRecord) -> str:
    """One row per stage; fixed columns; full-precision floats."""
    reports = record.reports
    if record.matrix is not None:
        t_count = record.matrix.t_count
        header = ["stage", "average"] + [f"task_{j}" for j in range(1, t_count + 1)]
        rows = []
        for rep in reports:
            cells = [str(rep.stage), repr(rep.average_metric)]
            for j in range(1, t_count + 1):
                v = rep.per_task_accuracy.get(j)
                cells.append("" if v is None else repr(v))
            rows.append(",".join(cells))
    else:
        names: list[str] = []
        for rep in reports:
            names += [n for n in rep.per_domain_ap if n not in names]
        header = ["stage", "average"] + names
        rows = []
        for rep in reports:
            cells = [str(rep.stage), repr(rep.average_metric)]
            for n in names:
                v = rep.per_domain_ap.get(n)
                cells.append("" if v is None else repr(v))
            rows.append(",".join(cells))
    return "\n".join([",".join(header)] + rows) + "\n"


def export_results(record: RunRecord, out_dir) -> list[Path]:
    """Write the documented file set; returns the paths written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []

        def emit(name: str, text: str) -> None:
            path = out / name
            path.write_text(text, encoding="utf-8")
            written.append(path)

        emit("config.resolved.cfg", resolved_text(record.config))
        emit("metrics.csv", _metric_table(record))
        emit(
            "lambda_trace.csv",
            "\n".join(
                ["stage,step,lambda,bank_distance"]
                + [f"{t},{s},{lam!r},{d!r}" for t, s, lam, d in record.lambda_trace]
            )
            + "\n",
        )
        emit(
            "traces.csv",
            "\n".join(
                ["sid,frame,score"]
                + [
                    f"{sid},{i},{v!r}"
                    for sid, values in record.traces
                    for i, v in enumerate(values)
                ]
            )
            + "\n",
        )
        emit("prototypes.txt", "\n".join(record.prototypes) + "\n")
        emit("record.json", json.dumps(_record_payload(record), indent=1))
        emit("summary.txt", _human_summary(record))
        return written
    except OSError as exc:
        raise ConfigurationError(f"cannot write results under {out}: {exc}") from exc


def _record_payload(record: RunRecord) -> dict:
    return {
        "config_hash": record.config_hash,
        "seed": record.seed,
        "code_version": record.code_version,
        "config": resolved_text(record.config),
        "reports": [
            {
                "stage": r.stage,
                "per_task_accuracy": {str(k): v for k, v in r.per_task_accuracy.items()},
                "per_domain_ap": r.per_domain_ap,
                "average_metric": r.average_metric,
                "lambda_summary": r.lambda_summary,
            }
            for r in record.reports
        ],
        "lambda_trace": [list(row) for row in record.lambda_trace],
        "traces": [[sid, values] for sid, values in record.traces],
        "prototypes": record.prototypes,
        "summary": record.summary,
    }


def load_record(path) -> RunRecord:
    """Rebuild a RunRecord from record.json (wall clocks are not persisted)."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    cfg = parse_config(data["config"])
    record = RunRecord(cfg, data["config_hash"], data["seed"], data["code_version"])
    t_count = cfg.stream.t_count
    if cfg.stream.kind == "rotation" and data["reports"]:
        record.matrix = mt.AccuracyMatrix(t_count)
    for r in data["reports"]:
        per_task = {int(k): v for k, v in r["per_task_accuracy"].items()}
        summary = r["lambda_summary"]
        record.reports.append(
            mt.StageReport(
                stage=r["stage"],
                per_task_accuracy=per_task,
                per_domain_ap=r["per_domain_ap"],
                average_metric=r["average_metric"],
                lambda_summary=tuple(summary) if summary else None,
            )
        )
        if record.matrix is not None:
            for j, v in per_task.items():
                record.matrix.record(r["stage"], j, v)
    record.lambda_trace = [tuple(row) for row in data["lambda_trace"]]
    record.traces = [(sid, values) for sid, values in data["traces"]]
    record.prototypes = data["prototypes"]
    record.summary = data["summary"]
    return record


def _human_summary(record: RunRecord) -> str:
    lines = [
        f"variant: {record.config.run.variant}",
        f"seed: {record.seed}",
        f"config_hash: {record.config_hash}",
        f"code_version: {record.code_version}",
    ]
    for rep in record.reports:
        bits = [f"stage {rep.stage}: average {rep.average_metric:.4f}"]
        if rep.lambda_summary:
            lo, hi, last = rep.lambda_summary
            bits.append(f"lambda [{lo:.4g}, {hi:.4g}] final {last:.4g}")
        bits.append(f"{rep.wall_clock:.2f}s")
        lines.append("; ".join(bits))
    for key, value in sorted(record.summary.items()):
        if key not in ("per_stage_average",):
            lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"
