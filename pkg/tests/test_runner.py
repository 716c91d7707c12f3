from __future__ import annotations

import numpy as np
import pytest

from gpe import cli
from gpe import config as cf
from gpe import runner as rn
from gpe import streams as st
from gpe.errors import ConfigurationError, NumericError

TINY_ROTATION = """
[stream]
kind = rotation
t_count = 3
seed = 9

[model]
hidden = 8
feature_dim = 8
mode = dynamic
prototypes_per_class = 2
growth_per_class = 2

[optim]
lr = 0.05
epochs = 2
batch_size = 16

[constraint]
gamma = 0.05
lambda0 = 1.0
"""

TINY_HIGHLIGHT = """
[stream]
kind = highlight
t_count = 4
seed = 3
train_per_task = 4
test_sequences = 8
seq_len_min = 30
seq_len_max = 40
frame_dim = 8

[model]
hidden = 8
feature_dim = 8
mode = fixed
prototypes_per_class = 4

[optim]
lr = 0.01
epochs = 3
batch_size = 32

[constraint]
gamma = 0.5
lambda0 = 1.0
"""


def fake_rotation_stream(cfg: cf.ExperimentConfig) -> st.TaskStream:
    rng = np.random.default_rng(100 + cfg.stream.seed)
    base = st.Dataset(
        train_x=rng.uniform(size=(60, 64)),
        train_y=rng.integers(0, 10, size=60),
        test_x=rng.uniform(size=(24, 64)),
        test_y=rng.integers(0, 10, size=24),
        image_shape=(8, 8),
    )
    return st.build_rotation_stream(
        base, cfg.stream.t_count, cfg.stream.seed, cfg.stream.spacing
    )


def rotation_run(text: str = TINY_ROTATION, **overrides) -> rn.RunRecord:
    cfg = cf.parse_config(text)
    for dotted, value in overrides.items():
        section, key = dotted.split(".")
        setattr(getattr(cfg, section), key, value)
    return rn.run_experiment(cfg, stream=fake_rotation_stream(cfg))


def test_rotation_smoke() -> None:
    record = rotation_run()
    assert len(record.reports) == 3
    assert set(record.reports[2].per_task_accuracy) == {1, 2, 3}
    assert 0.0 <= record.summary["final_metric"] <= 1.0
    assert record.summary["final_metric"] == pytest.approx(
        float(np.mean(record.matrix.entries[-1]))
    )
    # constraint trace covers stages 2..3 only: stage 1 has no snapshot
    stages = {t for t, *_ in record.lambda_trace}
    assert stages == {2, 3}
    assert record.prototypes  # export lines present


def test_rotation_dynamic_growth_reflected_in_prototype_dump() -> None:
    record = rotation_run()
    # 10 classes x 2 rows x 3 stages
    assert len(record.prototypes) == 10 * 2 * 3
    birth_stages = {int(line.split(",")[1]) for line in record.prototypes}
    assert birth_stages == {1, 2, 3}


def test_same_config_same_bytes() -> None:
    a, b = rotation_run(), rotation_run()
    assert rn._metric_table(a) == rn._metric_table(b)
    assert a.lambda_trace == b.lambda_trace
    assert a.prototypes == b.prototypes


def test_stage1_equivalence_across_variants() -> None:
    outcomes = []
    for variant in ("gpe", "lb", "ub"):
        rec = rotation_run(**{"stream.t_count": 1, "run.variant": variant})
        outcomes.append((rec.summary["final_metric"], tuple(rec.prototypes)))
    assert outcomes[0] == outcomes[1] == outcomes[2]


def test_ub_pool_is_union_by_sample_identity() -> None:
    cfg = cf.parse_config(TINY_ROTATION)
    stream = fake_rotation_stream(cfg)
    x, y, ids = rn.stage_training_pool(stream, 3, "ub", with_ids=True)
    assert x.shape[0] == 3 * 60 == len(ids) == y.shape[0]
    expected = [i for t in (1, 2, 3) for i in stream.tasks[t - 1].sample_ids()]
    assert ids == expected

    x1, y1, ids1 = rn.stage_training_pool(stream, 3, "gpe", with_ids=True)
    assert ids1 == stream.tasks[2].sample_ids()
    assert x1.shape[0] == 60


def test_lambda_trace_monotone_pressure() -> None:
    record = rotation_run(**{"constraint.gamma": 1e-9})
    by_stage: dict[int, list[tuple[float, float]]] = {}
    for t, _, lam, dist in record.lambda_trace:
        by_stage.setdefault(t, []).append((lam, dist))
    pressured = 0
    for entries in by_stage.values():
        for (prev_lam, _), (lam, dist) in zip(entries, entries[1:]):
            if dist > 1e-9:
                pressured += 1
                assert lam > prev_lam
    assert pressured > 0


def test_divergence_aborts_with_diagnostics() -> None:
    # an absurd multiplier overflows the drift penalty once stage 2 starts
    with np.errstate(all="ignore"), pytest.raises(NumericError, match="diverged.*stage"):
        rotation_run(**{"constraint.lambda0": 1e308, "constraint.gamma": 1e-12})


def test_replay_variants_change_results() -> None:
    plain = rotation_run()
    der = rotation_run(**{"replay.capacity": 30, "replay.scheme": "der"})
    er = rotation_run(**{"replay.capacity": 30, "replay.scheme": "er"})
    assert rn._metric_table(der) != rn._metric_table(plain)
    assert rn._metric_table(er) != rn._metric_table(der)


def test_highlight_smoke_and_traces() -> None:
    cfg = cf.parse_config(TINY_HIGHLIGHT)
    record = rn.run_experiment(cfg)
    assert len(record.reports) == 4
    final = record.reports[-1]
    assert len(final.per_domain_ap) == 4
    assert all(0.0 <= v <= 1.0 for v in final.per_domain_ap.values())
    assert "stage1_final_ap" in record.summary
    assert record.traces and all(len(tr) > 0 for _, tr in record.traces)
    assert record.matrix is None


def test_highlight_t_count_must_match_domains() -> None:
    cfg = cf.parse_config(TINY_HIGHLIGHT)
    cfg.stream.t_count = 7
    with pytest.raises(ConfigurationError, match="one stage per domain"):
        rn.build_stream(cfg)


def test_export_files_and_round_trip(tmp_path) -> None:
    record = rotation_run()
    out = tmp_path / "r"
    paths = rn.export_results(record, out)
    names = {p.name for p in paths}
    assert names == {
        "config.resolved.cfg", "metrics.csv", "lambda_trace.csv",
        "traces.csv", "prototypes.txt", "record.json", "summary.txt",
    }

    lines = (out / "metrics.csv").read_text().strip().splitlines()
    header, final = lines[0].split(","), lines[-1].split(",")
    task_cols = [i for i, h in enumerate(header) if h.startswith("task_")]
    parsed = np.array([float(final[i]) for i in task_cols])
    assert float(np.mean(parsed)) == record.summary["final_metric"]

    loaded = rn.load_record(out / "record.json")
    assert rn._metric_table(loaded) == rn._metric_table(record)
    assert loaded.summary == record.summary
    assert loaded.lambda_trace == record.lambda_trace
    assert loaded.prototypes == record.prototypes

    again = tmp_path / "again"
    rn.export_results(loaded, again)
    assert (again / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_export_empty_record(tmp_path) -> None:
    cfg = cf.parse_config("")
    record = rn.RunRecord(cfg, cf.config_hash(cfg), 1, "test")
    rn.export_results(record, tmp_path / "empty")
    metrics = (tmp_path / "empty" / "metrics.csv").read_text()
    assert metrics.splitlines()[0].startswith("stage,average")
    assert len(metrics.strip().splitlines()) == 1


def test_sweep_empty_and_two_values() -> None:
    cfg = cf.parse_config(TINY_HIGHLIGHT)
    assert rn.run_sweep(cfg, "gamma", []) == []
    records = rn.run_sweep(cfg, "gamma", ["0.5", "50"])
    assert len(records) == 2
    assert records[0].config.constraint.gamma == 0.5
    assert records[1].config.constraint.gamma == 50.0
    table = rn.sweep_table("gamma", ["0.5", "50"], records)
    assert table.splitlines()[0] == "gamma,final_metric,mean_metric_across_stages"
    assert len(table.strip().splitlines()) == 3


def test_cli_run_sweep_check_export(tmp_path, capsys) -> None:
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY_HIGHLIGHT)

    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists()

    swept = tmp_path / "swept"
    code = cli.main([
        "sweep", "--config", str(cfg_path), "--axis", "gamma",
        "--values", "0.5,50", "--out", str(swept),
    ])
    assert code == 0
    assert (swept / "sweep.csv").exists()
    assert (swept / "gamma-0.5" / "metrics.csv").exists()

    assert cli.main(["check", "--only", "b,c,d,f,i"]) == 0
    printed = capsys.readouterr().out
    assert printed.count("PASS") >= 5

    exported = tmp_path / "re"
    code = cli.main([
        "export", "--record", str(out / "record.json"), "--out", str(exported),
    ])
    assert code == 0
    assert (exported / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_cli_buffer_flag_activates_der(tmp_path) -> None:
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY_HIGHLIGHT)
    out = tmp_path / "buffered"
    code = cli.main([
        "run", "--config", str(cfg_path), "--out", str(out), "--buffer", "20",
    ])
    assert code == 0
    resolved = (out / "config.resolved.cfg").read_text()
    assert "capacity = 20" in resolved
    assert "scheme = der" in resolved


def test_cli_reports_config_errors(tmp_path, capsys) -> None:
    bad = tmp_path / "bad.cfg"
    bad.write_text("gamma = -1\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "line 1" in capsys.readouterr().err
