import json
import warnings

import pytest

from dance.harness.config import (
    SCHEMA,
    ConfigError,
    ExperimentConfig,
    GridWarning,
    load_config,
    parse_config,
)
from dance.harness.metrics import MetricsError, MetricsWriter, check_additivity, emit_metrics, encode, read_metrics


# config -----------------------------------------------------------------------------

def test_defaults_round_trip_through_text():
    cfg = ExperimentConfig()
    again = parse_config(cfg.to_text())
    assert again.values == cfg.values
    assert again.hash() == cfg.hash()


def test_parse_types_and_comments():
    cfg = parse_config("""
    # a comment
    gate.tau = 0.1   # trailing
    train.constraint_grid = 0.3, 0.5
    train.path_drop = off
    train.fixed_constraint = none
    sweep.constraints = fine
    """)
    assert cfg["gate.tau"] == 0.1
    assert cfg["train.constraint_grid"] == (0.3, 0.5)
    assert cfg["train.path_drop"] is False
    assert cfg["train.fixed_constraint"] is None
    assert len(cfg["sweep.constraints"]) == 21


@pytest.mark.parametrize("text,match", [
    ("net.depth = 3", "unknown config key"),
    ("gate.tau = 0.5\ngate.tau = 0.1", "duplicate"),
    ("net.width = wide", "expected int"),
    ("train.path_drop = maybe", "boolean"),
    ("just words", "key = value"),
])
def test_parse_errors_name_the_line(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text, "exp.cfg")


def test_validation_rejects_bad_constraints_and_tau():
    for key, value in [("train.fixed_constraint", "1.5"), ("sweep.constraints", "0.0, 0.5"), ("gate.tau", "0")]:
        cfg = ExperimentConfig()
        cfg.set(key, value)
        with pytest.raises(ConfigError):
            cfg.validate()


def test_validation_rejects_all_zero_default_ablation():
    cfg = ExperimentConfig()
    for n in ("static", "dynamic", "feature", "corr"):
        cfg.set(f"score.{n}", "0")
    with pytest.raises(ConfigError):
        cfg.validate()


def test_off_grid_values_warn_but_load():
    cfg = ExperimentConfig()
    cfg.set("gate.tau", "0.7")
    cfg.set("train.lr_gate", "0.002")
    with pytest.warns(GridWarning):
        notes = cfg.validate()
    assert len(notes) == 2


def test_published_defaults_are_silent():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert ExperimentConfig().validate() == []


def test_hash_ignores_seed_and_output_only():
    a, b = ExperimentConfig(), ExperimentConfig()
    b.set("seed", 9)
    b.set("out", "elsewhere")
    assert a.hash() == b.hash()
    b.set("net.width", "64")
    assert a.hash() != b.hash()


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.cfg")


def test_run_config_carries_every_train_key():
    rc = ExperimentConfig().run_config(2, 3)
    train_keys = {k.split(".", 1)[1] for k in SCHEMA if k.startswith("train.")}
    assert all(hasattr(rc.train, k) for k in train_keys)
    assert tuple(rc.net.layer_widths()) == (32, 32, 32)


# metrics ----------------------------------------------------------------------------

def test_each_line_is_one_json_record(tmp_path):
    recs = [{"stage": 1, "epoch": i, "task": 0.5, "total": 0.5, "val_accuracy": float("nan")} for i in range(4)]
    path = emit_metrics(recs, tmp_path / "m.jsonl")
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert all(json.loads(l)["val_accuracy"] is None for l in lines)


def test_torn_final_line_is_ignored(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsWriter(path) as w:
        w.write({"epoch": 0})
        w.write({"epoch": 1})
    with open(path, "a") as fh:
        fh.write('{"epoch": 2, "ta')
    assert [r["epoch"] for r in read_metrics(path)] == [0, 1]


def test_corrupt_middle_line_raises(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"a": 1}\nnot json\n{"a": 2}\n')
    with pytest.raises(MetricsError, match="line 2"):
        read_metrics(path)


def test_encoding_is_stable():
    assert encode({"b": 1, "a": [1.5, 2]}) == '{"a": [1.5, 2], "b": 1}'


def test_additivity_check():
    rec = {"task": 1.0, "sparsity": 0.2, "diversity": 0.5, "correlation": 0.1, "stability": 0.0, "distill": 0.0,
           "loss_weights": {"sparsity": 0.1, "diversity": 0.01, "correlation": 0.05, "stability": 0.01},
           "total": 1.0 + 0.02 + 0.005 + 0.005}
    assert check_additivity(rec)
    rec["total"] += 1e-6
    assert not check_additivity(rec)


def test_append_mode_keeps_earlier_records(tmp_path):
    path = tmp_path / "m.jsonl"
    emit_metrics([{"i": 0}], path)
    with MetricsWriter(path, append=True) as w:
        w.write({"i": 1})
    assert [r["i"] for r in read_metrics(path)] == [0, 1]
