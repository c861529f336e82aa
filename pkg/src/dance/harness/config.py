"""Flat dotted-key experiment configuration.

File format: one ``key = value`` per line, ``#`` starts a comment. Lists are
comma separated. Unknown keys are rejected; values outside the declared
hyperparameter grids are accepted with a warning.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..archspace import SuperNetConfig
from ..evalbench import ABLATION_GRID, COARSE_GRID, FINE_GRID, SENSITIVITY_GRIDS, SweepSpec
from ..gate import GateConfig
from ..scoring import MODES, ScoreWeights
from ..trainer import RunConfig, TrainConfig
from .data import DatasetSpec


class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 2)."""


class GridWarning(UserWarning):
    pass


# key -> (type, default). Types: int, float, bool, str, ints, floats, strs, float?, str?
SCHEMA: dict[str, tuple[str, Any]] = {
    "seed": ("int", 0),
    "out": ("str", "runs"),
    "data.kind": ("str", "spirals"),
    "data.classes": ("int", 3),
    "data.samples_per_class": ("int", 1000),
    "data.input_dim": ("int", 2),
    "data.noise": ("float", 0.05),
    "data.spacing": ("float", 4.0),
    "data.turns": ("float", 1.0),
    "data.train_images": ("str?", None),
    "data.train_labels": ("str?", None),
    "data.test_images": ("str?", None),
    "data.test_labels": ("str?", None),
    "data.fractions": ("floats", (0.81, 0.09, 0.10)),
    "net.num_layers": ("int", 3),
    "net.width": ("int", 32),
    "net.activation": ("str", "relu"),
    "gate.tau": ("float", 0.5),
    "gate.hidden": ("int", 32),
    "gate.embed_dim": ("int", 16),
    "gate.straight_through": ("bool", True),
    "gate.score_function": ("bool", False),
    "gate.k_min": ("int", 1),
    "score.static": ("float", 0.25),
    "score.dynamic": ("float", 0.25),
    "score.feature": ("float", 0.25),
    "score.corr": ("float", 0.25),
    "score.noise": ("float", 0.1),
    "score.corr_strength": ("float", 0.5),
    "score.alpha": ("float", 0.1),
    "score.buffer_batches": ("int", 4),
    "train.stage1_epochs": ("int", 100),
    "train.stage2_epochs": ("int", 100),
    "train.stage3_epochs": ("int", 20),
    "train.samples_per_batch": ("int", 4),
    "train.batch_size": ("int", 64),
    "train.steps_per_epoch": ("int?", None),
    "train.lr_gate": ("float", 0.001),
    "train.lr_repr": ("float", 0.0005),
    "train.lr_backbone": ("float", 0.001),
    "train.weight_decay": ("float", 0.01),
    "train.betas": ("floats", (0.9, 0.999)),
    "train.eps": ("float", 1e-8),
    "train.warmup_frac": ("float", 0.30),
    "train.constraint_grid": ("floats", (0.3, 0.4, 0.5)),
    "train.fixed_constraint": ("float?", None),
    "train.patience": ("int", 15),
    "train.w_sparsity": ("float", 0.1),
    "train.w_diversity": ("float", 0.01),
    "train.w_corr": ("float", 0.05),
    "train.w_stability": ("float", 0.01),
    "train.path_drop": ("bool", True),
    "train.path_keep_start": ("float", 1.0),
    "train.path_keep_end": ("float", 0.7),
    "train.self_distill": ("bool", False),
    "train.distill_weight": ("float", 0.1),
    "train.score_function_weight": ("float", 1.0),
    "sweep.constraints": ("floats", COARSE_GRID),
    "sweep.seeds": ("ints", (0, 1, 2, 3, 4)),
    "sweep.baselines": ("strs", ("dance", "score_based_pruning", "random_mask")),
    "sweep.finetune": ("bool", False),
    "sweep.finetune_epochs": ("int", 20),
    "sweep.random_draws": ("int", 1),
    "ablation.modes": ("strs", MODES),
    "ablation.constraints": ("floats", ABLATION_GRID),
    "sensitivity.batch_size": ("ints", SENSITIVITY_GRIDS["batch_size"]),
    "sensitivity.alpha": ("floats", SENSITIVITY_GRIDS["alpha"]),
    "sensitivity.lambda_corr": ("floats", SENSITIVITY_GRIDS["lambda_corr"]),
    "sensitivity.tau": ("floats", SENSITIVITY_GRIDS["tau"]),
    "eval.split": ("str", "test"),
    "metrics.wall_clock": ("bool", True),
}

# published hyperparameter grids: leaving them is allowed but flagged
LR_GRID = (0.0001, 0.0005, 0.001)
GRIDS: dict[str, tuple] = {
    "gate.tau": (0.1, 0.5, 1.0),
    "train.lr_gate": LR_GRID,
    "train.lr_repr": LR_GRID,
    "train.lr_backbone": LR_GRID,
    "train.constraint_grid": (0.3, 0.4, 0.5),
    "ablation.constraints": ABLATION_GRID,
}

CONSTRAINT_KEYS = ("train.constraint_grid", "train.fixed_constraint", "sweep.constraints", "ablation.constraints")

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _scalar(kind: str, text: str, key: str):
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {text!r}") from None
    if kind == "bool":
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    return text


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind = SCHEMA[key][0]
    text = text.strip()
    if kind.endswith("?"):
        if text.lower() in ("", "none", "null"):
            return None
        kind = kind[:-1]
    if kind in ("ints", "floats", "strs"):
        if text == "fine" and key == "sweep.constraints":
            return FINE_GRID
        if text == "coarse" and key == "sweep.constraints":
            return COARSE_GRID
        inner = text.strip("[]() ")
        parts = [p.strip() for p in inner.split(",") if p.strip()]
        return tuple(_scalar(kind[:-1], p, key) for p in parts)
    return _scalar(kind, text, key)


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = parse_value(key, value) if isinstance(value, str) else value

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in SCHEMA)

    def hash(self) -> str:
        """Digest of the settings a checkpoint depends on; seed and output directory are stored separately."""
        payload = {k: format_value(v) for k, v in sorted(self.values.items()) if k not in ("out", "seed")}
        return hashlib.blake2b(json.dumps(payload, sort_keys=True).encode(), digest_size=8).hexdigest()

    # builders ------------------------------------------------------------
    def dataset_spec(self) -> DatasetSpec:
        v = self.values
        return DatasetSpec(kind=v["data.kind"], classes=v["data.classes"],
                           samples_per_class=v["data.samples_per_class"], input_dim=v["data.input_dim"],
                           noise=v["data.noise"], spacing=v["data.spacing"], turns=v["data.turns"],
                           train_images=v["data.train_images"], train_labels=v["data.train_labels"],
                           test_images=v["data.test_images"], test_labels=v["data.test_labels"],
                           fractions=tuple(v["data.fractions"]))

    def run_config(self, input_dim: int, num_classes: int) -> RunConfig:
        v = self.values
        net = SuperNetConfig(input_dim, num_classes, v["net.num_layers"], v["net.width"],
                             activation=v["net.activation"])
        gate = GateConfig(tau=v["gate.tau"], hidden=v["gate.hidden"], embed_dim=v["gate.embed_dim"],
                          straight_through=v["gate.straight_through"], score_function=v["gate.score_function"],
                          k_min=v["gate.k_min"])
        score = ScoreWeights(static=v["score.static"], dynamic=v["score.dynamic"], feature=v["score.feature"],
                             corr=v["score.corr"], noise=v["score.noise"], corr_strength=v["score.corr_strength"],
                             alpha=v["score.alpha"])
        train = TrainConfig(**{k.split(".", 1)[1]: (tuple(x) if isinstance(x, (list, tuple)) else x)
                               for k, x in v.items() if k.startswith("train.")})
        return RunConfig(net=net, gate=gate, score=score, train=train, buffer_batches=v["score.buffer_batches"],
                         wall_clock=v["metrics.wall_clock"])

    def sweep_spec(self) -> SweepSpec:
        v = self.values
        return SweepSpec(constraints=v["sweep.constraints"], seeds=tuple(v["sweep.seeds"]),
                         baselines=tuple(v["sweep.baselines"]), finetune=v["sweep.finetune"],
                         finetune_epochs=v["sweep.finetune_epochs"], random_draws=v["sweep.random_draws"])

    # validation ------------------------------------------------------------
    def validate(self) -> list[str]:
        """Raise ConfigError on hard violations; return (and warn about) off-grid values."""
        v = self.values
        for key in CONSTRAINT_KEYS:
            val = v[key]
            for c in (val if isinstance(val, (tuple, list)) else (val,)):
                if c is not None and not 0.0 < c <= 1.0:
                    raise ConfigError(f"{key}: constraint {c} outside (0, 1]")
        if not v["gate.tau"] > 0:
            raise ConfigError(f"gate.tau must be positive, got {v['gate.tau']}")
        for m in v["ablation.modes"]:
            if m not in MODES:
                raise ConfigError(f"ablation.modes: unknown mode {m!r}")
        if "default" in v["ablation.modes"] and not any(
                v[f"score.{n}"] > 0 for n in ("static", "dynamic", "feature", "corr")):
            raise ConfigError("default ablation mode needs at least one non-zero score weight")
        try:
            self.run_config(max(1, v["data.input_dim"]), max(2, v["data.classes"]))
            self.dataset_spec()
            self.sweep_spec()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None
        notes = []
        for key, grid in GRIDS.items():
            val = v[key]
            for x in (val if isinstance(val, (tuple, list)) else (val,)):
                if x is not None and not any(abs(x - g) < 1e-12 for g in grid):
                    notes.append(f"{key} = {format_value(x)} is outside the published grid {format_value(grid)}")
        for n in notes:
            warnings.warn(n, GridWarning, stacklevel=2)
        return notes


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            cfg.values[key] = parse_value(key, value)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
    return parse_config(text, str(p))
