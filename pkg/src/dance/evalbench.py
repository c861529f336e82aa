"""Baselines, constraint sweeps, the single-component ablation grid and sensitivity sweeps."""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .archspace import LayerMask, count_flops, count_params, extract_subnet, retained_count
from .diffcore.rng import RngStreams
from .harness.data import Dataset, Split
from .scoring import MODES, ImportanceState, ScoreWeights, combined_score
from .trainer import RunConfig, Trainer, finetune_subnet, predict


class ArtifactError(LookupError):
    pass


class BaselineKind(str, Enum):
    DANCE = "dance"
    SCORE = "score_based_pruning"
    RANDOM = "random_mask"


COARSE_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
FINE_GRID = tuple(round(0.10 + 0.02 * i, 2) for i in range(21))
ABLATION_GRID = (0.9, 0.8, 0.7, 0.6, 0.5)

SENSITIVITY_GRIDS: dict[str, tuple] = {
    "batch_size": (8, 16, 32, 64, 128),
    "alpha": (0.05, 0.1, 0.3, 0.5, 1.0),
    "lambda_corr": (0.0, 0.25, 0.5, 0.75, 1.0),
    "tau": (0.1, 0.5, 1.0),
}


def _check_constraints(cs: Iterable[float]) -> tuple[float, ...]:
    cs = tuple(float(c) for c in cs)
    if not cs:
        raise ValueError("constraint list is empty")
    for c in cs:
        if not 0.0 < c <= 1.0:
            raise ValueError(f"constraint {c} outside (0, 1]")
    return cs


@dataclass(frozen=True)
class SweepSpec:
    constraints: tuple[float, ...] = COARSE_GRID
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    baselines: tuple[BaselineKind, ...] = tuple(BaselineKind)
    finetune: bool = False
    finetune_epochs: int = 20
    random_draws: int = 1

    def __post_init__(self):
        object.__setattr__(self, "constraints", _check_constraints(self.constraints))
        object.__setattr__(self, "baselines", tuple(BaselineKind(b) for b in self.baselines))
        if not self.seeds:
            raise ValueError("sweep needs at least one seed")
        if self.random_draws < 1:
            raise ValueError("random_draws must be >= 1")

    @classmethod
    def coarse(cls, **kw) -> "SweepSpec":
        return cls(constraints=COARSE_GRID, **kw)

    @classmethod
    def fine(cls, **kw) -> "SweepSpec":
        return cls(constraints=FINE_GRID, **kw)


@dataclass(frozen=True)
class SweepRecord:
    baseline: str
    constraint: float
    seed: int
    accuracy: float
    params: int
    flops: int
    wall_ms: float


SWEEP_COLUMNS = ("baseline", "constraint", "seed", "accuracy", "params", "flops", "wall_ms")


@dataclass
class SweepResult:
    records: list[SweepRecord] = field(default_factory=list)

    def cell(self, baseline, constraint: float) -> list[SweepRecord]:
        b = BaselineKind(baseline).value
        return [r for r in self.records if r.baseline == b and abs(r.constraint - constraint) < 1e-12]

    def aggregate(self) -> dict[tuple[str, float], tuple[float, float]]:
        keys = sorted({(r.baseline, r.constraint) for r in self.records})
        out = {}
        for b, c in keys:
            acc = np.array([r.accuracy for r in self.cell(b, c)])
            out[(b, c)] = (float(acc.mean()), float(acc.std()))
        return out

    def mean(self, baseline, constraint: float) -> float:
        return float(np.mean([r.accuracy for r in self.cell(baseline, constraint)]))

    def to_csv(self, path: str | Path) -> Path:
        rows = [[r.baseline, r.constraint, r.seed, r.accuracy, r.params, r.flops, r.wall_ms]
                for r in self.records]
        return write_csv(path, SWEEP_COLUMNS, rows)


@dataclass(frozen=True)
class AblationSpec:
    mode: str = "default"
    constraints: tuple[float, ...] = ABLATION_GRID

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "constraints", _check_constraints(self.constraints))

    def weights(self, base: ScoreWeights) -> ScoreWeights:
        return base.only(self.mode)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


# baselines -------------------------------------------------------------------

def score_based_prune(states: Sequence[ImportanceState], weights: ScoreWeights, constraint: float,
                      k_min: int = 1) -> list[LayerMask]:
    """Top-k by combined score per layer; ties go to the lowest index."""
    masks = []
    for s in states:
        k = max(k_min, retained_count(constraint, s.width))
        v = combined_score(s, weights).values
        masks.append(LayerMask.from_indices(s.layer, s.width, np.argsort(-v, kind="stable")[:k]))
    return masks


def random_mask(width: int, k: int, gen: np.random.Generator, layer: int = 0) -> LayerMask:
    """Uniform k-subset via the first k steps of a Fisher-Yates shuffle."""
    if not 1 <= k <= width:
        raise IndexError(f"retained count {k} outside [1, {width}]")
    idx = np.arange(width)
    for i in range(k):
        j = i + int(gen.integers(width - i))
        idx[i], idx[j] = idx[j], idx[i]
    return LayerMask.from_indices(layer, width, idx[:k])


def random_masks(widths: Sequence[int], constraint: float, gen: np.random.Generator,
                 k_min: int = 1) -> list[LayerMask]:
    return [random_mask(w, max(k_min, retained_count(constraint, w)), gen, l) for l, w in enumerate(widths)]


def evaluate_accuracy(model_or_sub, split: Split, masks: Sequence[LayerMask] | None = None) -> float:
    if len(split) == 0:
        raise ValueError("cannot evaluate accuracy on an empty split")
    pred = predict(model_or_sub, split.x, masks)
    return float(np.mean(pred == split.y))


# experiment plumbing -----------------------------------------------------------

@dataclass
class Experiment:
    """Everything needed to (re)run stages for one seed: run config plus a dataset factory."""
    config: RunConfig
    make_data: Callable[[int], Dataset]
    split: str = "test"

    def trainer(self, seed: int, config: RunConfig | None = None) -> Trainer:
        return Trainer(config or self.config, self.make_data(seed), seed, run_id=f"seed{seed}")


def run_stages(exp: Experiment, seed: int, stage2: bool = True) -> Trainer:
    tr = exp.trainer(seed)
    tr.stage1()
    if stage2:
        tr.stage2()
    return tr


def fork_stage2(pretrained: Trainer, config: RunConfig) -> Trainer:
    """Copy a stage-1 trainer and run stage 2 under a different config (shared pre-training)."""
    tr = copy.deepcopy(pretrained)
    tr.on_record = None
    tr.config = config
    tr.stage2()
    return tr


def masks_for(kind: BaselineKind, tr: Trainer, constraint: float, gen: np.random.Generator) -> list[LayerMask]:
    kind = BaselineKind(kind)
    if kind is BaselineKind.DANCE:
        return tr.deploy(constraint)
    if kind is BaselineKind.SCORE:
        tr._prime_buffers()
        return score_based_prune(tr.model.states, tr.config.score, constraint, tr.config.gate.k_min)
    if kind is BaselineKind.RANDOM:
        return random_masks(tr.model.net.widths, constraint, gen, tr.config.gate.k_min)
    raise AssertionError(kind)


def sweep_constraints(spec: SweepSpec, trainers: Mapping[int, Trainer], split: str = "test",
                      out: str | Path | None = None) -> SweepResult:
    """Evaluate every (baseline, constraint, seed) cell on frozen stage-2 artifacts."""
    missing = [s for s in spec.seeds if s not in trainers]
    if missing:
        raise ArtifactError(f"no stage-2 artifacts for seeds {missing}")
    res = SweepResult()
    for seed in spec.seeds:
        tr = trainers[seed]
        net = tr.model.net
        data = tr.data.split(split)
        for kind in spec.baselines:
            gen = RngStreams(seed)[f"sweep/{kind.value}"]
            for c in spec.constraints:
                draws = spec.random_draws if kind is BaselineKind.RANDOM else 1
                for _ in range(draws):
                    t0 = time.perf_counter()
                    masks = masks_for(kind, tr, c, gen)
                    if spec.finetune:
                        sub = extract_subnet(net, masks, {"constraint": c, "seed": seed, "baseline": kind.value})
                        finetune_subnet(sub, tr.data, tr.tc, RngStreams(seed)[f"sweep/finetune/{kind.value}/{c}"],
                                        spec.finetune_epochs)
                        acc = evaluate_accuracy(sub, data)
                    else:
                        acc = evaluate_accuracy(net, data, masks)
                    wall = (time.perf_counter() - t0) * 1000.0 if tr.config.wall_clock else 0.0
                    res.records.append(SweepRecord(kind.value, c, seed, acc, count_params(net, masks),
                                                   count_flops(net, masks), round(wall, 3)))
    if out is not None:
        res.to_csv(Path(out) / "sweep.csv")
    return res


@dataclass(frozen=True)
class AblationRecord:
    mode: str
    constraint: float
    seed: int
    accuracy: float


def ablation_run(exp: Experiment, seeds: Sequence[int] = (0, 1, 2, 3, 4), modes: Sequence[str] = MODES,
                 constraints: Sequence[float] = ABLATION_GRID, out: str | Path | None = None,
                 pretrained: Mapping[int, Trainer] | None = None) -> list[AblationRecord]:
    """One stage-2 run per (mode, seed) on a shared stage-1 SuperNet; deployment accuracy per constraint."""
    specs = [AblationSpec(m, tuple(constraints)) for m in modes]
    for sp in specs:
        sp.weights(exp.config.score)
    recs = []
    for seed in seeds:
        base = pretrained[seed] if pretrained and seed in pretrained else run_stages(exp, seed, stage2=False)
        for sp in specs:
            cfg = replace(exp.config, score=sp.weights(exp.config.score))
            tr = fork_stage2(base, cfg)
            split = tr.data.split(exp.split)
            for c in sp.constraints:
                recs.append(AblationRecord(sp.mode, c, seed, evaluate_accuracy(tr.model.net, split, tr.deploy(c))))
    if out is not None:
        write_csv(Path(out) / "ablation.csv", ("mode", "constraint", "seed", "accuracy"),
                  [[r.mode, r.constraint, r.seed, r.accuracy] for r in recs])
    return recs


def ablation_table(recs: Sequence[AblationRecord]) -> dict[str, dict[float, float]]:
    """mode -> constraint -> mean accuracy over seeds."""
    table: dict[str, dict[float, list[float]]] = {}
    for r in recs:
        table.setdefault(r.mode, {}).setdefault(r.constraint, []).append(r.accuracy)
    return {m: {c: float(np.mean(v)) for c, v in row.items()} for m, row in table.items()}


@dataclass(frozen=True)
class SensitivityRecord:
    value: float
    seed: int
    accuracy: float
    params: int


def with_axis(config: RunConfig, axis: str, value) -> RunConfig:
    if axis == "batch_size":
        return replace(config, train=replace(config.train, batch_size=int(value)))
    if axis == "alpha":
        return replace(config, score=replace(config.score, alpha=float(value)))
    if axis == "lambda_corr":
        return replace(config, score=replace(config.score, corr_strength=float(value)))
    if axis == "tau":
        return replace(config, gate=replace(config.gate, tau=float(value)))
    raise ValueError(f"unknown sensitivity axis {axis!r}; expected one of {tuple(SENSITIVITY_GRIDS)}")


def sensitivity_sweep(exp: Experiment, axis: str, grid: Sequence | None = None,
                      seeds: Sequence[int] = (0, 1, 2, 3, 4), constraint: float | None = None,
                      out: str | Path | None = None,
                      pretrained: Mapping[int, Trainer] | None = None) -> list[SensitivityRecord]:
    """Rerun stage 2 per grid value on a shared stage-1 SuperNet and evaluate the deployed mask."""
    grid = tuple(SENSITIVITY_GRIDS[axis] if grid is None else grid)
    if not grid:
        raise ValueError("sensitivity grid is empty")
    configs = [with_axis(exp.config, axis, v) for v in grid]
    c = exp.config.train.eval_constraint if constraint is None else constraint
    recs = []
    for seed in seeds:
        base = pretrained[seed] if pretrained and seed in pretrained else run_stages(exp, seed, stage2=False)
        for v, cfg in zip(grid, configs):
            tr = fork_stage2(base, cfg)
            masks = tr.deploy(c)
            acc = evaluate_accuracy(tr.model.net, tr.data.split(exp.split), masks)
            recs.append(SensitivityRecord(v, seed, acc, count_params(tr.model.net, masks)))
    if out is not None:
        write_csv(Path(out) / f"sensitivity_{axis}.csv", ("value", "seed", "accuracy", "params"),
                  [[r.value, r.seed, r.accuracy, r.params] for r in recs])
    return recs
