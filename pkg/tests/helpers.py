"""Shared oracles and fixtures-by-function for the test suite."""

from __future__ import annotations

import functools
from dataclasses import replace

import numpy as np

from dance.archspace import SuperNetConfig
from dance.diffcore import Parameter
from dance.diffcore.rng import RngStreams
from dance.evalbench import Experiment, run_stages
from dance.harness.data import DatasetSpec, build_dataset
from dance.trainer import RunConfig, TrainConfig, Trainer

H = 1e-6


def numeric_grad(f, param: Parameter, h: float = H) -> np.ndarray:
    """Central differences of scalar f() w.r.t. every entry of param.data."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def grad_errors(build, params) -> list[float]:
    """build() returns a scalar Tensor; compare reverse-mode against central differences."""
    for p in params:
        p.grad = None
    build().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errs = []
    for p, a in zip(params, analytic):
        n = numeric_grad(lambda: build().item(), p)
        errs.append(rel_err(a, n))
    return errs


def instance_error(build, params) -> float:
    """Relative error of the whole gradient of one instance, all parameters concatenated."""
    for p in params:
        p.grad = None
    build().backward()
    analytic = np.concatenate([(np.zeros_like(p.data) if p.grad is None else p.grad).ravel() for p in params])
    numeric = np.concatenate([numeric_grad(lambda: build().item(), p).ravel() for p in params])
    return rel_err(analytic, numeric)


def small_data(seed: int = 0, kind: str = "spirals", spc: int = 120, classes: int = 3, noise: float = 0.05):
    return build_dataset(DatasetSpec(kind=kind, classes=classes, samples_per_class=spc, noise=noise),
                         RngStreams(seed)["data"])


def small_config(width: int = 16, layers: int = 2, input_dim: int = 2, classes: int = 3, **train) -> RunConfig:
    tc = dict(stage1_epochs=3, stage2_epochs=3, stage3_epochs=2, batch_size=32)
    tc.update(train)
    return RunConfig(net=SuperNetConfig(input_dim, classes, layers, width), train=TrainConfig(**tc),
                     wall_clock=False)


def small_trainer(seed: int = 0, **train) -> Trainer:
    return Trainer(small_config(**train), small_data(seed), seed)


# desk-scale protocol shared by the acceptance suite --------------------------------

DESK_SEEDS = (0, 1, 2, 3, 4)
DESK_DATA = DatasetSpec(kind="spirals", classes=3, samples_per_class=1000, noise=0.05)


def desk_experiment() -> Experiment:
    cfg = RunConfig(net=SuperNetConfig(2, 3, 3, 32), wall_clock=False)
    return Experiment(cfg, lambda s: build_dataset(DESK_DATA, RngStreams(s)["data"]))


@functools.lru_cache(maxsize=None)
def desk_pretrained() -> dict:
    exp = desk_experiment()
    return {s: run_stages(exp, s, stage2=False) for s in DESK_SEEDS}


@functools.lru_cache(maxsize=None)
def desk_stage2() -> dict:
    """Default-config stage-2 runs forked from the shared stage-1 SuperNets."""
    from dance.evalbench import fork_stage2
    exp = desk_experiment()
    return {s: fork_stage2(tr, exp.config) for s, tr in desk_pretrained().items()}


def with_train(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, **kw))


# acceptance registry: criterion id -> (title, passed, detail) ------------------------

ACCEPTANCE: dict = {}


def record(key, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[key] = (title, passed, detail)
