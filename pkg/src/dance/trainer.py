"""Three-stage training: SuperNet pre-training, gate/distribution learning, SubNet fine-tuning."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .archspace import (
    LayerMask,
    SubNet,
    SuperNet,
    SuperNetConfig,
    extract_subnet,
    full_activations,
    layer_features,
    retained_count,
)
from .diffcore import AdamW, Parameter, Tensor, cross_entropy, log, log_softmax, mul, no_grad, softmax, tabs, tsum
from .diffcore.rng import RngStreams
from .gate import GateConfig, GateOutput, GateParams, batch_repr, gate_logits, sample_from_logits
from .harness.data import Dataset, Split
from .scoring import (
    ImportanceState,
    ScoreWeights,
    combined_score,
    commit_dynamic,
    dynamic_preview,
    feature_importance_update,
    fuse,
    mean_abs_correlation,
    score_tensor,
)

log_ = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 100
    stage2_epochs: int = 100
    stage3_epochs: int = 20
    samples_per_batch: int = 4
    batch_size: int = 64
    steps_per_epoch: int | None = None
    lr_gate: float = 0.001
    lr_repr: float = 0.0005
    lr_backbone: float = 0.001
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_frac: float = 0.30
    constraint_grid: tuple[float, ...] = (0.3, 0.4, 0.5)
    fixed_constraint: float | None = None
    patience: int = 15
    w_sparsity: float = 0.1
    w_diversity: float = 0.01
    w_corr: float = 0.05
    w_stability: float = 0.01
    path_drop: bool = True
    path_keep_start: float = 1.0
    path_keep_end: float = 0.7
    self_distill: bool = False
    distill_weight: float = 0.1
    score_function_weight: float = 1.0

    def __post_init__(self):
        if self.samples_per_batch < 1:
            raise ValueError("samples_per_batch must be >= 1")
        if min(self.stage1_epochs, self.stage2_epochs, self.stage3_epochs) < 1 or self.patience < 1:
            raise ValueError("epochs and patience must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        for c in tuple(self.constraint_grid) + ((self.fixed_constraint,) if self.fixed_constraint is not None else ()):
            if not 0.0 < c <= 1.0:
                raise ValueError(f"constraint {c} outside (0, 1]")
        if min(self.lr_gate, self.lr_repr, self.lr_backbone, self.weight_decay) < 0:
            raise ValueError("learning rates and weight decay must be non-negative")
        if not self.constraint_grid:
            raise ValueError("constraint_grid is empty")
        for p in (self.path_keep_start, self.path_keep_end):
            if not 0.0 < p <= 1.0:
                raise ValueError("path keep probabilities must be in (0, 1]")

    @property
    def eval_constraint(self) -> float:
        if self.fixed_constraint is not None:
            return self.fixed_constraint
        return float(np.median(self.constraint_grid))


@dataclass
class LossBreakdown:
    task: float
    sparsity: float = 0.0
    diversity: float = 0.0
    correlation: float = 0.0
    stability: float = 0.0
    distill: float = 0.0
    weights: dict = field(default_factory=dict)
    total: float = 0.0

    def reconstruct(self) -> float:
        w = self.weights
        return (self.task + w.get("sparsity", 0.0) * self.sparsity + w.get("diversity", 0.0) * self.diversity
                + w.get("correlation", 0.0) * self.correlation + w.get("stability", 0.0) * self.stability
                + w.get("distill", 0.0) * self.distill)


@dataclass
class TrainState:
    stage: int = 0
    epoch: int = 0
    global_step: int = 0
    best_val: float = -1.0
    since_improve: int = 0
    stopped: bool = False
    total_epochs: int = 0


@dataclass
class Model:
    """Everything stage 2 learns: backbone, per-layer gates and importance states."""
    net: SuperNet
    gates: list[GateParams]
    states: list[ImportanceState]

    @classmethod
    def create(cls, net_config: SuperNetConfig, gate_config: GateConfig, rngs: RngStreams,
               buffer_batches: int = 4) -> "Model":
        net = SuperNet(net_config, rngs["init/net"])
        gates = [GateParams(l, net_config.input_dim, w, gate_config, rngs["init/gate"])
                 for l, w in enumerate(net_config.layer_widths())]
        states = [ImportanceState.create(l, w, rngs["init/score"], buffer_batches)
                  for l, w in enumerate(net_config.layer_widths())]
        return cls(net, gates, states)

    def gate_group(self) -> list[Parameter]:
        out: list[Parameter] = []
        for g, s in zip(self.gates, self.states):
            out += g.gate_parameters() + s.parameters()
        return out

    def repr_group(self) -> list[Parameter]:
        return [p for g in self.gates for p in g.repr_parameters()]

    def backbone_group(self) -> list[Parameter]:
        return self.net.parameters()

    def parameters(self) -> list[Parameter]:
        """Every learnable array in a fixed order: backbone, gates, importance states."""
        out = self.net.parameters()
        for g in self.gates:
            out += g.parameters()
        for s in self.states:
            out += s.parameters()
        return out


def predict(model_or_sub, x: np.ndarray, masks: Sequence[LayerMask] | None = None) -> np.ndarray:
    with no_grad():
        if isinstance(model_or_sub, SubNet):
            logits = model_or_sub.forward(x)
        else:
            net = model_or_sub.net if isinstance(model_or_sub, Model) else model_or_sub
            bits = None if masks is None else [m.bits.astype(np.float64) for m in masks]
            logits, _ = net.forward(x, bits)
    return np.argmax(logits.data, axis=1)


def accuracy(model_or_sub, split: Split, masks=None) -> float:
    if len(split) == 0:
        raise ValueError("cannot evaluate accuracy on an empty split")
    return float(np.mean(predict(model_or_sub, split.x, masks) == split.y))


def batches(n: int, batch_size: int, gen: np.random.Generator, steps: int | None = None) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch smaller than 2 rows is dropped."""
    out: list[np.ndarray] = []
    while True:
        perm = gen.permutation(n)
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            if idx.size < 2:
                continue
            out.append(idx)
            if steps is not None and len(out) == steps:
                return out
        if steps is None or n < 2:
            return out


def steps_per_epoch(n: int, cfg: TrainConfig) -> int:
    if cfg.steps_per_epoch is not None:
        return cfg.steps_per_epoch
    full, rem = divmod(n, cfg.batch_size)
    return full + (1 if rem >= 2 else 0)


# deployment sampling ---------------------------------------------------------

def deploy_masks(model: Model, x_deploy: np.ndarray, constraint: float, gate_config: GateConfig,
                 weights: ScoreWeights, gen: np.random.Generator | None = None) -> list[LayerMask]:
    """Noise-free (default) or stochastic sample of one mask per layer for a scenario."""
    with no_grad():
        acts = full_activations(model.net, x_deploy)
        masks = []
        for l, (g, s) in enumerate(zip(model.gates, model.states)):
            logits = gate_logits(batch_repr(x_deploy, g), layer_features(acts[l]), g)
            score = combined_score(s, weights).values
            k = max(gate_config.k_min, retained_count(constraint, g.width))
            masks.append(sample_from_logits(logits, score, k, gate_config, gen, l).mask)
    return masks


# losses ----------------------------------------------------------------------

def total_loss(task_loss: Tensor, outputs: Sequence[GateOutput], states: Sequence[ImportanceState],
               config: TrainConfig, progress: float, constraints: Sequence[float],
               dynamic_previews: Sequence[Tensor] | None = None) -> tuple[LossBreakdown, Tensor]:
    """Task loss plus the four auxiliary terms; returns the breakdown and the differentiable total."""
    sparsity = Tensor(0.0)
    diversity = Tensor(0.0)
    stability = Tensor(0.0)
    for l, (out, st) in enumerate(zip(outputs, states)):
        p = out.probs
        w = p.shape[0]
        sparsity = sparsity + tabs(p.mean() - constraints[l])
        diversity = diversity + (math.log(w) + tsum(mul(p, log(p))))
        if dynamic_previews is not None:
            stability = stability + tsum(tabs(dynamic_previews[l] - Tensor(st.dynamic)))
        else:
            stability = stability + st.last_dynamic_change
        stability = stability + st.last_feature_change
    corr = float(np.mean([mean_abs_correlation(s) for s in states])) if all(s.buffer for s in states) else 0.0
    weights = {"sparsity": config.w_sparsity * progress, "diversity": config.w_diversity,
               "correlation": config.w_corr, "stability": config.w_stability}
    total = (task_loss + sparsity * weights["sparsity"] + diversity * weights["diversity"]
             + corr * weights["correlation"] + stability * weights["stability"])
    bd = LossBreakdown(task_loss.item(), sparsity.item(), diversity.item(), corr, stability.item(),
                       weights=weights, total=total.item())
    return bd, total


def _kl(teacher_logits: np.ndarray, student: Tensor) -> Tensor:
    t = softmax(Tensor(teacher_logits)).data
    logt = log_softmax(Tensor(teacher_logits)).data
    n = teacher_logits.shape[0]
    return tsum(mul(Tensor(t), Tensor(logt) - log_softmax(student))) * (1.0 / n)


# trainer -----------------------------------------------------------------------

@dataclass
class RunConfig:
    net: SuperNetConfig
    gate: GateConfig = field(default_factory=GateConfig)
    score: ScoreWeights = field(default_factory=ScoreWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    buffer_batches: int = 4
    wall_clock: bool = True


class Trainer:
    """Owns one run's mutable state; stages run in order and append metrics records."""

    def __init__(self, config: RunConfig, data: Dataset, seed: int, run_id: str = "run",
                 model: Model | None = None, rngs: RngStreams | None = None):
        self.config = config
        self.data = data
        self.seed = int(seed)
        self.run_id = run_id
        self.rngs = rngs if rngs is not None else RngStreams(seed)
        self.model = model if model is not None else Model.create(config.net, config.gate, self.rngs,
                                                                  config.buffer_batches)
        self.state = TrainState()
        self.records: list[dict] = []
        self.optimizers: dict[str, AdamW] = {}
        self.warnings: list[str] = []
        self.subnet: SubNet | None = None
        self.on_record: Callable[[dict], None] | None = None

    # helpers -------------------------------------------------------------
    @property
    def tc(self) -> TrainConfig:
        return self.config.train

    def _emit(self, stage: int, epoch: int, bd: LossBreakdown, val: float, ks, t0: float, **extra) -> dict:
        rec = {
            "run_id": self.run_id, "stage": stage, "epoch": epoch, "step": self.state.global_step,
            "task": bd.task, "sparsity": bd.sparsity, "diversity": bd.diversity, "correlation": bd.correlation,
            "stability": bd.stability, "distill": bd.distill, "total": bd.total,
            "loss_weights": dict(bd.weights), "val_accuracy": val, "k": list(ks),
            "mean_score": extra.pop("mean_score", []),
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if self.config.wall_clock else 0.0,
        }
        rec.update(extra)
        self.records.append(rec)
        if self.on_record is not None:
            self.on_record(rec)
        return rec

    def _early_stop(self, val: float) -> bool:
        st = self.state
        if val > st.best_val:
            st.best_val = val
            st.since_improve = 0
        else:
            st.since_improve += 1
        if st.since_improve >= self.tc.patience:
            st.stopped = True
        return st.stopped

    def _begin_stage(self, stage: int) -> None:
        self.state = TrainState(stage=stage, global_step=self.state.global_step)

    def _mean_scores(self) -> list[float]:
        if not all(s.buffer for s in self.model.states):
            return []
        return [float(combined_score(s, self.config.score).values.mean()) for s in self.model.states]

    def deploy(self, constraint: float, x_deploy: np.ndarray | None = None,
               gen: np.random.Generator | None = None) -> list[LayerMask]:
        x = self.data.train.x if x_deploy is None else x_deploy
        self._prime_buffers()
        return deploy_masks(self.model, x, constraint, self.config.gate, self.config.score, gen)

    def _prime_buffers(self) -> None:
        if all(s.buffer for s in self.model.states):
            return
        acts = full_activations(self.model.net, self.data.train.x[: max(2, self.tc.batch_size)])
        for s, a in zip(self.model.states, acts):
            if not s.buffer:
                s.push_activations(a)

    # stage 1 -------------------------------------------------------------
    def stage1(self, epochs: int | None = None) -> list[dict]:
        tc = self.tc
        epochs = tc.stage1_epochs if epochs is None else epochs
        self._begin_stage(1)
        net = self.model.net
        train = self.data.train
        n_steps = steps_per_epoch(len(train), tc)
        opt = AdamW(net.parameters(), tc.lr_backbone, max(1, epochs * n_steps), tc.weight_decay, tc.betas,
                    tc.eps, tc.warmup_frac)
        self.optimizers = {"backbone": opt}
        t0 = time.perf_counter()
        self.initial_val = accuracy(net, self.data.val) if len(self.data.val) else float("nan")
        out = []
        total_steps = max(1, epochs * n_steps)
        step = 0
        for epoch in range(epochs):
            t0 = time.perf_counter()
            last = None
            for idx in batches(len(train), tc.batch_size, self.rngs["shuffle/stage1"], tc.steps_per_epoch):
                x, y = train.x[idx], train.y[idx]
                masks = None
                if tc.path_drop:
                    keep = tc.path_keep_start + (tc.path_keep_end - tc.path_keep_start) * step / total_steps
                    gen = self.rngs["stage1/path_drop"]
                    masks = []
                    for w in net.widths:
                        u = gen.random(w)
                        bits = (u < keep).astype(np.float64)
                        if bits.sum() == 0:
                            bits[int(np.argmin(u))] = 1.0
                        masks.append(bits)
                logits, _ = net.forward(x, masks)
                task = cross_entropy(logits, y)
                loss = task
                distill = 0.0
                if tc.self_distill:
                    with no_grad():
                        teacher, _ = net.forward(x)
                    kl = _kl(teacher.data, logits)
                    distill = kl.item()
                    loss = task + kl * tc.distill_weight
                if not math.isfinite(loss.item()):
                    raise TrainingError(f"non-finite stage-1 loss at step {self.state.global_step} "
                                        f"(epoch {epoch}); parameter norms "
                                        f"{[float(np.linalg.norm(p.data)) for p in net.parameters()]}")
                loss.backward()
                opt.step()
                step += 1
                self.state.global_step += 1
                last = LossBreakdown(task.item(), distill=distill,
                                     weights={"distill": tc.distill_weight if tc.self_distill else 0.0},
                                     total=loss.item())
            val = accuracy(net, self.data.val)
            self.state.epoch = epoch + 1
            out.append(self._emit(1, epoch, last or LossBreakdown(0.0), val, net.widths, t0))
            if self._early_stop(val):
                break
        return out

    # stage 2 -------------------------------------------------------------
    def _stage2_optimizers(self, total_steps: int) -> dict[str, AdamW]:
        tc = self.tc
        mk = lambda params, lr: AdamW(params, lr, total_steps, tc.weight_decay, tc.betas, tc.eps, tc.warmup_frac)
        return {"gates": mk(self.model.gate_group(), tc.lr_gate),
                "repr": mk(self.model.repr_group(), tc.lr_repr),
                "backbone": mk(self.model.backbone_group(), tc.lr_backbone)}

    def start_stage2(self, epochs: int | None = None) -> None:
        epochs = self.tc.stage2_epochs if epochs is None else epochs
        self._begin_stage(2)
        self.state.total_epochs = epochs
        n_steps = steps_per_epoch(len(self.data.train), self.tc)
        self.optimizers = self._stage2_optimizers(max(1, epochs * n_steps))
        self._prime_buffers()

    def stage2(self, epochs: int | None = None, stop_after: int | None = None,
               on_epoch_end: Callable[["Trainer"], None] | None = None) -> list[dict]:
        """Run (or resume) distribution learning; `stop_after` interrupts after that many epochs."""
        if self.state.stage != 2:
            self.start_stage2(epochs)
        out = []
        done = 0
        while self.state.epoch < self.state.total_epochs and not self.state.stopped:
            if stop_after is not None and done >= stop_after:
                break
            out.append(self._stage2_epoch())
            done += 1
            if on_epoch_end is not None:
                on_epoch_end(self)
        return out

    def _stage2_epoch(self) -> dict:
        tc, cfg = self.tc, self.config
        model = self.model
        train = self.data.train
        n_steps = steps_per_epoch(len(train), tc)
        total_steps = max(1, self.state.total_epochs * n_steps)
        epoch = self.state.epoch
        t0 = time.perf_counter()
        collapsed = 0
        n_batches = 0
        last_bd = None
        last_ks: list[int] = []
        for idx in batches(len(train), tc.batch_size, self.rngs["shuffle/stage2"], tc.steps_per_epoch):
            x, y = train.x[idx], train.y[idx]
            progress = min(1.0, (epoch * n_steps + n_batches) / total_steps)
            last_bd, masks_per_sample = self._stage2_step(x, y, progress)
            last_ks = [m.k for m in masks_per_sample[-1]]
            if len(masks_per_sample) > 1 and all(
                    all(np.array_equal(a.bits, b.bits) for a, b in zip(masks_per_sample[0], ms))
                    for ms in masks_per_sample[1:]):
                collapsed += 1
            n_batches += 1
            self.state.global_step += 1
        val = accuracy(model.net, self.data.val, self.deploy(tc.eval_constraint))
        collapse = n_batches > 0 and tc.samples_per_batch > 1 and collapsed > 0.9 * n_batches
        if collapse:
            self.warnings.append(f"diversity collapse in stage 2 epoch {epoch}")
            log_.warning("diversity collapse in stage 2 epoch %d", epoch)
        self.state.epoch = epoch + 1
        rec = self._emit(2, epoch, last_bd or LossBreakdown(0.0), val, last_ks, t0,
                         mean_score=self._mean_scores(), diversity_collapse=bool(collapse),
                         score_breakdown=[combined_score(s, cfg.score).breakdown() for s in model.states])
        # stage 2 runs its full schedule; validation is tracked but never stops it
        if val > self.state.best_val:
            self.state.best_val = val
        return rec

    def _stage2_step(self, x: np.ndarray, y: np.ndarray, progress: float):
        tc, cfg = self.tc, self.config
        model = self.model
        acts_full = full_activations(model.net, x)
        feats = [layer_features(a) for a in acts_full]
        logits, previews, scores = [], [], []
        for l, (g, s) in enumerate(zip(model.gates, model.states)):
            logits.append(gate_logits(batch_repr(x, g), feats[l], g))
            prev = dynamic_preview(s, fuse(s, feats[l]), cfg.score, self.rngs["stage2/dynamic"], x.shape[0])
            previews.append(prev)
            scores.append(score_tensor(s, cfg.score, prev))
        grid = tc.constraint_grid
        total = None
        breakdowns = []
        all_masks = []
        feedback = []
        last_acts = None
        for _ in range(tc.samples_per_batch):
            if tc.fixed_constraint is not None:
                c = tc.fixed_constraint
            else:
                c = float(grid[int(self.rngs["stage2/constraint"].integers(len(grid)))])
            outs = []
            for l, g in enumerate(model.gates):
                k = max(cfg.gate.k_min, retained_count(c, g.width))
                outs.append(sample_from_logits(logits[l], scores[l], k, cfg.gate, self.rngs["stage2/gate"], l))
            for o in outs:
                assert int(o.mask.bits.sum()) == o.mask.k
            out_logits, acts = model.net.forward(x, [o.st_mask for o in outs])
            task = cross_entropy(out_logits, y)
            bd, loss = total_loss(task, outs, model.states, tc, progress, [c] * len(outs), previews)
            total = loss if total is None else total + loss
            feedback.append((task.item(), outs))
            breakdowns.append(bd)
            all_masks.append([o.mask for o in outs])
            last_acts = acts
        if cfg.gate.score_function and tc.score_function_weight > 0:
            total = total + self._score_function_term(feedback)
        total = total * (1.0 / tc.samples_per_batch)
        if not math.isfinite(total.item()):
            raise TrainingError(f"non-finite stage-2 loss at step {self.state.global_step}")
        total.backward()
        for opt in self.optimizers.values():
            opt.step()
        for l, s in enumerate(model.states):
            commit_dynamic(s, previews[l].data)
            feature_importance_update(s, last_acts[l], cfg.score)
            s.push_activations(last_acts[l])
        return breakdowns[-1], all_masks

    def _score_function_term(self, feedback) -> Tensor:
        """Log-probability of each drawn mask weighted by its task loss minus the other draws' mean."""
        losses = np.array([f[0] for f in feedback])
        n = len(losses)
        term = Tensor(0.0)
        for i, (_, outs) in enumerate(feedback):
            base = (losses.sum() - losses[i]) / (n - 1) if n > 1 else 0.0
            adv = self.tc.score_function_weight * (losses[i] - base)
            for o in outs:
                term = term + o.log_prob * adv
        return term

    # stage 3 -------------------------------------------------------------
    def stage3(self, constraint: float, epochs: int | None = None, x_deploy: np.ndarray | None = None,
               stochastic: bool = False) -> tuple[SubNet, dict]:
        retained_count(constraint, 2)
        self._begin_stage(3)
        gen = self.rngs["stage3/deploy"] if stochastic else None
        masks = self.deploy(constraint, x_deploy, gen)
        sub = extract_subnet(self.model.net, masks, {"constraint": constraint, "seed": self.seed})
        pre_val = accuracy(sub, self.data.val)
        pre_test = accuracy(sub, self.data.test)
        self.state.best_val = pre_val
        ks = [m.k for m in masks]

        def on_epoch(epoch, bd, val, t0):
            self.state.epoch = epoch + 1
            self.state.global_step += steps_per_epoch(len(self.data.train), self.tc)
            self._emit(3, epoch, bd, val, ks, t0)
            return self._early_stop(val)

        finetune_subnet(sub, self.data, self.tc, self.rngs["shuffle/stage3"], epochs, on_epoch)
        self.subnet = sub
        info = {"constraint": constraint, "pre_val": pre_val, "pre_test": pre_test,
                "post_val": accuracy(sub, self.data.val), "post_test": accuracy(sub, self.data.test),
                "masks": masks}
        return sub, info


def finetune_subnet(sub: SubNet, data: Dataset, tc: TrainConfig, gen: np.random.Generator,
                    epochs: int | None = None,
                    on_epoch: Callable[[int, LossBreakdown, float, float], bool] | None = None) -> float:
    """Task-only fine-tuning; keeps the best-validation weights. `on_epoch` returning True stops early."""
    epochs = tc.stage3_epochs if epochs is None else epochs
    train = data.train
    opt = AdamW(sub.parameters(), tc.lr_backbone, max(1, epochs * steps_per_epoch(len(train), tc)),
                tc.weight_decay, tc.betas, tc.eps, tc.warmup_frac)
    best_val = accuracy(sub, data.val)
    best = [p.data.copy() for p in sub.parameters()]
    since = 0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        last = None
        for idx in batches(len(train), tc.batch_size, gen, tc.steps_per_epoch):
            task = cross_entropy(sub.forward(train.x[idx]), train.y[idx])
            if not math.isfinite(task.item()):
                raise TrainingError(f"non-finite stage-3 loss in epoch {epoch}")
            task.backward()
            opt.step()
            last = LossBreakdown(task.item(), total=task.item())
        val = accuracy(sub, data.val)
        if val > best_val:
            best_val, since = val, 0
            best = [p.data.copy() for p in sub.parameters()]
        else:
            since += 1
        stop = on_epoch(epoch, last or LossBreakdown(0.0), val, t0) if on_epoch else since >= tc.patience
        if stop:
            break
    for p, b in zip(sub.parameters(), best):
        p.data = b
    return best_val


# functional entry points -------------------------------------------------------

def stage1_pretrain(trainer: Trainer, epochs: int | None = None) -> tuple[SuperNet, list[dict]]:
    return trainer.model.net, trainer.stage1(epochs)


def stage2_distribution_learning(trainer: Trainer, epochs: int | None = None) -> tuple[Model, list[dict]]:
    return trainer.model, trainer.stage2(epochs)


def stage3_finetune(trainer: Trainer, constraint: float, epochs: int | None = None) -> tuple[SubNet, dict]:
    return trainer.stage3(constraint, epochs)
