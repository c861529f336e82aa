"""Data-aware select gate: batch embedding + layer summary -> logits -> exact-k mask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .archspace import InsufficientBatchError, LayerMask, retained_count
from .diffcore import (
    DimensionError,
    Parameter,
    Tensor,
    concat,
    dense_affine,
    log_softmax,
    mul,
    relu,
    reshape,
    softmax,
    straight_through,
    tsum,
)
from .diffcore.rng import gumbel


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class GateConfig:
    tau: float = 0.5
    hidden: int = 32
    embed_dim: int = 16
    straight_through: bool = True
    score_function: bool = False
    k_min: int = 1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.hidden < 1 or self.embed_dim < 1 or self.k_min < 1:
            raise ValueError("hidden, embed_dim and k_min must be >= 1")


class GateParams:
    def __init__(self, layer: int, input_dim: int, width: int, config: GateConfig, rng: np.random.Generator):
        e, h = config.embed_dim, config.hidden
        n_in = e + 4 * width
        self.layer = layer
        self.width = width
        self.repr_w = Parameter(rng.normal(0.0, 1.0 / math.sqrt(2 * input_dim), size=(2 * input_dim, e)),
                                f"gate{layer}.repr_w")
        self.comb_w = Parameter(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, h)), f"gate{layer}.comb_w")
        self.comb_b = Parameter(np.zeros(h), f"gate{layer}.comb_b")
        self.mlp_w1 = Parameter(rng.normal(0.0, math.sqrt(2.0 / h), size=(h, h)), f"gate{layer}.mlp_w1")
        self.mlp_b1 = Parameter(np.zeros(h), f"gate{layer}.mlp_b1")
        self.mlp_w2 = Parameter(rng.normal(0.0, 0.1 / math.sqrt(h), size=(h, width)), f"gate{layer}.mlp_w2")
        self.mlp_b2 = Parameter(np.zeros(width), f"gate{layer}.mlp_b2")

    def repr_parameters(self) -> list[Parameter]:
        return [self.repr_w]

    def gate_parameters(self) -> list[Parameter]:
        return [self.comb_w, self.comb_b, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]

    def parameters(self) -> list[Parameter]:
        return self.repr_parameters() + self.gate_parameters()


@dataclass
class GateOutput:
    logits: Tensor
    soft: Tensor
    probs: Tensor
    mask: LayerMask
    log_prob: Tensor
    st_mask: Tensor


def batch_stats(batch) -> np.ndarray:
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientBatchError(f"batch representation needs at least 2 rows, got shape {x.shape}")
    return np.concatenate([x.mean(axis=0), x.std(axis=0)])


def batch_repr(batch, params: GateParams) -> Tensor:
    stats = batch_stats(batch)
    if stats.size != params.repr_w.shape[0]:
        raise DimensionError(f"batch statistics of size {stats.size} do not fit projection {params.repr_w.shape}")
    return reshape(Tensor(stats[None, :]) @ params.repr_w, (params.repr_w.shape[1],))


def gate_logits(embedding: Tensor, layer_feats: np.ndarray, params: GateParams) -> Tensor:
    f = np.nan_to_num(np.asarray(layer_feats, dtype=np.float64))
    if f.shape != (params.width, 4):
        raise DimensionError(f"layer features shape {f.shape} != ({params.width}, 4)")
    x = reshape(concat([embedding, Tensor(f.ravel())]), (1, -1))
    h = dense_affine(x, params.comb_w, params.comb_b)
    h = relu(dense_affine(h, params.mlp_w1, params.mlp_b1))
    return reshape(dense_affine(h, params.mlp_w2, params.mlp_b2), (params.width,))


def gumbel_soft(logits: Tensor, tau: float, gen: np.random.Generator | None) -> Tensor:
    """softmax((g + eps) / tau); no noise when `gen` is None."""
    if gen is None:
        return softmax(logits * (1.0 / tau))
    eps = gumbel(gen, logits.shape)
    return softmax((logits + Tensor(eps)) * (1.0 / tau))


def _score_tensor(score) -> Tensor:
    if isinstance(score, Tensor):
        return score
    return Tensor(getattr(score, "values", score))


def sampling_logits(soft: Tensor, score) -> Tensor:
    return mul(soft, _score_tensor(score))


def sampling_probs(soft: Tensor, score) -> Tensor:
    return softmax(sampling_logits(soft, score))


def bernoulli_sample_exact_k(p, k: int, gen: np.random.Generator | None, layer: int = 0) -> tuple[LayerMask, float]:
    """Gumbel-top-k on ln p: exactly k distinct dimensions; deterministic top-k when `gen` is None."""
    p = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    w = p.size
    if not 1 <= k <= w:
        raise IndexError(f"retained count {k} outside [1, {w}]")
    positive = p > 0
    if int(positive.sum()) < k:
        raise InfeasibleError(f"only {int(positive.sum())} dimensions have positive probability, need {k}")
    with np.errstate(divide="ignore"):
        logp = np.where(positive, np.log(np.where(positive, p, 1.0)), -np.inf)
    keys = logp if gen is None else logp + gumbel(gen, w)
    idx = np.argsort(-keys, kind="stable")[:k]
    mask = LayerMask.from_indices(layer, w, idx)
    return mask, float(logp[idx].sum())


def sample_from_logits(logits: Tensor, score, k: int, config: GateConfig,
                       gen: np.random.Generator | None, layer: int = 0) -> GateOutput:
    soft = gumbel_soft(logits, config.tau, gen)
    z = sampling_logits(soft, score)
    probs = softmax(z)
    mask, _ = bernoulli_sample_exact_k(probs, k, gen, layer)
    bits = mask.bits.astype(np.float64)
    log_prob = tsum(mul(log_softmax(z), Tensor(bits)))
    st = straight_through(bits, probs) if config.straight_through else Tensor(bits)
    return GateOutput(logits, soft, probs, mask, log_prob, st)


def select_gate(batch, layer_feats: np.ndarray, constraint: float, score, params: GateParams,
                config: GateConfig, gen: np.random.Generator | None) -> GateOutput:
    """Full gate for one layer. Passing `gen=None` gives the noise-free deployment sample."""
    k = max(config.k_min, retained_count(constraint, params.width))
    logits = gate_logits(batch_repr(batch, params), layer_feats, params)
    return sample_from_logits(logits, score, k, config, gen, params.layer)
