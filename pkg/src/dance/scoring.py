"""Per-layer component importance: static, dynamic, feature and correlation terms."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import Parameter, Tensor, add, mul, sigmoid, tsum
from .diffcore.rng import gumbel

MODES = ("default", "static", "dynamic", "feature", "corr")


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScoreWeights:
    static: float = 0.25
    dynamic: float = 0.25
    feature: float = 0.25
    corr: float = 0.25
    noise: float = 0.1
    corr_strength: float = 0.5
    alpha: float = 0.1

    def __post_init__(self):
        for name in ("static", "dynamic", "feature", "corr", "noise", "corr_strength"):
            if getattr(self, name) < 0:
                raise ValueError(f"score weight {name} must be non-negative")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([self.static, self.dynamic, self.feature, self.corr])

    def only(self, mode: str) -> "ScoreWeights":
        """Keep one combination weight and zero the other three ('default' keeps all)."""
        if mode not in MODES:
            raise ValueError(f"unknown ablation mode {mode!r}")
        if mode == "default":
            if not np.any(self.lambdas > 0):
                raise ValueError("all four score weights are zero")
            return self
        kept = {m: (getattr(self, m) if m == mode else 0.0) for m in MODES[1:]}
        if kept[mode] <= 0:
            raise ValueError(f"weight for {mode!r} is zero, nothing left to score with")
        return replace(self, **kept)


@dataclass
class ImportanceState:
    layer: int
    theta: Parameter
    fusion_w: Parameter
    fusion_b: Parameter
    dynamic: np.ndarray
    feature: np.ndarray
    buffer: deque = field(default_factory=lambda: deque(maxlen=4))
    t: int = 0
    errors: int = 0
    last_dynamic_change: float = 0.0
    last_feature_change: float = 0.0
    _corr: tuple | None = field(default=None, repr=False, compare=False)

    @classmethod
    def create(cls, layer: int, width: int, rng: np.random.Generator, buffer_batches: int = 4) -> "ImportanceState":
        return cls(
            layer=layer,
            theta=Parameter(rng.normal(0.0, 0.01, size=width), f"score{layer}.theta"),
            fusion_w=Parameter(np.zeros(4), f"score{layer}.fusion_w"),
            fusion_b=Parameter(np.zeros(width), f"score{layer}.fusion_b"),
            dynamic=np.full(width, 0.5),
            feature=np.full(width, 1.0 / width),
            buffer=deque(maxlen=buffer_batches),
        )

    @property
    def width(self) -> int:
        return self.theta.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.theta, self.fusion_w, self.fusion_b]

    def push_activations(self, acts) -> None:
        a = acts.data if isinstance(acts, Tensor) else np.asarray(acts, dtype=np.float64)
        self.buffer.append(np.array(a, dtype=np.float64, copy=True))


@dataclass
class ScoreVector:
    layer: int
    values: np.ndarray
    static: np.ndarray
    dynamic: np.ndarray
    feature: np.ndarray
    corr: np.ndarray

    def breakdown(self) -> dict[str, list[float]]:
        return {k: getattr(self, k).tolist() for k in ("static", "dynamic", "feature", "corr")}


def ema(prev: np.ndarray, target: np.ndarray, alpha: float) -> np.ndarray:
    return (1.0 - alpha) * prev + alpha * target


def static_importance(state: ImportanceState) -> Tensor:
    return sigmoid(state.theta)


def fuse(state: ImportanceState, layer_feats: np.ndarray) -> Tensor:
    """Linear map from the (W, 4) layer summary to one value per dimension."""
    f = Tensor(np.nan_to_num(layer_feats, nan=0.0, posinf=0.0, neginf=0.0))
    return add(tsum(mul(f, state.fusion_w), axis=1), state.fusion_b)


def dynamic_target(state: ImportanceState, fused: Tensor, weights: ScoreWeights,
                   gen: np.random.Generator | None, batch_size: int) -> Tensor:
    """E_B[sigmoid(fused + theta + noise_scale * eps)], one noise draw per batch row."""
    w = state.width
    base = add(fused, state.theta)
    if weights.noise > 0 and gen is not None:
        eps = gumbel(gen, (batch_size, w))
        g = sigmoid(add(base, Tensor(weights.noise * eps)))
        return tsum(g, axis=0) * (1.0 / batch_size)
    return sigmoid(base)


def dynamic_preview(state: ImportanceState, fused: Tensor, weights: ScoreWeights,
                    gen: np.random.Generator | None, batch_size: int) -> Tensor:
    """Differentiable next value of the dynamic EMA (state is not modified)."""
    target = dynamic_target(state, fused, weights, gen, batch_size)
    return add(Tensor((1.0 - weights.alpha) * state.dynamic), target * weights.alpha)


def commit_dynamic(state: ImportanceState, new_value) -> bool:
    v = new_value.data if isinstance(new_value, Tensor) else np.asarray(new_value, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        state.errors += 1
        return False
    state.last_dynamic_change = float(np.abs(v - state.dynamic).sum())
    state.dynamic = np.array(v, copy=True)
    return True


def dynamic_importance_update(state: ImportanceState, fused, weights: ScoreWeights,
                              gen: np.random.Generator | None, batch_size: int = 1) -> np.ndarray:
    fused = fused if isinstance(fused, Tensor) else Tensor(fused)
    if not np.all(np.isfinite(fused.data)):
        state.errors += 1
        return state.dynamic
    commit_dynamic(state, dynamic_preview(state, fused.detach(), weights, gen, batch_size).data)
    return state.dynamic


def feature_importance_update(state: ImportanceState, features, weights: ScoreWeights) -> np.ndarray:
    f = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError(f"feature batch must be (B, W) with B >= 1, got {f.shape}")
    m = f.mean(axis=0)
    e = np.exp(m - m.max())
    s = e / e.sum()
    new = ema(state.feature, s, weights.alpha)
    new /= new.sum()
    state.last_feature_change = float(np.abs(new - state.feature).sum())
    state.feature = new
    state.t += 1
    return state.feature


def correlation_matrix(state: ImportanceState) -> np.ndarray:
    if not state.buffer:
        raise StateError("activation buffer is empty: run a forward pass and push activations first")
    key = tuple(id(a) for a in state.buffer)
    if state._corr is None or state._corr[0] != key:
        state._corr = (key, pearson(np.concatenate(list(state.buffer), axis=0)))
    return state._corr[1].copy()


def pearson(a: np.ndarray) -> np.ndarray:
    """Column correlation; zero-variance columns are uncorrelated with everything."""
    if a.shape[0] < 2:
        raise StateError(f"correlation needs at least 2 buffered rows, got {a.shape[0]}")
    c = a - a.mean(axis=0)
    norm = np.sqrt((c * c).sum(axis=0))
    live = norm > 1e-12 * max(1.0, float(np.abs(a).max()))
    z = np.zeros_like(c)
    z[:, live] = c[:, live] / norm[live]
    r = z.T @ z
    return np.clip(r, -1.0, 1.0)


def mean_abs_offdiag(r: np.ndarray) -> np.ndarray:
    w = r.shape[0]
    if w < 2:
        return np.zeros(w)
    a = np.abs(r)
    return (a.sum(axis=1) - np.diag(a)) / (w - 1)


def correlation_penalty(state: ImportanceState, weights: ScoreWeights) -> np.ndarray:
    return 1.0 - weights.corr_strength * mean_abs_offdiag(correlation_matrix(state))


def mean_abs_correlation(state: ImportanceState) -> float:
    """Scalar E|R| over off-diagonal pairs (the per-dimension penalty's mean)."""
    return float(mean_abs_offdiag(correlation_matrix(state)).mean())


def combined_score(state: ImportanceState, weights: ScoreWeights) -> ScoreVector:
    static = sigmoid(Tensor(state.theta.data)).data
    dynamic = state.dynamic.copy()
    feature = state.feature.copy()
    corr = correlation_penalty(state, weights)
    values = weights.static * static + weights.dynamic * dynamic + weights.feature * feature + weights.corr * corr
    return ScoreVector(state.layer, values, static, dynamic, feature, corr)


def score_tensor(state: ImportanceState, weights: ScoreWeights, dynamic: Tensor | None = None) -> Tensor:
    """Combined score as a graph node: the static term (and a dynamic preview, if given) carry gradients."""
    const = weights.feature * state.feature + weights.corr * correlation_penalty(state, weights)
    dyn = dynamic if dynamic is not None else Tensor(state.dynamic)
    return add(add(static_importance(state) * weights.static, dyn * weights.dynamic), Tensor(const))
