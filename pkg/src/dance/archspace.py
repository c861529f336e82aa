"""Maskable dense SuperNet, weight-inheriting SubNet extraction and cost accounting."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import DimensionError, Parameter, Tensor, activation, dense_affine, mul, no_grad


class InsufficientBatchError(ValueError):
    pass


@dataclass(frozen=True)
class SuperNetConfig:
    input_dim: int
    num_classes: int
    num_layers: int = 3
    width: int = 64
    widths: tuple[int, ...] | None = None
    activation: str = "relu"

    def __post_init__(self):
        if self.num_layers < 1 or self.width < 2 or self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need num_layers >= 1, width >= 2, input_dim >= 1, num_classes >= 2")
        if self.widths is not None:
            if len(self.widths) != self.num_layers or min(self.widths) < 2:
                raise ValueError("widths must list one width >= 2 per hidden layer")

    def layer_widths(self) -> list[int]:
        return list(self.widths) if self.widths is not None else [self.width] * self.num_layers


@dataclass
class LayerMask:
    layer: int
    bits: np.ndarray
    k: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 1:
            raise DimensionError(f"mask bits must be a vector, got shape {self.bits.shape}")
        if not 1 <= self.k <= self.bits.size:
            raise ValueError(f"retained count {self.k} outside [1, {self.bits.size}]")
        if int(self.bits.sum()) != self.k or np.any(self.bits > 1):
            raise ValueError(f"mask for layer {self.layer} has {int(self.bits.sum())} bits set, expected {self.k}")

    @classmethod
    def from_indices(cls, layer: int, width: int, idx) -> "LayerMask":
        bits = np.zeros(width, dtype=np.uint8)
        bits[np.asarray(idx, dtype=np.int64)] = 1
        return cls(layer, bits, int(bits.sum()))

    @classmethod
    def full(cls, layer: int, width: int) -> "LayerMask":
        return cls(layer, np.ones(width, dtype=np.uint8), width)

    @property
    def width(self) -> int:
        return int(self.bits.size)

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def to_hex(self) -> str:
        """Bit i of the mask is bit i of the integer (least significant first)."""
        value = 0
        for i in np.flatnonzero(self.bits):
            value |= 1 << int(i)
        return format(value, "0{}x".format((self.width + 3) // 4))

    @classmethod
    def from_hex(cls, layer: int, width: int, text: str) -> "LayerMask":
        value = int(text, 16)
        if value >> width:
            raise ValueError(f"hex mask {text!r} has bits beyond width {width}")
        bits = np.array([(value >> i) & 1 for i in range(width)], dtype=np.uint8)
        return cls(layer, bits, int(bits.sum()))


def retained_count(fraction: float, width: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"constraint {fraction} outside (0, 1]")
    return max(1, int(math.floor(fraction * width + 0.5)))


@dataclass(frozen=True)
class ResourceConstraint:
    fractions: tuple[float, ...]

    def __post_init__(self):
        for c in self.fractions:
            if not 0.0 < c <= 1.0:
                raise ValueError(f"constraint {c} outside (0, 1]")

    @classmethod
    def uniform(cls, fraction: float, num_layers: int) -> "ResourceConstraint":
        return cls((float(fraction),) * num_layers)

    def counts(self, widths: Sequence[int]) -> list[int]:
        if len(widths) != len(self.fractions):
            raise DimensionError(f"{len(self.fractions)} constraints for {len(widths)} layers")
        return [retained_count(c, w) for c, w in zip(self.fractions, widths)]


class SuperNet:
    def __init__(self, config: SuperNetConfig, rng: np.random.Generator):
        self.config = config
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        fan_in = config.input_dim
        for l, w in enumerate(config.layer_widths()):
            std = math.sqrt(2.0 / fan_in)
            self.weights.append(Parameter(rng.normal(0.0, std, size=(fan_in, w)), f"net.w{l}"))
            self.biases.append(Parameter(np.zeros(w), f"net.b{l}"))
            fan_in = w
        std = math.sqrt(1.0 / fan_in)
        self.head_w = Parameter(rng.normal(0.0, std, size=(fan_in, config.num_classes)), "net.head_w")
        self.head_b = Parameter(np.zeros(config.num_classes), "net.head_b")

    @property
    def widths(self) -> list[int]:
        return self.config.layer_widths()

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.head_w, self.head_b]

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def forward(self, x, masks=None):
        """Masks may be None, bit vectors, or Tensors (straight-through masks)."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        acts = []
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = activation(dense_affine(h, w, b), self.config.activation)
            m = None if masks is None else masks[l]
            if m is not None:
                h = mul(h, m if isinstance(m, Tensor) else Tensor(m))
            acts.append(h)
        return dense_affine(h, self.head_w, self.head_b), acts


def _check_masks(widths: Sequence[int], masks: Sequence[LayerMask]) -> None:
    if len(masks) != len(widths):
        raise DimensionError(f"expected {len(widths)} masks, got {len(masks)}")
    for l, (m, w) in enumerate(zip(masks, widths)):
        if m.width != w:
            raise DimensionError(f"mask {l} has length {m.width}, layer width is {w}")


def forward_masked(net: SuperNet, masks: Sequence[LayerMask], batch) -> tuple[Tensor, list[Tensor]]:
    """Logits and the per-layer masked post-activation features."""
    _check_masks(net.widths, masks)
    return net.forward(batch, [m.bits.astype(np.float64) for m in masks])


@dataclass
class SubNet:
    weights: list[Parameter]
    biases: list[Parameter]
    head_w: Parameter
    head_b: Parameter
    masks: list[LayerMask]
    provenance: dict = field(default_factory=dict)
    activation: str = "relu"

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.head_w, self.head_b]

    def forward(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for w, b in zip(self.weights, self.biases):
            h = activation(dense_affine(h, w, b), self.activation)
        return dense_affine(h, self.head_w, self.head_b)


def extract_subnet(net: SuperNet, masks: Sequence[LayerMask], provenance: dict | None = None) -> SubNet:
    _check_masks(net.widths, masks)
    prev = np.arange(net.config.input_dim)
    weights, biases = [], []
    for l, m in enumerate(masks):
        idx = m.indices()
        weights.append(Parameter(net.weights[l].data[np.ix_(prev, idx)], f"sub.w{l}"))
        biases.append(Parameter(net.biases[l].data[idx], f"sub.b{l}"))
        prev = idx
    prov = {"supernet_checksum": net.checksum()}
    prov.update(provenance or {})
    return SubNet(weights, biases,
                  Parameter(net.head_w.data[prev, :], "sub.head_w"),
                  Parameter(net.head_b.data, "sub.head_b"),
                  [LayerMask(m.layer, m.bits.copy(), m.k) for m in masks], prov, net.config.activation)


def _retained(net_or_subnet, masks) -> tuple[list[int], int, int]:
    if isinstance(net_or_subnet, SubNet):
        ks = [w.shape[1] for w in net_or_subnet.weights]
        return ks, net_or_subnet.weights[0].shape[0], net_or_subnet.head_w.shape[1]
    cfg = net_or_subnet.config
    if masks is None:
        ks = cfg.layer_widths()
    else:
        _check_masks(cfg.layer_widths(), masks)
        ks = [m.k for m in masks]
    return ks, cfg.input_dim, cfg.num_classes


def layer_param_counts(net_or_subnet, masks=None) -> list[tuple[int, int]]:
    """(weights, biases) retained per dense layer, head last."""
    ks, k_in, n_out = _retained(net_or_subnet, masks)
    out = []
    for k in ks:
        out.append((k_in * k, k))
        k_in = k
    out.append((k_in * n_out, n_out))
    return out


def count_params(net_or_subnet, masks=None) -> int:
    return sum(w + b for w, b in layer_param_counts(net_or_subnet, masks))


def layer_flops(net_or_subnet, masks=None) -> list[int]:
    ks, k_in, n_out = _retained(net_or_subnet, masks)
    out = []
    for k in list(ks) + [n_out]:
        out.append(2 * k_in * k)
        k_in = k
    return out


def count_flops(net_or_subnet, masks=None) -> int:
    """Multiply-add pairs counted as two FLOPs; bias adds and activations are not counted."""
    return sum(layer_flops(net_or_subnet, masks))


def layer_features(activations) -> np.ndarray:
    """Per-dimension [mean, std, mean |a|, fraction > 0] over the batch, shape (W, 4)."""
    a = activations.data if isinstance(activations, Tensor) else np.asarray(activations, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise InsufficientBatchError(f"layer features need a batch of at least 2 rows, got shape {a.shape}")
    return np.stack([a.mean(axis=0), a.std(axis=0), np.abs(a).mean(axis=0), (a > 0).mean(axis=0)], axis=1)


def full_activations(net: SuperNet, batch) -> list[np.ndarray]:
    with no_grad():
        _, acts = net.forward(batch)
    return [a.data for a in acts]
