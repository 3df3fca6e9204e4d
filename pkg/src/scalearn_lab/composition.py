"""Transfer layers that combine frozen source-adapter outputs.

Four scaling variants (vector or scalar coefficients, per layer or shared
across layers), the attention-based fusion layer, and the mean/softmax
constrained scaling used for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapter import StackedAdapters
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError
from .tensor import Tensor


class Variant(str, Enum):
    SCALEARN = "scalearn"                  # vector per (layer, source)
    SCALEARN_UNIFORM = "scalearn_uniform"  # scalar per (layer, source)
    SCALEARN_PP = "scalearn_pp"            # vector per source, shared by all layers
    SCALEARN_UNIFORM_PP = "scalearn_uniform_pp"  # scalar per source, shared

    @property
    def uniform(self) -> bool:
        return self in (Variant.SCALEARN_UNIFORM, Variant.SCALEARN_UNIFORM_PP)

    @property
    def shared(self) -> bool:
        return self in (Variant.SCALEARN_PP, Variant.SCALEARN_UNIFORM_PP)

    @property
    def label(self) -> str:
        return {
            Variant.SCALEARN: "ScaLearn",
            Variant.SCALEARN_UNIFORM: "ScaLearnUniform",
            Variant.SCALEARN_PP: "ScaLearn++",
            Variant.SCALEARN_UNIFORM_PP: "ScaLearnUniform++",
        }[self]


@dataclass
class ScalingParams:
    """Scaling coefficients for one target task.

    ``omega`` holds one tensor per layer (per-layer variants) or a single
    tensor (shared variants); each is ``[S, d]`` for vector variants and
    ``[S]`` for scalar variants, indexed by ``source_order``.
    """

    variant: Variant
    source_order: list[str]
    omega: list[Tensor]
    n_layers: int
    meta: dict = field(default_factory=dict)

    def weight(self, layer: int) -> Tensor:
        if layer < 0 or layer >= self.n_layers:
            raise IndexError(f"layer {layer} out of range for {self.n_layers} layers")
        return self.omega[0] if self.variant.shared else self.omega[layer]

    def parameters(self) -> list[Tensor]:
        return list(self.omega)

    def set_trainable(self, flag: bool) -> "ScalingParams":
        for w in self.omega:
            w.requires_grad = flag
            w.grad = None
        return self

    def n_weights(self) -> int:
        return sum(w.size for w in self.omega)

    def named_tensors(self, target: str) -> dict[str, Tensor]:
        base = f"transfer/{target}/{self.variant.value}"
        if self.variant.shared:
            return {f"{base}/shared": self.omega[0]}
        return {f"{base}/layer{l}": w for l, w in enumerate(self.omega)}

    def save(self, directory, target: str) -> None:
        meta = {
            "kind": "scaling",
            "target": target,
            "variant": self.variant.value,
            "source_order": self.source_order,
            "n_layers": self.n_layers,
            **self.meta,
        }
        save_checkpoint(directory, self.named_tensors(target), meta)

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict) -> "ScalingParams":
        variant = Variant(meta["variant"])
        base = f"transfer/{meta['target']}/{variant.value}"
        if variant.shared:
            omega = [Tensor._wrap(arrays[f"{base}/shared"])]
        else:
            omega = [Tensor._wrap(arrays[f"{base}/layer{l}"]) for l in range(meta["n_layers"])]
        extra = {k: v for k, v in meta.items()
                 if k not in ("kind", "target", "variant", "source_order", "n_layers")}
        return cls(variant, list(meta["source_order"]), omega, int(meta["n_layers"]), extra)

    @classmethod
    def load(cls, directory) -> "ScalingParams":
        arrays, meta = load_checkpoint(directory)
        if meta.get("kind") != "scaling":
            raise CheckpointError(f"{directory} is not a scaling checkpoint")
        return cls.from_arrays(arrays, meta)


def init_scaling(
    variant: Variant | str,
    d: int,
    n_layers: int,
    source_order: Sequence[str],
    seed: int = 0,
    mean: float | None = None,
    std: float = 0.001,
) -> ScalingParams:
    """Coefficients drawn from ``N(mean, std^2)``; ``mean`` defaults to ``2 / |S|``."""
    variant = Variant(variant)
    S = len(source_order)
    if S == 0:
        raise ValueError("need at least one source task")
    mean = 2.0 / S if mean is None else mean
    rng = np.random.default_rng([seed, 0x5C])
    shape = (S,) if variant.uniform else (S, d)
    count = 1 if variant.shared else n_layers
    omega = [Tensor(rng.normal(mean, std, size=shape), requires_grad=True) for _ in range(count)]
    return ScalingParams(variant, list(source_order), omega, n_layers)


def fixed_scaling(values: Sequence[float], source_order: Sequence[str], n_layers: int) -> ScalingParams:
    """Non-trainable shared scalars, used by the probing sweeps."""
    w = Tensor(np.asarray(values, dtype=np.float64))
    return ScalingParams(Variant.SCALEARN_UNIFORM_PP, list(source_order), [w], n_layers, {"fixed": True})


def _stacked(outputs) -> Tensor:
    if isinstance(outputs, Tensor):
        return outputs
    return T.stack(list(outputs), axis=0)


def _broadcast_weight(w: Tensor, ndim: int) -> Tensor:
    """Reshape ``[S]`` or ``[S, d]`` weights to broadcast against ``[S, ..., d]``."""
    S = w.shape[0]
    if w.ndim == 1:
        return w.reshape((S,) + (1,) * (ndim - 1))
    return w.reshape((S,) + (1,) * (ndim - 2) + (w.shape[1],))


def _weighted_sum(stacked: Tensor, w: Tensor) -> Tensor:
    return (stacked * _broadcast_weight(w, stacked.ndim)).sum(axis=0)


def combine_scalearn(outputs, params: ScalingParams, layer: int) -> Tensor:
    """``sum_s w_s * o_s`` with the variant's coefficients for ``layer``."""
    stacked = _stacked(outputs)
    S = len(params.source_order)
    if stacked.shape[0] != S:
        raise ValueError(f"expected {S} source outputs, got {stacked.shape[0]}")
    return _weighted_sum(stacked, params.weight(layer))


def effective_weights(params: ScalingParams, mode: str, layer: int) -> Tensor:
    """Constrained coefficients that sum to one over sources at every coordinate."""
    if params.variant is not Variant.SCALEARN:
        raise ValueError(f"constrained mode {mode!r} is only defined for the scalearn variant")
    w = params.weight(layer)
    if mode == "softmax":
        return T.softmax(w, axis=0)
    if mode == "mean":
        denom = w.sum(axis=0, keepdims=True)
        if (np.abs(denom.data) < 1e-12).any():
            raise ZeroDivisionError("mean constraint: coefficients sum to zero at some coordinate")
        return w / denom
    raise ValueError(f"unsupported constraint mode {mode!r}")


def combine_constrained(outputs, params: ScalingParams, mode: str, layer: int) -> Tensor:
    stacked = _stacked(outputs)
    if stacked.shape[0] != len(params.source_order):
        raise ValueError(f"expected {len(params.source_order)} source outputs, got {stacked.shape[0]}")
    return _weighted_sum(stacked, effective_weights(params, mode, layer))


# ----------------------------------------------------------------------
# Attention fusion
# ----------------------------------------------------------------------

FUSION_PARTS = ("Q", "K", "V", "bQ", "bK", "bV")


@dataclass
class FusionParams:
    source_order: list[str]
    layers: list[dict[str, Tensor]]
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Tensor]:
        return [layer[k] for layer in self.layers for k in FUSION_PARTS]

    def set_trainable(self, flag: bool) -> "FusionParams":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self

    def named_tensors(self, target: str) -> dict[str, Tensor]:
        return {
            f"transfer/{target}/fusion/layer{l}/{k}": layer[k]
            for l, layer in enumerate(self.layers)
            for k in FUSION_PARTS
        }

    def save(self, directory, target: str) -> None:
        meta = {"kind": "fusion", "target": target, "variant": "fusion",
                "source_order": self.source_order, "n_layers": self.n_layers, **self.meta}
        save_checkpoint(directory, self.named_tensors(target), meta)

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict) -> "FusionParams":
        base = f"transfer/{meta['target']}/fusion"
        layers = [
            {k: Tensor._wrap(arrays[f"{base}/layer{l}/{k}"]) for k in FUSION_PARTS}
            for l in range(meta["n_layers"])
        ]
        extra = {k: v for k, v in meta.items()
                 if k not in ("kind", "target", "variant", "source_order", "n_layers")}
        return cls(list(meta["source_order"]), layers, extra)


def init_fusion(d: int, n_layers: int, source_order: Sequence[str], seed: int = 0) -> FusionParams:
    """Q, K ~ N(0, 0.02^2); V = identity + N(0, 1e-4^2); zero biases."""
    rng = np.random.default_rng([seed, 0xF5])
    layers = []
    for _ in range(n_layers):
        layers.append({
            "Q": Tensor(rng.normal(0.0, 0.02, size=(d, d)), requires_grad=True),
            "K": Tensor(rng.normal(0.0, 0.02, size=(d, d)), requires_grad=True),
            "V": Tensor(np.eye(d) + rng.normal(0.0, 1e-4, size=(d, d)), requires_grad=True),
            "bQ": Tensor(np.zeros(d), requires_grad=True),
            "bK": Tensor(np.zeros(d), requires_grad=True),
            "bV": Tensor(np.zeros(d), requires_grad=True),
        })
    return FusionParams(list(source_order), layers)


def _fusion_parts(x: Tensor, outputs, params: FusionParams, layer: int) -> tuple[Tensor, Tensor]:
    stacked = _stacked(outputs)
    if stacked.shape[0] != len(params.source_order):
        raise ValueError(f"expected {len(params.source_order)} source outputs, got {stacked.shape[0]}")
    if layer >= params.n_layers:
        raise IndexError(f"layer {layer} out of range for {params.n_layers} layers")
    p = params.layers[layer]
    d = x.shape[-1]
    q = T.linear(x, p["Q"], p["bQ"])
    keys = T.linear(stacked, p["K"], p["bK"])
    values = T.linear(stacked, p["V"], p["bV"])
    scores = T.scale((keys * q).sum(axis=-1), 1.0 / math.sqrt(d))
    return T.softmax(scores, axis=0), values


def fusion_weights(x: Tensor, outputs, params: FusionParams, layer: int) -> Tensor:
    """Attention distribution over sources, shape ``[S, ...]``."""
    return _fusion_parts(x, outputs, params, layer)[0]


def combine_fusion(x: Tensor, outputs, params: FusionParams, layer: int) -> Tensor:
    """Softmax-weighted sum of value-projected source outputs, queried by ``x``."""
    w, values = _fusion_parts(x, outputs, params, layer)
    return (values * w.reshape(w.shape + (1,))).sum(axis=0)


# ----------------------------------------------------------------------
# Plumbing into the backbone
# ----------------------------------------------------------------------

class TransferPlugin:
    """Backbone plugin: run every source adapter on ``x`` and combine the outputs.

    ``mode`` is ``None`` for plain scaling, ``"mean"``/``"softmax"`` for the
    constrained ablations; fusion parameters select attention fusion.
    ``dropout_p`` is applied to each source output before combining, in
    train mode only.
    """

    def __init__(self, sources: StackedAdapters, params, mode: str | None = None,
                 dropout_p: float = 0.0):
        self.sources = sources
        self.params = params
        self.mode = mode
        self.dropout_p = dropout_p
        self.train = False
        self.rng: np.random.Generator | None = None

    def source_outputs(self, x: Tensor, layer: int) -> Tensor:
        outs = self.sources(x, layer)
        return T.dropout(outs, self.dropout_p, self.rng, self.train)

    def __call__(self, layer: int, x: Tensor) -> Tensor:
        outs = self.source_outputs(x, layer)
        if isinstance(self.params, FusionParams):
            return combine_fusion(x, outs, self.params, layer)
        if self.mode is not None:
            return combine_constrained(outs, self.params, self.mode, layer)
        return combine_scalearn(outs, self.params, layer)


# ----------------------------------------------------------------------
# Verification utility
# ----------------------------------------------------------------------

def restrict_equivalence(params: ScalingParams, outputs_per_layer: Sequence) -> dict[str, float | None]:
    """Compare a vector per-layer model against its algebraic restrictions.

    If every vector is constant the combine must match the scalar per-layer
    variant; if the vectors do not depend on the layer it must match the
    shared vector variant.  Returns the max absolute difference over all
    layers for each applicable restriction (``None`` when not applicable).
    """
    if params.variant is not Variant.SCALEARN:
        raise ValueError("restrict_equivalence needs scalearn (vector, per-layer) parameters")
    L = params.n_layers
    result: dict[str, float | None] = {"uniform": None, "shared": None}
    ws = [params.weight(l).data for l in range(L)]
    if all(np.all(w == w[:, :1]) for w in ws):
        uni = ScalingParams(Variant.SCALEARN_UNIFORM, params.source_order,
                            [Tensor._wrap(w[:, 0].copy()) for w in ws], L)
        result["uniform"] = max(
            float(np.abs(combine_scalearn(outputs_per_layer[l], params, l).data
                         - combine_scalearn(outputs_per_layer[l], uni, l).data).max())
            for l in range(L)
        )
    if all(np.array_equal(w, ws[0]) for w in ws):
        shared = ScalingParams(Variant.SCALEARN_PP, params.source_order,
                               [Tensor._wrap(ws[0].copy())], L)
        result["shared"] = max(
            float(np.abs(combine_scalearn(outputs_per_layer[l], params, l).data
                         - combine_scalearn(outputs_per_layer[l], shared, l).data).max())
            for l in range(L)
        )
    return result
