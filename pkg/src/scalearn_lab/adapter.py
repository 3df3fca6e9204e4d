"""Bottleneck adapters (down-project, ReLU, up-project, residual) and AdapterSoup merging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, DataError
from .tensor import Tensor

log = logging.getLogger(__name__)

PARTS = ("D", "U", "bD", "bU")


@dataclass
class AdapterParams:
    """One adapter per backbone layer; ``layers[l]`` maps ``D/U/bD/bU`` to tensors.

    ``D`` is ``[d, d/r]`` and ``U`` is ``[d/r, d]``; inputs multiply from the left.
    """

    task_name: str
    reduction: int
    layers: list[dict[str, Tensor]]
    meta: dict = field(default_factory=dict)

    @property
    def d_model(self) -> int:
        return self.layers[0]["D"].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            f"adapter/{self.task_name}/layer{l}/{part}": layer[part]
            for l, layer in enumerate(self.layers)
            for part in PARTS
        }

    def parameters(self) -> list[Tensor]:
        return [layer[part] for layer in self.layers for part in PARTS]

    def set_trainable(self, flag: bool) -> "AdapterParams":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self

    def snapshot(self) -> bytes:
        return b"".join(p.data.tobytes() for p in self.parameters())

    def copy(self, task_name: str | None = None) -> "AdapterParams":
        layers = [{k: Tensor._wrap(v.data.copy()) for k, v in layer.items()} for layer in self.layers]
        return AdapterParams(task_name or self.task_name, self.reduction, layers, dict(self.meta))

    def save(self, directory) -> None:
        meta = {"kind": "adapter", "task": self.task_name, "reduction": self.reduction, **self.meta}
        save_checkpoint(directory, self.named_tensors(), meta)

    @classmethod
    def load(cls, directory) -> "AdapterParams":
        arrays, meta = load_checkpoint(directory)
        if meta.get("kind") != "adapter":
            raise CheckpointError(f"{directory} is not an adapter checkpoint")
        task = meta["task"]
        n_layers = len(arrays) // len(PARTS)
        layers = [
            {part: Tensor._wrap(arrays[f"adapter/{task}/layer{l}/{part}"]) for part in PARTS}
            for l in range(n_layers)
        ]
        extra = {k: v for k, v in meta.items() if k not in ("kind", "task", "reduction")}
        return cls(task, int(meta["reduction"]), layers, extra)


def init_adapter(
    d: int, n_layers: int, reduction: int = 16, task_name: str = "task", seed: int = 0
) -> AdapterParams:
    """Projections drawn from N(0, 0.02^2), biases zero."""
    if reduction < 1 or d % reduction:
        raise ConfigError(f"d={d} is not divisible by reduction factor r={reduction}")
    m = d // reduction
    rng = np.random.default_rng([seed, 0xAD])
    layers = [
        {
            "D": Tensor(rng.normal(0.0, 0.02, size=(d, m))),
            "U": Tensor(rng.normal(0.0, 0.02, size=(m, d))),
            "bD": Tensor(np.zeros(m)),
            "bU": Tensor(np.zeros(d)),
        }
        for _ in range(n_layers)
    ]
    return AdapterParams(task_name, reduction, layers)


def adapter_forward(x: Tensor, params: AdapterParams, layer: int) -> Tensor:
    """``U(ReLU(D x + bD)) + bU + x`` for the adapter at ``layer``."""
    if layer >= params.n_layers:
        raise IndexError(f"layer {layer} out of range for {params.n_layers}-layer adapter")
    p = params.layers[layer]
    if x.shape[-1] != p["D"].shape[0]:
        raise ValueError(f"adapter expects trailing dim {p['D'].shape[0]}, got shape {x.shape}")
    down = T.relu(T.linear(x, p["D"], p["bD"]))
    return T.linear(down, p["U"], p["bU"]) + x


class StackedAdapters:
    """Frozen adapters evaluated together: one batched matmul per projection.

    Produces the source outputs stacked on a new leading axis ``[S, ..., d]``.
    Parameters are treated as constants, so use :func:`adapter_forward` when
    the adapter itself is being trained.
    """

    def __init__(self, adapters: Sequence[AdapterParams]):
        if not adapters:
            raise ValueError("need at least one adapter")
        self.names = [a.task_name for a in adapters]
        self.n_layers = adapters[0].n_layers
        shapes = {a.task_name: (a.n_layers, a.layers[0]["D"].shape) for a in adapters}
        if len(set(shapes.values())) > 1:
            raise ValueError(f"source adapters differ in depth or bottleneck width: {shapes}")
        self.D, self.U, self.bD, self.bU = [], [], [], []
        for l in range(self.n_layers):
            self.D.append(np.stack([a.layers[l]["D"].data for a in adapters]))
            self.U.append(np.stack([a.layers[l]["U"].data for a in adapters]))
            self.bD.append(np.stack([a.layers[l]["bD"].data for a in adapters]))
            self.bU.append(np.stack([a.layers[l]["bU"].data for a in adapters]))

    def __len__(self) -> int:
        return len(self.names)

    def __call__(self, x: Tensor, layer: int) -> Tensor:
        S = len(self.names)
        lead = x.shape[:-1]
        d = x.shape[-1]
        flat = x.reshape(1, -1, d)
        bD = self.bD[layer][:, None, :]
        bU = self.bU[layer][:, None, :]
        down = T.relu(T.matmul(flat, Tensor._wrap(self.D[layer])) + bD)
        up = T.matmul(down, Tensor._wrap(self.U[layer])) + bU + flat
        return up.reshape((S, *lead, d))


class LiveAdapters:
    """Same interface as :class:`StackedAdapters`, but differentiable in the adapter weights."""

    def __init__(self, adapters: Sequence[AdapterParams]):
        if not adapters:
            raise ValueError("need at least one adapter")
        self.adapters = list(adapters)
        self.names = [a.task_name for a in adapters]

    def __len__(self) -> int:
        return len(self.adapters)

    def __call__(self, x: Tensor, layer: int) -> Tensor:
        return T.stack([adapter_forward(x, a, layer) for a in self.adapters])


def adapter_param_count(d: int, r: int, L: int) -> int:
    """Trainable scalars in an adapter stack, biases of both projections included."""
    if r < 1 or d % r:
        raise ConfigError(f"d={d} is not divisible by reduction factor r={r}")
    m = d // r
    return L * (d * m + m + m * d + d)


def adapter_soup_merge(
    adapters: Sequence[AdapterParams],
    weights: Sequence[float],
    task_name: str | None = None,
    meta: dict | None = None,
) -> AdapterParams:
    """Parameter-wise convex combination ``sum_i w_i * theta_i``.

    Weights that do not sum to one are renormalised; the event is logged and
    recorded under ``meta["warnings"]`` when ``meta`` is given.
    """
    if len(adapters) == 0 or len(adapters) != len(weights):
        raise ValueError("need one weight per adapter and at least one adapter")
    first = adapters[0]
    shapes = [[t.shape for t in a.parameters()] for a in adapters]
    if any(s != shapes[0] for s in shapes) or any(a.reduction != first.reduction for a in adapters):
        raise ValueError("adapters differ in shape (d, r or L) and cannot be merged")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any():
        raise ValueError("soup weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("soup weights sum to zero")
    if abs(total - 1.0) > 1e-6:
        msg = f"soup weights summed to {total:.6g}; renormalised"
        log.warning(msg)
        if meta is not None:
            meta.setdefault("warnings", []).append(msg)
        w = w / total
    if len(adapters) == 1 and w[0] == 1.0:
        return first.copy(task_name)

    layers = []
    for l in range(first.n_layers):
        merged = {}
        for part in PARTS:
            acc = np.zeros(first.layers[l][part].shape, dtype=np.float64)
            for wi, a in zip(w, adapters):
                acc += wi * a.layers[l][part].data
            merged[part] = Tensor._wrap(acc.astype(first.layers[l][part].dtype))
        layers.append(merged)
    return AdapterParams(task_name or "soup", first.reduction, layers, dict(meta or {}))


def similarity_weights(
    embeddings: Mapping[str, np.ndarray], target: str, top_k: int
) -> dict[str, float]:
    """Keep the ``top_k`` tasks by cosine similarity to ``target``; normalise to sum 1.

    Ties are broken by task name so the result is deterministic.
    """
    if target not in embeddings:
        raise KeyError(f"target {target!r} missing from candidates")
    if not 1 <= top_k <= len(embeddings):
        raise ValueError(f"top_k={top_k} must lie in [1, {len(embeddings)}]")
    t = np.asarray(embeddings[target], dtype=np.float64)
    sims = {}
    for name, e in embeddings.items():
        e = np.asarray(e, dtype=np.float64)
        denom = np.linalg.norm(t) * np.linalg.norm(e)
        sims[name] = float(t @ e / denom) if denom > 0 else 0.0
    ranked = sorted(sims, key=lambda n: (-sims[n], n))
    kept = ranked[:top_k]
    total = sum(sims[n] for n in kept)
    if total <= 0:
        raise ValueError("similarities of the kept tasks do not sum to a positive value")
    return {n: (sims[n] / total if n in kept else 0.0) for n in embeddings}


def task_embedding(seqs, backbone, n_samples: int = 512, seed: int = 0) -> np.ndarray:
    """Mean pooled frozen-backbone representation over up to ``n_samples`` sequences."""
    from .backbone import encoder_forward

    if len(seqs) == 0:
        raise DataError("cannot embed an empty dataset")
    rng = np.random.default_rng([seed, 0x51])
    idx = np.arange(len(seqs))
    if len(seqs) > n_samples:
        idx = np.sort(rng.choice(len(seqs), size=n_samples, replace=False))
    total = np.zeros(backbone.config.d_model, dtype=np.float64)
    for start in range(0, len(idx), 128):
        _, pooled = encoder_forward([seqs[i] for i in idx[start : start + 128]], backbone)
        total += pooled.data.astype(np.float64).sum(axis=0)
    return total / len(idx)


def task_similarity_weights(
    datasets: Mapping[str, object],
    target: str,
    top_k: int,
    backbone,
    n_samples: int = 512,
    seed: int = 0,
) -> dict[str, float]:
    """AdapterSoup task weights from frozen-backbone embeddings of each training split.

    ``datasets`` maps task name to a :class:`~scalearn_lab.taskgen.Dataset`
    (or any object with a ``train`` list of ``(tokens, label)`` pairs).
    """
    embs = {}
    for name, data in datasets.items():
        seqs = [tokens for tokens, _ in data.train]
        if not seqs:
            raise DataError(f"task {name!r} has an empty training split")
        embs[name] = task_embedding(seqs, backbone, n_samples, seed)
    return similarity_weights(embs, target, top_k)
