"""A small pre-norm transformer encoder used as the frozen backbone.

Each layer computes ``h = x + attn(ln1(x))`` followed by the feed-forward block
``f = ffn(ln2(h))``.  A plugin, when given, replaces ``f`` before the residual
add, so the layer output is ``h + plugin(l, f)``.  Adapters and transfer layers
live in that slot.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, DataError
from .tensor import Tape, Tensor

CLS_ID = 0
MASK_ID = 1
N_RESERVED = 2

LayerPlugin = Callable[[int, Tensor], Tensor]

@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 2
    ffn_dim: int = 128
    max_seq_len: int = 32
    dropout_p: float = 0.0

    def __post_init__(self):
        for key in ("vocab_size", "d_model", "n_layers", "n_heads", "ffn_dim", "max_seq_len"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.vocab_size <= N_RESERVED:
            raise ConfigError(f"vocab_size must exceed the {N_RESERVED} reserved ids")


@dataclass
class WarmupSpec:
    """Masked-token pre-training run applied before the backbone is frozen."""

    corpus: Sequence[Sequence[int]]
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 32
    mask_prob: float = 0.15
    seed: int = 0


@dataclass
class BackboneParams:
    config: BackboneConfig
    tensors: dict[str, Tensor]
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def freeze(self) -> "BackboneParams":
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def encoder_tensors(self) -> dict[str, Tensor]:
        """Parameters used by ``encoder_forward`` (the warmup output bias excluded)."""
        return {k: v for k, v in self.tensors.items() if k != "mlm_bias"}

    def snapshot(self) -> bytes:
        return b"".join(self.tensors[k].data.tobytes() for k in sorted(self.tensors))

    def save(self, directory) -> None:
        arrays = {f"backbone/{k}": v for k, v in self.tensors.items()}
        save_checkpoint(directory, arrays, {"kind": "backbone", "config": asdict(self.config), **self.meta})

    @classmethod
    def load(cls, directory) -> "BackboneParams":
        arrays, meta = load_checkpoint(directory)
        if meta.get("kind") != "backbone":
            raise CheckpointError(f"{directory} is not a backbone checkpoint")
        config = BackboneConfig(**meta["config"])
        tensors = {k.split("/", 1)[1]: Tensor._wrap(v) for k, v in arrays.items()}
        extra = {k: v for k, v in meta.items() if k not in ("kind", "config")}
        return cls(config, tensors, frozen=True, meta=extra)


def _init_tensors(config: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, f = config.d_model, config.ffn_dim

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape))

    tensors = {
        "tok_emb": normal(config.vocab_size, d),
        "pos_emb": normal(config.max_seq_len, d),
    }
    for l in range(config.n_layers):
        p = f"layer{l}/"
        tensors.update({
            p + "ln1_g": Tensor(np.ones(d)), p + "ln1_b": Tensor(np.zeros(d)),
            p + "Wq": normal(d, d), p + "bq": Tensor(np.zeros(d)),
            p + "Wk": normal(d, d), p + "bk": Tensor(np.zeros(d)),
            p + "Wv": normal(d, d), p + "bv": Tensor(np.zeros(d)),
            p + "Wo": normal(d, d), p + "bo": Tensor(np.zeros(d)),
            p + "ln2_g": Tensor(np.ones(d)), p + "ln2_b": Tensor(np.zeros(d)),
            p + "W1": normal(d, f), p + "b1": Tensor(np.zeros(f)),
            p + "W2": normal(f, d), p + "b2": Tensor(np.zeros(d)),
        })
    tensors["lnf_g"] = Tensor(np.ones(d))
    tensors["lnf_b"] = Tensor(np.zeros(d))
    tensors["mlm_bias"] = Tensor(np.zeros(config.vocab_size))
    return tensors


def pad_tokens(seqs, max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences; returns ``(ids [B, T], valid-mask [B, T])``."""
    if isinstance(seqs, np.ndarray) and seqs.ndim == 2:
        return seqs.astype(np.int64, copy=False), np.ones(seqs.shape, dtype=bool)
    lengths = [len(s) for s in seqs]
    if not lengths or min(lengths) == 0:
        raise DataError("cannot encode an empty sequence")
    width = max(lengths)
    if max_len is not None and width > max_len:
        raise DataError(f"sequence length {width} exceeds max_seq_len {max_len}")
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def _attention(x: Tensor, bb: BackboneParams, l: int, key_bias: np.ndarray | None) -> Tensor:
    cfg = bb.config
    B, L, d = x.shape
    H = cfg.n_heads
    dh = d // H
    p = f"layer{l}/"
    t = bb.tensors

    def heads(z: Tensor) -> Tensor:
        return z.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

    q = heads(T.linear(x, t[p + "Wq"], t[p + "bq"]))
    k = heads(T.linear(x, t[p + "Wk"], t[p + "bk"]))
    v = heads(T.linear(x, t[p + "Wv"], t[p + "bv"]))
    scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
    if key_bias is not None:
        scores = scores + key_bias
    ctx = T.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, L, d)
    return T.linear(ctx, t[p + "Wo"], t[p + "bo"])


def _prepare(tokens, backbone: BackboneParams, mask: np.ndarray | None):
    cfg = backbone.config
    single = len(tokens) > 0 and np.ndim(tokens[0]) == 0
    if mask is None:
        ids, mask = pad_tokens([tokens] if single else tokens, cfg.max_seq_len)
    else:
        ids = np.asarray(tokens, dtype=np.int64)
    if ids.shape[1] > cfg.max_seq_len:
        raise DataError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    key_bias = None
    if not mask.all():
        dtype = backbone.tensors["tok_emb"].dtype
        key_bias = np.where(mask, 0.0, -1e9).astype(dtype)[:, None, None, :]
    return single, ids, key_bias


def _layer_pre(x: Tensor, backbone: BackboneParams, l: int, key_bias, drop: float, rng, train: bool):
    """Attention sublayer and feed-forward block of layer ``l``: returns ``(h, f)``."""
    t = backbone.tensors
    p = f"layer{l}/"
    a = _attention(T.layer_norm(x, t[p + "ln1_g"], t[p + "ln1_b"]), backbone, l, key_bias)
    h = x + T.dropout(a, drop, rng, train)
    z = T.layer_norm(h, t[p + "ln2_g"], t[p + "ln2_b"])
    f = T.linear(T.relu(T.linear(z, t[p + "W1"], t[p + "b1"])), t[p + "W2"], t[p + "b2"])
    return h, T.dropout(f, drop, rng, train)


def encode_prefix(tokens, backbone: BackboneParams, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Layer-0 ``(h, f)`` arrays, which no plugin can influence; reusable via ``prefix=``."""
    _, ids, key_bias = _prepare(tokens, backbone, mask)
    x = T.embedding(ids, backbone.tensors["tok_emb"]) + backbone.tensors["pos_emb"][: ids.shape[1]]
    h, f = _layer_pre(x, backbone, 0, key_bias, 0.0, None, False)
    return h.data, f.data


def encoder_forward(
    tokens,
    backbone: BackboneParams,
    plugin: LayerPlugin | None = None,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
    prefix: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Tensor, Tensor]:
    """Encode token ids; returns ``(hidden, pooled)``.

    ``tokens`` is either one sequence (giving ``hidden [T, d]`` and
    ``pooled [d]``) or a batch of sequences / a 2-D id array (giving
    ``[B, T, d]`` and ``[B, d]``).  Shorter sequences in a batch are padded
    and masked out of attention; a pre-padded id array may come with its
    validity ``mask``.  ``prefix`` supplies precomputed layer-0 activations
    from :func:`encode_prefix` (frozen backbone, no backbone dropout).
    """
    cfg = backbone.config
    single, ids, key_bias = _prepare(tokens, backbone, mask)
    t = backbone.tensors
    drop = cfg.dropout_p if train else 0.0
    if prefix is not None and drop > 0:
        raise ValueError("cached layer-0 activations cannot be combined with backbone dropout")

    if prefix is None:
        x = T.embedding(ids, t["tok_emb"]) + t["pos_emb"][: ids.shape[1]]
    for l in range(cfg.n_layers):
        if l == 0 and prefix is not None:
            h, f = Tensor._wrap(prefix[0]), Tensor._wrap(prefix[1])
        else:
            h, f = _layer_pre(x, backbone, l, key_bias, drop, rng, train)
        if plugin is not None:
            f = plugin(l, f)
        x = h + f
    hidden = T.layer_norm(x, t["lnf_g"], t["lnf_b"])
    pooled = pool_first(hidden)
    if not np.isfinite(pooled.data).all():
        raise T.NonFiniteError("non-finite encoder output")
    if single:
        return hidden[0], pooled[0]
    return hidden, pooled


def pool_first(hidden: Tensor) -> Tensor:
    """Representation at position 0 (the reserved leading token)."""
    if hidden.ndim < 2 or hidden.shape[-2] == 0:
        raise DataError("pool_first needs a non-empty sequence")
    return hidden[..., 0, :]


def _mask_batch(seqs, mask_prob: float, rng: np.random.Generator):
    ids, valid = pad_tokens(seqs)
    candidates = valid.copy()
    candidates[:, 0] = False
    chosen = candidates & (rng.random(ids.shape) < mask_prob)
    for i in np.flatnonzero(~chosen.any(axis=1)):
        pos = np.flatnonzero(candidates[i])
        if pos.size:
            chosen[i, rng.choice(pos)] = True
    masked = ids.copy()
    masked[chosen] = MASK_ID
    return masked, ids, chosen


def masked_token_loss(
    backbone: BackboneParams, masked: np.ndarray, targets: np.ndarray, chosen: np.ndarray
) -> tuple[Tensor, np.ndarray]:
    """Cross-entropy of the tied-embedding output at masked positions, plus predictions."""
    hidden, _ = encoder_forward(masked, backbone)
    d = backbone.config.d_model
    flat = hidden.reshape(-1, d)[np.flatnonzero(chosen.reshape(-1))]
    logits = flat @ backbone.tensors["tok_emb"].T + backbone.tensors["mlm_bias"]
    labels = targets[chosen]
    return T.cross_entropy_loss(logits, labels), logits.data.argmax(axis=1) == labels


def masked_token_accuracy(backbone: BackboneParams, corpus, seed: int = 1, mask_prob: float = 0.15) -> float:
    rng = np.random.default_rng(seed)
    hits = []
    for start in range(0, len(corpus), 64):
        masked, targets, chosen = _mask_batch(corpus[start : start + 64], mask_prob, rng)
        _, ok = masked_token_loss(backbone, masked, targets, chosen)
        hits.append(ok)
    return float(np.concatenate(hits).mean())


def _check_corpus(corpus, vocab_size: int) -> None:
    for i, seq in enumerate(corpus):
        if len(seq) == 0:
            raise DataError(f"warmup corpus sequence {i} is empty")
        top = max(seq)
        if top >= vocab_size or min(seq) < 0:
            raise DataError(f"warmup corpus sequence {i} has token {top} outside vocab_size {vocab_size}")


def init_backbone(config: BackboneConfig, seed: int, warmup: WarmupSpec | None = None) -> BackboneParams:
    """Seeded initialisation, optional masked-token warmup, then freeze."""
    from .training import AdamWState, adamw_step  # local import: training depends on this module

    rng = np.random.default_rng([seed, 0xBB])
    backbone = BackboneParams(config, _init_tensors(config, rng))
    if warmup is not None and warmup.steps > 0:
        _check_corpus(warmup.corpus, config.vocab_size)
        corpus = list(warmup.corpus)
        wrng = np.random.default_rng([warmup.seed, seed, 0x3A])
        params = list(backbone.tensors.values())
        for p in params:
            p.requires_grad = True
        state = AdamWState()
        losses = []
        for step in range(warmup.steps):
            idx = wrng.choice(len(corpus), size=min(warmup.batch_size, len(corpus)), replace=False)
            masked, targets, chosen = _mask_batch([corpus[i] for i in idx], warmup.mask_prob, wrng)
            for p in params:
                p.grad = None
            with Tape() as tape:
                loss, _ = masked_token_loss(backbone, masked, targets, chosen)
            tape.backward(loss)
            lr_t = warmup.lr * (1.0 - step / warmup.steps)
            adamw_step(params, state, lr_t, weight_decay=0.01)
            losses.append(float(loss.data))
        backbone.meta["warmup"] = {
            "steps": warmup.steps,
            "lr": warmup.lr,
            "first_loss": losses[0],
            "last_loss": losses[-1],
        }
    return backbone.freeze()
