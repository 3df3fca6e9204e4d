"""Two-stage training: source adapters (stage 1), transfer layers (stage 2), probes.

All runs share one loop (:func:`fit`): seeded per-epoch shuffling, AdamW with
linear learning-rate decay and no warmup, early stopping on validation loss
(or on the main metric in the few-shot regime), and restoration of the best
checkpoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapter import AdapterParams, LiveAdapters, StackedAdapters, adapter_forward, init_adapter
from .backbone import BackboneConfig, BackboneParams, encode_prefix, encoder_forward, init_backbone, pad_tokens
from .composition import (
    FusionParams,
    ScalingParams,
    TransferPlugin,
    Variant,
    fixed_scaling,
    init_fusion,
    init_scaling,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, DataError
from .metrics import compute_metric
from .tensor import NonFiniteError, Tape, Tensor
from .taskgen import Dataset, TaskSpec, validate_dataset

LEARNING_RATES = {
    "adapter": 3e-4,
    "scalearn": 6e-3,
    "fusion": 5e-5,
    "soup": 3e-4,
    "probe": 3e-4,
}
TRANSFER_DROPOUT = 0.3
FEW_SHOT_MAX_STEPS = 1000
FEW_SHOT_PATIENCE = 20
FEW_SHOT_VAL_CAP = 5000


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    max_epochs: int = 30
    patience: int = 5
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.99)
    epsilon: float = 1e-6
    transfer_dropout: float = TRANSFER_DROPOUT
    max_steps: int | None = None
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        self.betas = tuple(self.betas)


# ----------------------------------------------------------------------
# Optimiser
# ----------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Sequence[Tensor],
    state: AdamWState,
    lr_t: float,
    *,
    betas: tuple[float, float] = (0.9, 0.99),
    eps: float = 1e-6,
    weight_decay: float = 0.01,
) -> None:
    """One decoupled-weight-decay Adam update using each parameter's ``grad``.

    Moments are keyed by position in ``params``, so pass the same list every step.
    Parameters without a gradient are skipped.
    """
    if lr_t < 0:
        raise ValueError("learning rate must be non-negative")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or i} at step {state.step}")
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            p.data *= 1.0 - lr_t * weight_decay
        p.data -= (lr_t / c1) * m / (np.sqrt(v / c2) + eps)


# ----------------------------------------------------------------------
# Heads and forward pipelines
# ----------------------------------------------------------------------

@dataclass
class TaskHead:
    W: Tensor
    b: Tensor

    def __call__(self, pooled: Tensor) -> Tensor:
        return T.linear(pooled, self.W, self.b)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/W": self.W, f"{prefix}/b": self.b}

    def save(self, directory, meta: dict | None = None) -> None:
        save_checkpoint(directory, self.named_tensors("head"), {"kind": "head", **(meta or {})})

    @classmethod
    def load(cls, directory) -> "TaskHead":
        arrays, meta = load_checkpoint(directory)
        if meta.get("kind") != "head":
            raise CheckpointError(f"{directory} is not a head checkpoint")
        return cls(Tensor._wrap(arrays["head/W"]), Tensor._wrap(arrays["head/b"]))


def init_head(d: int, n_out: int, seed: int = 0) -> TaskHead:
    rng = np.random.default_rng([seed, 0x4E])
    return TaskHead(
        Tensor(rng.normal(0.0, 0.02, size=(d, n_out)), requires_grad=True, name="head.W"),
        Tensor(np.zeros(n_out), requires_grad=True, name="head.b"),
    )


class AdapterPlugin:
    def __init__(self, adapter: AdapterParams):
        self.adapter = adapter
        self.train = False
        self.rng = None

    def __call__(self, layer: int, x: Tensor) -> Tensor:
        return adapter_forward(x, self.adapter, layer)


@dataclass
class EncodedSplit:
    """A split as padded id/mask/label arrays plus cached layer-0 activations."""

    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    prefix: tuple[np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def rows(self, idx):
        prefix = None if self.prefix is None else (self.prefix[0][idx], self.prefix[1][idx])
        return self.ids[idx], self.mask[idx], self.labels[idx], prefix


def encode_split(split, task: TaskSpec, backbone: BackboneParams | None = None,
                 chunk: int = 256) -> EncodedSplit:
    if not split:
        raise DataError("empty split")
    ids, mask = pad_tokens([tokens for tokens, _ in split])
    dtype = np.float64 if task.is_regression else np.int64
    labels = np.array([y for _, y in split], dtype=dtype)
    prefix = None
    if backbone is not None and backbone.frozen and backbone.config.dropout_p == 0.0:
        parts = [encode_prefix(ids[s : s + chunk], backbone, mask[s : s + chunk])
                 for s in range(0, len(ids), chunk)]
        prefix = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    return EncodedSplit(ids, mask, labels, prefix)


@dataclass
class Pipeline:
    """Backbone, optional plugin and task head for one task."""

    backbone: BackboneParams
    plugin: object | None
    head: TaskHead
    task: TaskSpec

    def forward(self, ids: np.ndarray, mask: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None, prefix=None) -> Tensor:
        if self.plugin is not None and hasattr(self.plugin, "train"):
            self.plugin.train = train
            self.plugin.rng = rng
        _, pooled = encoder_forward(ids, self.backbone, self.plugin, train=train, rng=rng,
                                    mask=mask, prefix=prefix)
        return self.head(pooled)

    def loss(self, out: Tensor, labels: np.ndarray) -> Tensor:
        if self.task.is_regression:
            return T.mse_loss(out, labels.astype(out.dtype))
        return T.cross_entropy_loss(out, labels)

    def encode(self, split) -> EncodedSplit:
        return split if isinstance(split, EncodedSplit) else encode_split(split, self.task, self.backbone)

    def predict(self, split, batch_size: int = 256) -> tuple[np.ndarray, float]:
        """Predictions (class ids or real values) and mean loss over ``split``."""
        enc = self.encode(split)
        preds, total = [], 0.0
        for start in range(0, len(enc), batch_size):
            ids, mask, labels, prefix = enc.rows(slice(start, start + batch_size))
            out = self.forward(ids, mask, prefix=prefix)
            total += float(self.loss(out, labels).data) * len(labels)
            preds.append(out.data[:, 0] if self.task.is_regression else out.data.argmax(axis=1))
        return np.concatenate(preds), total / len(enc)

    def evaluate(self, split, batch_size: int = 256) -> dict[str, float]:
        enc = self.encode(split)
        preds, loss = self.predict(enc, batch_size)
        metric = compute_metric(self.task.main_metric, preds, enc.labels, self.task.n_classes)
        return {"loss": loss, "metric": metric}


# ----------------------------------------------------------------------
# Generic loop
# ----------------------------------------------------------------------

@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    steps: int


def fit(pipeline: Pipeline, data: Dataset, trainable: Sequence[Tensor], cfg: TrainConfig) -> FitResult:
    """Train ``trainable`` on ``data.train``; restores the best validation checkpoint."""
    task = pipeline.task
    if not data.train:
        raise DataError(f"task {task.name!r} has an empty training split")
    validate_dataset(data, pipeline.backbone.config.vocab_size, pipeline.backbone.config.max_seq_len)
    few_shot = data.few_shot
    val_split = data.validation[:FEW_SHOT_VAL_CAP] if few_shot else data.validation
    patience = FEW_SHOT_PATIENCE if few_shot else cfg.patience

    train_enc = encode_split(data.train, task, pipeline.backbone)
    val_enc = encode_split(val_split, task, pipeline.backbone)
    n = len(train_enc)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    if few_shot:
        total_steps = cfg.max_steps or FEW_SHOT_MAX_STEPS
        max_epochs = math.ceil(total_steps / steps_per_epoch)
    else:
        max_epochs = cfg.max_epochs
        total_steps = max_epochs * steps_per_epoch
        if cfg.max_steps is not None:
            total_steps = min(total_steps, cfg.max_steps)

    params = list(trainable)
    for p in params:
        p.requires_grad = True
        p.grad = None
    shuffle_rng = np.random.default_rng([cfg.seed, 0x5F])
    drop_rng = np.random.default_rng([cfg.seed, 0xD0])
    state = AdamWState()

    def validation() -> tuple[float, float]:
        ev = pipeline.evaluate(val_enc, cfg.eval_batch_size)
        return ev["loss"], ev["metric"]

    def score(val_loss: float, val_metric: float) -> float:
        return -val_metric if few_shot else val_loss

    val_loss, val_metric = validation()
    # epoch 0 train_loss is the loss of the first batch before any update
    history = [{"epoch": 0, "train_loss": None, "val_loss": val_loss,
                "val_metric": val_metric, "lr": cfg.learning_rate}]
    best = score(val_loss, val_metric)
    best_state = [p.data.copy() for p in params]
    best_epoch = 0
    bad = 0
    step = 0
    for epoch in range(1, max_epochs + 1):
        if step >= total_steps:
            break
        order = shuffle_rng.permutation(n)
        loss_sum, seen = 0.0, 0
        lr_t = cfg.learning_rate
        for start in range(0, n, cfg.batch_size):
            if step >= total_steps:
                break
            ids, mask, labels, prefix = train_enc.rows(order[start : start + cfg.batch_size])
            for p in params:
                p.grad = None
            with Tape() as tape:
                out = pipeline.forward(ids, mask, train=True, rng=drop_rng, prefix=prefix)
                loss = pipeline.loss(out, labels)
            if not params or loss._tape is None:
                raise ValueError("nothing to train: no trainable parameter reaches the loss")
            tape.backward(loss)
            if step == 0:
                history[0]["train_loss"] = float(loss.data)
            lr_t = cfg.learning_rate * (1.0 - step / total_steps)
            adamw_step(params, state, lr_t, betas=cfg.betas, eps=cfg.epsilon,
                       weight_decay=cfg.weight_decay)
            loss_sum += float(loss.data) * len(labels)
            seen += len(labels)
            step += 1
        val_loss, val_metric = validation()
        history.append({
            "epoch": epoch,
            "train_loss": loss_sum / max(seen, 1),
            "val_loss": val_loss,
            "val_metric": val_metric,
            "lr": lr_t,
        })
        current = score(val_loss, val_metric)
        if current < best:
            best = current
            best_state = [p.data.copy() for p in params]
            best_epoch = epoch
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                break
    for p, saved in zip(params, best_state):
        p.data = saved
        p.grad = None
        p.requires_grad = False
    return FitResult(history, best_epoch, step)


def history_jsonl(history: Sequence[dict]) -> str:
    return "".join(json.dumps(row, sort_keys=True) + "\n" for row in history)


def _require_frozen(backbone: BackboneParams) -> None:
    if not backbone.frozen:
        raise ValueError("backbone must be frozen before adapter or transfer training")


# ----------------------------------------------------------------------
# Stage 1
# ----------------------------------------------------------------------

def train_source_adapter(
    task: TaskSpec,
    data: Dataset,
    backbone: BackboneParams,
    cfg: TrainConfig,
    reduction: int = 16,
) -> tuple[AdapterParams, TaskHead, list[dict]]:
    """Train one adapter and its head on ``task``; the backbone stays frozen."""
    _require_frozen(backbone)
    d, L = backbone.config.d_model, backbone.config.n_layers
    adapter = init_adapter(d, L, reduction, task.name, seed=cfg.seed)
    head = init_head(d, task.head_dim, seed=cfg.seed)
    before = backbone.snapshot()
    pipeline = Pipeline(backbone, AdapterPlugin(adapter), head, task)
    result = fit(pipeline, data, adapter.parameters() + head.parameters(), cfg)
    if backbone.snapshot() != before:
        raise RuntimeError("backbone parameters changed during adapter training")
    adapter.meta.update({"seed": cfg.seed, "best_epoch": result.best_epoch, "few_shot": data.few_shot})
    return adapter, head, result.history


# ----------------------------------------------------------------------
# Stage 2
# ----------------------------------------------------------------------

CONSTRAINED = {"scalearn_mean": "mean", "scalearn_softmax": "softmax"}
TRANSFER_METHODS = tuple(v.value for v in Variant) + ("fusion",) + tuple(CONSTRAINED)


def build_transfer(method: str, sources: Sequence[AdapterParams], backbone: BackboneParams,
                   seed: int) -> tuple[ScalingParams | FusionParams, str | None]:
    d, L = backbone.config.d_model, backbone.config.n_layers
    order = [a.task_name for a in sources]
    if method == "fusion":
        return init_fusion(d, L, order, seed), None
    if method in CONSTRAINED:
        return init_scaling(Variant.SCALEARN, d, L, order, seed), CONSTRAINED[method]
    try:
        variant = Variant(method)
    except ValueError:
        raise ValueError(f"unknown transfer method {method!r}") from None
    return init_scaling(variant, d, L, order, seed), None


def transfer_dropout_for(method: str, cfg: TrainConfig) -> float:
    return cfg.transfer_dropout if method in (Variant.SCALEARN.value, Variant.SCALEARN_PP.value) else 0.0


def train_transfer(
    target: TaskSpec,
    data: Dataset,
    sources: Sequence[AdapterParams],
    method: str,
    backbone: BackboneParams,
    cfg: TrainConfig,
    params: ScalingParams | FusionParams | None = None,
    train_transfer_params: bool = True,
) -> tuple[ScalingParams | FusionParams, TaskHead, list[dict]]:
    """Learn transfer parameters and a fresh head over frozen source adapters.

    ``params`` may be supplied to start from (or, with
    ``train_transfer_params=False``, to hold fixed) a given state.
    """
    _require_frozen(backbone)
    if not sources:
        raise ValueError("train_transfer needs at least one source adapter")
    mode = CONSTRAINED.get(method)
    if params is None:
        params, mode = build_transfer(method, sources, backbone, cfg.seed)
    elif method == "fusion" and not isinstance(params, FusionParams):
        raise ValueError("fusion method needs FusionParams")
    elif method != "fusion" and not isinstance(params, ScalingParams):
        raise ValueError(f"method {method!r} needs ScalingParams")
    if params.source_order != [a.task_name for a in sources]:
        raise ValueError("parameter source order does not match the given adapters")
    for a in sources:
        a.set_trainable(False)

    head = init_head(backbone.config.d_model, target.head_dim, seed=cfg.seed)
    plugin = TransferPlugin(StackedAdapters(sources), params, mode, transfer_dropout_for(method, cfg))
    pipeline = Pipeline(backbone, plugin, head, target)
    trainable = (params.parameters() if train_transfer_params else []) + head.parameters()

    before = backbone.snapshot(), [a.snapshot() for a in sources]
    result = fit(pipeline, data, trainable, cfg)
    if (backbone.snapshot(), [a.snapshot() for a in sources]) != before:
        raise RuntimeError("frozen backbone or source adapters changed during transfer training")
    params.meta.update({"seed": cfg.seed, "best_epoch": result.best_epoch, "method": method})
    return params, head, result.history


def transfer_pipeline(target: TaskSpec, sources: Sequence[AdapterParams], params, head: TaskHead,
                      backbone: BackboneParams, method: str) -> Pipeline:
    mode = CONSTRAINED.get(method)
    return Pipeline(backbone, TransferPlugin(StackedAdapters(sources), params, mode), head, target)


def train_head_probe(
    target: TaskSpec,
    data: Dataset,
    sources: Sequence[AdapterParams],
    weights: Sequence[float],
    backbone: BackboneParams,
    cfg: TrainConfig,
) -> tuple[TaskHead, list[dict], Pipeline]:
    """Fixed shared scaling ``sum_s w_s * o_s`` in every layer; only a new head is trained."""
    order = [a.task_name for a in sources]
    params = fixed_scaling(weights, order, backbone.config.n_layers)
    head = init_head(backbone.config.d_model, target.head_dim, seed=cfg.seed)
    pipeline = Pipeline(backbone, TransferPlugin(StackedAdapters(sources), params), head, target)
    result = fit(pipeline, data, head.parameters(), cfg)
    return head, result.history, pipeline


def train_soup_head(
    target: TaskSpec, data: Dataset, merged: AdapterParams, backbone: BackboneParams, cfg: TrainConfig
) -> tuple[TaskHead, list[dict], Pipeline]:
    """Head-only training over a merged (soup) adapter."""
    merged.set_trainable(False)
    head = init_head(backbone.config.d_model, target.head_dim, seed=cfg.seed)
    pipeline = Pipeline(backbone, AdapterPlugin(merged), head, target)
    result = fit(pipeline, data, head.parameters(), cfg)
    return head, result.history, pipeline


# ----------------------------------------------------------------------
# Few-shot subsampling
# ----------------------------------------------------------------------

def few_shot_subsample(data: Dataset, k: int, seed: int, stratify: bool | None = None) -> Dataset:
    """Seeded ``k``-example training subset; validation capped; marks the few-shot regime.

    Sampling is label-stratified for classification when ``k`` is at least
    the number of classes.  ``k`` equal to the training size returns the
    split unchanged and does not switch regimes.
    """
    n = len(data.train)
    if k > n:
        raise DataError(f"k={k} exceeds the training split size {n}")
    if k < 1:
        raise DataError("k must be positive")
    if k == n:
        return Dataset(list(data.train), list(data.validation), list(data.test), few_shot=data.few_shot)
    rng = np.random.default_rng([seed, k, 0xF5])
    labels = [y for _, y in data.train]
    classes = sorted({y for y in labels}) if all(isinstance(y, int) for y in labels) else None
    if stratify is None:
        stratify = classes is not None and k >= len(classes)
    if stratify and classes:
        by_class = {c: [i for i, y in enumerate(labels) if y == c] for c in classes}
        base, extra = divmod(k, len(classes))
        bonus = set(rng.permutation(len(classes))[:extra].tolist())
        quota = {c: min(base + (ci in bonus), len(by_class[c])) for ci, c in enumerate(classes)}
        # classes too small for an even share pass the remainder on, one example at a time
        short = k - sum(quota.values())
        tiebreak = dict(zip(classes, rng.permutation(len(classes)).tolist()))
        while short:
            open_ = [c for c in classes if quota[c] < len(by_class[c])]
            quota[min(open_, key=lambda c: (quota[c], tiebreak[c]))] += 1
            short -= 1
        chosen = []
        for c in classes:
            chosen.extend(rng.choice(by_class[c], size=quota[c], replace=False).tolist())
        chosen.sort()
    else:
        chosen = np.sort(rng.choice(n, size=k, replace=False)).tolist()
    return Dataset(
        [data.train[i] for i in chosen],
        list(data.validation[:FEW_SHOT_VAL_CAP]),
        list(data.test),
        few_shot=True,
    )


def method_config(method: str, base: TrainConfig | None = None, **overrides) -> TrainConfig:
    """Default config for ``method`` with the learning rate from the method table."""
    base = base or TrainConfig()
    key = "scalearn" if method.startswith("scalearn") else method
    if key == "adapter_stl":
        key = "adapter"
    overrides.setdefault("learning_rate", LEARNING_RATES.get(key, base.learning_rate))
    return replace(base, **overrides)


# ----------------------------------------------------------------------
# Gradient verification of whole models
# ----------------------------------------------------------------------

# Key biases add the same score to every key (or every source), which softmax
# ignores; their exact gradient is zero, so a relative error is meaningless.
SHIFT_INVARIANT = ("bk", "bK")


def _shift_invariant(name: str) -> bool:
    return name.rsplit("/", 1)[-1] in SHIFT_INVARIANT


def _off_kink(rng: np.random.Generator, shape) -> np.ndarray:
    """ReLU biases of +-0.5: half the units on, half off, none within reach of the kink.

    A central difference straddling a ReLU kink is not a derivative estimate;
    with d/r bottleneck units one such unit would dominate the quotient.
    """
    return rng.choice([-0.5, 0.5], size=shape) + rng.normal(0.0, 0.02, size=shape)


def gradcheck_transfer(
    method: str,
    *,
    n_sources: int = 3,
    n_examples: int = 4,
    seq_len: int = 8,
    n_classes: int = 3,
    config: BackboneConfig | None = None,
    eps: float = 1e-4,
    max_coords: int | None = 6,
    seed: int = 0,
    attention_scale: float = 8.0,
) -> dict[str, float]:
    """Finite-difference check of backbone, source adapters, transfer layer, head and loss.

    Returns the worst relative error per component, plus ``"shift_invariant"``:
    the largest absolute analytic gradient on key biases, which should vanish.
    Dropout is off.  ``max_coords`` caps the scalars probed per tensor.
    The test point is chosen to be well conditioned: query/key weights are
    multiplied by ``attention_scale`` so attention is not uniform (otherwise
    their gradients sit at the finite-difference noise floor) and ReLU
    pre-activations are kept clear of zero.
    """
    config = config or BackboneConfig()
    rng = np.random.default_rng([seed, 0x6C])
    backbone = init_backbone(config, seed)
    d, L = config.d_model, config.n_layers
    for l in range(L):
        for part in ("Wq", "Wk"):
            backbone.tensors[f"layer{l}/{part}"].data *= attention_scale
        b1 = backbone.tensors[f"layer{l}/b1"]
        b1.data = _off_kink(rng, b1.shape).astype(b1.dtype)
    adapters = []
    for s in range(n_sources):
        a = init_adapter(d, L, 16, f"src{s}", seed=seed + s)
        for layer in a.layers:
            layer["bD"].data = _off_kink(rng, layer["bD"].shape).astype(layer["bD"].dtype)
            layer["bU"].data = rng.normal(0.0, 0.1, size=layer["bU"].shape).astype(layer["bU"].dtype)
        adapters.append(a)
    params, mode = build_transfer(method, adapters, backbone, seed)
    if isinstance(params, ScalingParams):
        for w in params.omega:  # break the near-constant initialisation
            w.data = w.data + rng.normal(0.0, 0.2, size=w.shape).astype(w.dtype)
    else:
        for layer in params.layers:
            layer["Q"].data *= attention_scale
            layer["K"].data *= attention_scale
    head = init_head(d, n_classes, seed)
    task = TaskSpec("gradcheck", n_classes=n_classes)
    plugin = TransferPlugin(LiveAdapters(adapters), params, mode, 0.0)
    pipeline = Pipeline(backbone, plugin, head, task)
    ids = rng.integers(2, config.vocab_size, size=(n_examples, seq_len))
    ids[:, 0] = 0
    mask = np.ones_like(ids, dtype=bool)
    mask[-1, seq_len // 2 :] = False
    labels = rng.integers(0, n_classes, size=n_examples)

    def loss_fn() -> Tensor:
        return pipeline.loss(pipeline.forward(ids, mask), labels)

    components = {
        "backbone": backbone.encoder_tensors(),
        "sources": {k: v for a in adapters for k, v in a.named_tensors().items()},
        "transfer": params.named_tensors("gradcheck"),
        "head": head.named_tensors("head"),
    }
    every = {k: v for named in components.values() for k, v in named.items()}
    saved = {k: v.data for k, v in every.items()}
    try:
        # the whole model runs in float64, not only the component under test
        for v in every.values():
            v.data = v.data.astype(np.float64)
        with T.precision(np.float64):
            result = {
                name: T.grad_check(loss_fn, {k: v for k, v in named.items() if not _shift_invariant(k)},
                                   eps=eps, max_coords=max_coords, seed=seed)
                for name, named in components.items()
            }
            invariant = {k: v for k, v in every.items() if _shift_invariant(k)}
            result["shift_invariant"] = _max_abs_grad(loss_fn, invariant)
    finally:
        for k, v in every.items():
            v.data = saved[k]
    return result


def _max_abs_grad(loss_fn, named: dict[str, Tensor]) -> float:
    if not named:
        return 0.0
    saved = {k: (p.data, p.requires_grad) for k, p in named.items()}
    try:
        with T.precision(np.float64):
            for p in named.values():
                p.data = p.data.astype(np.float64)
                p.requires_grad = True
                p.grad = None
            with Tape() as tape:
                loss = loss_fn()
            tape.backward(loss)
            return max(float(np.abs(p.grad).max()) if p.grad is not None else 0.0
                       for p in named.values())
    finally:
        for k, p in named.items():
            p.data, p.requires_grad = saved[k]
            p.grad = None
