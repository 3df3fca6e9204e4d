"""Synthetic multi-task benchmarks with controllable relatedness, and dataset I/O.

Every example carries a latent vector ``z ~ N(0, I_k)``.  Tokens are drawn
i.i.d. from ``softmax(E z)`` over the non-reserved vocabulary, so bag-of-token
statistics encode ``z``.  A task labels ``z`` with class directions
``w_c = sqrt(rho) * bank_c + sqrt(1 - rho) * private_c``: ``rho = 1`` gives every
task the bank's rules, ``rho = 0`` gives each task its own rules, orthogonal
to the bank (and to other tasks' private rules while the latent space has room).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .backbone import CLS_ID, N_RESERVED
from .checkpoint import atomic_write_text
from .errors import DataError

SPLITS = ("train", "validation", "test")

Example = tuple[list[int], "int | float"]


@dataclass
class TaskSpec:
    name: str
    kind: str = "classification"  # or "regression"
    n_classes: int = 2
    main_metric: str = "accuracy"
    n_train: int = 192
    n_val: int = 128
    n_test: int = 256
    overlap: float = 0.7

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "regression":
            self.n_classes = 1
            if self.main_metric != "pearson":
                raise ValueError("regression tasks use the pearson metric")
        elif self.main_metric == "pearson":
            raise ValueError("pearson is only valid for regression tasks")
        elif self.n_classes < 2:
            raise ValueError("classification needs at least two classes")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap must lie in [0, 1], got {self.overlap}")
        if min(self.n_train, self.n_val, self.n_test) < 8:
            raise ValueError("split sizes must be at least 8")

    @property
    def is_regression(self) -> bool:
        return self.kind == "regression"

    @property
    def head_dim(self) -> int:
        return 1 if self.is_regression else self.n_classes


@dataclass
class Dataset:
    train: list[Example] = field(default_factory=list)
    validation: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)
    few_shot: bool = False

    def split(self, name: str) -> list[Example]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return all(_split_key(self.split(s)) == _split_key(other.split(s)) for s in SPLITS)


def _split_key(split):
    return [(list(map(int, t)), y) for t, y in split]


@dataclass
class BenchmarkSpec:
    tasks: list[TaskSpec]
    latent_dim: int = 8
    vocab_size: int = 64
    seq_len: int = 24
    label_noise: float = 0.0
    emission_scale: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")
        if self.seq_len < 2 or self.vocab_size <= N_RESERVED:
            raise ValueError("need seq_len >= 2 and a non-reserved vocabulary")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError("task names must be unique")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @classmethod
    def default(cls, overlap: float = 0.7, low_resource_train: int = 64) -> "BenchmarkSpec":
        """Four classification tasks, one regression task, one low-resource classification task."""
        tasks = [
            TaskSpec("topic", n_classes=3, main_metric="accuracy", overlap=overlap),
            TaskSpec("polarity", n_classes=2, main_metric="accuracy", overlap=overlap),
            TaskSpec("acceptability", n_classes=2, main_metric="matthews", overlap=overlap),
            TaskSpec("paraphrase", n_classes=2, main_metric="f1_macro", overlap=overlap),
            TaskSpec("similarity", kind="regression", main_metric="pearson", overlap=overlap),
            TaskSpec("entailment_low", n_classes=2, main_metric="accuracy",
                     n_train=low_resource_train, overlap=overlap),
        ]
        return cls(tasks)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        d = dict(d)
        d["tasks"] = [TaskSpec(**t) for t in d["tasks"]]
        return cls(**d)


def _orthonormal_rows(rng: np.random.Generator, n: int, dim: int, against: np.ndarray) -> np.ndarray:
    """``n`` unit rows, each orthogonalised against ``against`` and earlier rows when room remains."""
    rows = []
    basis = [r for r in against]
    for _ in range(n):
        v = rng.normal(size=dim)
        if len(basis) < dim:
            for b in basis:
                v = v - (v @ b) * b
        v = v / np.linalg.norm(v)
        rows.append(v)
        if len(basis) < dim:
            basis.append(v)
    return np.array(rows)


def task_rules(spec: BenchmarkSpec, seed: int) -> dict[str, np.ndarray]:
    """Class-direction matrix ``[C, k]`` per task (``[1, k]`` for regression)."""
    rng = np.random.default_rng([seed, 0xB0])
    k = spec.latent_dim
    c_max = max(t.head_dim for t in spec.tasks)
    bank = _orthonormal_rows(rng, c_max, k, np.zeros((0, k)))
    used = list(bank)
    rules = {}
    for task in spec.tasks:
        private = _orthonormal_rows(rng, task.head_dim, k, np.array(used) if used else np.zeros((0, k)))
        used.extend(private)
        rho = task.overlap
        rules[task.name] = np.sqrt(rho) * bank[: task.head_dim] + np.sqrt(1.0 - rho) * private
    return rules


def emission_matrix(spec: BenchmarkSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xE0])
    return rng.normal(0.0, spec.emission_scale, size=(spec.vocab_size - N_RESERVED, spec.latent_dim))


def sample_tokens(z: np.ndarray, emission: np.ndarray, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    logits = z @ emission.T
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((z.shape[0], seq_len - 1))
    draws = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2) + N_RESERVED
    return np.concatenate([np.full((z.shape[0], 1), CLS_ID), draws], axis=1)


def _label(task: TaskSpec, rule: np.ndarray, z: np.ndarray, noise: float, rng) -> list:
    scores = z @ rule.T
    if task.is_regression:
        y = scores[:, 0] + rng.normal(0.0, 0.1, size=len(z))
        return [float(v) for v in y]
    y = scores.argmax(axis=1)
    if noise > 0:
        flip = rng.random(len(z)) < noise
        shift = rng.integers(1, task.n_classes, size=len(z))
        y = np.where(flip, (y + shift) % task.n_classes, y)
    return [int(v) for v in y]


def generate_benchmark(spec: BenchmarkSpec, seed: int) -> dict[str, tuple[TaskSpec, Dataset]]:
    """Deterministic datasets for every task in ``spec``."""
    rules = task_rules(spec, seed)
    emission = emission_matrix(spec, seed)
    out = {}
    for ti, task in enumerate(spec.tasks):
        splits = {}
        sizes = {"train": task.n_train, "validation": task.n_val, "test": task.n_test}
        for si, split in enumerate(SPLITS):
            rng = np.random.default_rng([seed, ti, si, 0xDA])
            z = rng.normal(size=(sizes[split], spec.latent_dim))
            tokens = sample_tokens(z, emission, spec.seq_len, rng)
            labels = _label(task, rules[task.name], z, spec.label_noise, rng)
            splits[split] = [(row.tolist(), y) for row, y in zip(tokens, labels)]
        out[task.name] = (task, Dataset(**splits))
    return out


# ----------------------------------------------------------------------
# I/O
# ----------------------------------------------------------------------

def _record_line(tokens, label) -> str:
    return json.dumps({"tokens": [int(t) for t in tokens], "label": label}, separators=(",", ":"))


def save_jsonl(records: Iterable[Example], path) -> None:
    lines = [_record_line(t, y) for t, y in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def load_jsonl(path) -> list[Example]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                tokens = obj["tokens"]
                label = obj["label"]
                if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
                    raise TypeError("tokens must be a list of integers")
                if not isinstance(label, (int, float)) or isinstance(label, bool):
                    raise TypeError("label must be a number")
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
            records.append((tokens, label))
    return records


def save_dataset(dataset: Dataset, directory, name: str) -> dict[str, str]:
    directory = Path(directory)
    paths = {}
    for split in SPLITS:
        path = directory / f"{name}.{split}.jsonl"
        save_jsonl(dataset.split(split), path)
        paths[split] = path.name
    return paths


def load_dataset(paths: dict[str, str], root=".") -> Dataset:
    root = Path(root)
    return Dataset(**{split: load_jsonl(root / paths[split]) for split in SPLITS})


def validate_dataset(dataset: Dataset, vocab_size: int, max_len: int | None = None) -> None:
    """Reject out-of-vocabulary tokens or over-long sequences, naming split and index."""
    for split in SPLITS:
        for i, (tokens, _) in enumerate(dataset.split(split)):
            if not tokens:
                raise DataError(f"{split}[{i}]: empty token sequence")
            if max(tokens) >= vocab_size or min(tokens) < 0:
                bad = max(tokens) if max(tokens) >= vocab_size else min(tokens)
                raise DataError(f"{split}[{i}]: token {bad} outside vocabulary of size {vocab_size}")
            if max_len is not None and len(tokens) > max_len:
                raise DataError(f"{split}[{i}]: length {len(tokens)} exceeds max_seq_len {max_len}")


def write_benchmark(benchmark: dict[str, tuple[TaskSpec, Dataset]], directory,
                    spec: BenchmarkSpec | None = None, seed: int | None = None) -> Path:
    """Write every task's splits plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tasks = []
    for name, (task, data) in benchmark.items():
        paths = save_dataset(data, directory, name)
        tasks.append({**asdict(task), "splits": paths})
    manifest = {"tasks": tasks, "seed": seed, "spec": spec.to_dict() if spec else None}
    if spec is not None:
        manifest["vocab_size"] = spec.vocab_size
    path = directory / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_benchmark(manifest_path) -> dict[str, tuple[TaskSpec, Dataset]]:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        from .errors import CheckpointError

        raise CheckpointError(f"benchmark manifest not found: {manifest_path}") from None
    out = {}
    for entry in manifest["tasks"]:
        entry = dict(entry)
        paths = entry.pop("splits")
        task = TaskSpec(**entry)
        out[task.name] = (task, load_dataset(paths, manifest_path.parent))
    return out


def corpus(benchmark: dict[str, tuple[TaskSpec, Dataset]], split: str = "train") -> list[list[int]]:
    """All token sequences of one split across tasks, in task order."""
    return [tokens for _, data in benchmark.values() for tokens, _ in data.split(split)]


def bag_of_tokens(seqs, vocab_size: int) -> np.ndarray:
    counts = np.zeros((len(seqs), vocab_size))
    for i, s in enumerate(seqs):
        np.add.at(counts[i], np.asarray(s), 1.0)
    return counts
