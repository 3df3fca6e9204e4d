"""Experiment harness: multi-seed runs, probing sweeps, coefficient export and few-shot grids.

Layout of an output directory::

    adapters/<task>/seed<s>/{adapter,head}/   stage-1 checkpoints
    transfer/<method>/<task>/seed<s>/         stage-2 checkpoints
    results.json  results.csv  run_meta.json

``results.json`` holds only values that are a function of the configuration,
so repeated runs reproduce it byte for byte; timings go to ``run_meta.json``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .accounting import adapter_report, report_for
from .adapter import AdapterParams, adapter_soup_merge, task_similarity_weights
from .backbone import BackboneConfig, BackboneParams, WarmupSpec, init_backbone
from .checkpoint import MANIFEST, atomic_write_text, load_checkpoint
from .composition import FusionParams, ScalingParams
from .errors import CheckpointError, ConfigError, DataError
from .taskgen import (
    BenchmarkSpec,
    Dataset,
    TaskSpec,
    corpus,
    generate_benchmark,
    read_benchmark,
    write_benchmark,
)
from .training import (
    TRANSFER_METHODS,
    AdapterPlugin,
    Pipeline,
    TaskHead,
    TrainConfig,
    few_shot_subsample,
    method_config,
    train_head_probe,
    train_soup_head,
    train_source_adapter,
    train_transfer,
    transfer_pipeline,
)

log = logging.getLogger(__name__)

METHODS = ("adapter_stl",) + TRANSFER_METHODS + ("soup",)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
FEW_SHOT_KS = (4, 16, 32, 100)
AVG = "Avg."

_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


def worker_count(requested: int | None = None) -> int:
    """Parallel workers: ``requested``, else ``SCALEARN_THREADS``, else the CPU count."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("SCALEARN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SCALEARN_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def parallel_map(fn: Callable, jobs: Sequence, workers: int) -> list:
    """Apply ``fn`` to every job; results come back in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    benchmark: str
    backbone: str
    methods: list[str] = field(default_factory=lambda: ["adapter_stl"])
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    targets: list[str] | None = None
    sources: list[str] | None = None
    output_dir: str = "runs"
    adapter_dir: str | None = None
    overrides: dict[str, dict] = field(default_factory=dict)
    reduction: int = 16
    soup_top_k: int = 5
    soup_samples: int = 512
    few_shot_ks: list[int] = field(default_factory=lambda: list(FEW_SHOT_KS))
    threads: int | None = None
    # used by prepare_inputs when the benchmark or backbone does not exist yet
    benchmark_seed: int = 0
    overlap: float = 0.7
    low_resource_train: int = 64
    backbone_seed: int = 0
    warmup_steps: int = 500

    def __post_init__(self):
        if isinstance(self.methods, str):
            self.methods = [self.methods]
        self.methods = list(self.methods)
        self.seeds = [int(s) for s in self.seeds]
        if not self.methods:
            raise ConfigError("no method given")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds contain duplicates")
        for m, table in self.overrides.items():
            if m not in METHODS and m != "probe":
                raise ConfigError(f"override table for unknown method {m!r}")
            unknown = set(table) - _TRAIN_FIELDS
            if unknown:
                raise ConfigError(f"unknown training option(s) for {m}: {', '.join(sorted(unknown))}")
        if any(k < 1 for k in self.few_shot_ks):
            raise ConfigError("few-shot k values must be positive")

    @property
    def adapter_root(self) -> Path:
        return Path(self.adapter_dir) if self.adapter_dir else Path(self.output_dir) / "adapters"

    def train_config(self, method: str, seed: int) -> TrainConfig:
        extra = dict(self.overrides.get(method, {}))
        extra.setdefault("seed", seed)
        try:
            return method_config(method, **extra)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad training options for {method}: {exc}") from None

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        raw = dict(raw)
        overrides = {k: dict(v) for k, v in raw.pop("overrides", {}).items()}
        method = raw.pop("method", None)
        if isinstance(method, dict):
            # [method] name = "...", plus options; or [method.<name>] option tables
            name = method.pop("name", None)
            scalar_opts = {k: v for k, v in method.items() if not isinstance(v, dict)}
            for k, v in method.items():
                if isinstance(v, dict):
                    overrides.setdefault(k, {}).update(v)
            if name is not None:
                raw.setdefault("methods", [name])
                overrides.setdefault(name, {}).update(scalar_opts)
            elif scalar_opts:
                raise ConfigError("[method] options need a name = \"...\" key")
        elif isinstance(method, str):
            raw.setdefault("methods", [method])
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        for key in ("benchmark", "backbone"):
            if key not in raw:
                raise ConfigError(f"config is missing {key!r}")
        if base_dir is not None:
            for key in ("benchmark", "backbone", "output_dir", "adapter_dir"):
                if raw.get(key) is not None and not Path(raw[key]).is_absolute():
                    raw[key] = str(base_dir / raw[key])
        return cls(overrides=overrides, **raw)

    @classmethod
    def from_toml(cls, path, **updates) -> "ExperimentConfig":
        import tomli

        path = Path(path)
        try:
            raw = tomli.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = cls.from_dict(raw, base_dir=path.parent)
        updates = {k: v for k, v in updates.items() if v is not None}
        return replace(cfg, **updates) if updates else cfg


def prepare_inputs(cfg: ExperimentConfig) -> None:
    """Create the benchmark and the warmed-up backbone if they are missing."""
    manifest = Path(cfg.benchmark)
    if not manifest.exists():
        spec = BenchmarkSpec.default(cfg.overlap, cfg.low_resource_train)
        bench = generate_benchmark(spec, cfg.benchmark_seed)
        written = write_benchmark(bench, manifest.parent, spec, cfg.benchmark_seed)
        if written != manifest:
            raise ConfigError(f"benchmark path must name a manifest.json file, got {manifest}")
        log.info("wrote benchmark to %s", manifest.parent)
    if not (Path(cfg.backbone) / MANIFEST).exists():
        bench = read_benchmark(manifest)
        vocab = json.loads(manifest.read_text(encoding="utf-8")).get("vocab_size")
        config = BackboneConfig(vocab_size=vocab or BackboneConfig().vocab_size)
        warmup = WarmupSpec(corpus(bench), steps=cfg.warmup_steps) if cfg.warmup_steps > 0 else None
        init_backbone(config, cfg.backbone_seed, warmup).save(cfg.backbone)
        log.info("wrote backbone to %s", cfg.backbone)


# ----------------------------------------------------------------------
# Shared state for a run
# ----------------------------------------------------------------------

@dataclass
class Context:
    cfg: ExperimentConfig
    benchmark: dict[str, tuple[TaskSpec, Dataset]]
    backbone: BackboneParams
    adapters: dict[tuple[str, int], tuple[AdapterParams, TaskHead]] = field(default_factory=dict)

    @classmethod
    def load(cls, cfg: ExperimentConfig) -> "Context":
        bench = read_benchmark(cfg.benchmark)
        backbone = BackboneParams.load(cfg.backbone)
        ctx = cls(cfg, bench, backbone)
        for name in (cfg.targets or []) + (cfg.sources or []):
            ctx.task(name)
        return ctx

    def bind(self, cfg: ExperimentConfig) -> "Context":
        """This context under another config; loaded adapters are shared when they live in the same place."""
        if cfg is self.cfg:
            return self
        for key in ("benchmark", "backbone"):
            if Path(getattr(cfg, key)) != Path(getattr(self.cfg, key)):
                raise ConfigError(f"context was loaded with a different {key}: {getattr(self.cfg, key)}")
        for name in (cfg.targets or []) + (cfg.sources or []):
            self.task(name)
        same_root = cfg.adapter_root == self.cfg.adapter_root
        return replace(self, cfg=cfg, adapters=self.adapters if same_root else {})

    def task(self, name: str) -> tuple[TaskSpec, Dataset]:
        try:
            return self.benchmark[name]
        except KeyError:
            raise ConfigError(f"task {name!r} is not in the benchmark") from None

    @property
    def targets(self) -> list[str]:
        return list(self.cfg.targets or self.benchmark)

    @property
    def sources(self) -> list[str]:
        return list(self.cfg.sources or self.benchmark)

    def adapter_dir(self, task: str, seed: int) -> Path:
        return self.cfg.adapter_root / task / f"seed{seed}"

    def train_adapter(self, task: str, seed: int) -> tuple[AdapterParams, TaskHead]:
        spec, data = self.task(task)
        cfg = self.cfg.train_config("adapter_stl", seed)
        adapter, head, history = train_source_adapter(spec, data, self.backbone, cfg, self.cfg.reduction)
        directory = self.adapter_dir(task, seed)
        adapter.save(directory / "adapter")
        head.save(directory / "head", {"task": task, "seed": seed})
        atomic_write_text(directory / "history.jsonl",
                          "".join(json.dumps(r, sort_keys=True) + "\n" for r in history))
        return adapter, head

    def load_adapter(self, task: str, seed: int) -> tuple[AdapterParams, TaskHead]:
        key = (task, seed)
        if key not in self.adapters:
            directory = self.adapter_dir(task, seed)
            try:
                self.adapters[key] = (AdapterParams.load(directory / "adapter"),
                                      TaskHead.load(directory / "head"))
            except CheckpointError:
                raise CheckpointError(
                    f"missing source adapter for task {task!r} (seed {seed}) under {directory}; "
                    "run train-adapter or the adapter_stl method first"
                ) from None
        return self.adapters[key]

    def ensure_adapters(self, tasks: Iterable[str], seeds: Iterable[int], train_missing: bool) -> None:
        """Load every (task, seed) adapter, training missing ones when allowed."""
        missing = []
        for task in tasks:
            for seed in seeds:
                try:
                    self.load_adapter(task, seed)
                except CheckpointError:
                    if not train_missing:
                        raise
                    missing.append((task, seed))
        trained = parallel_map(lambda job: self.train_adapter(*job), missing, worker_count(self.cfg.threads))
        self.adapters.update(zip(missing, trained))

    def source_adapters(self, seed: int, swap: dict[str, AdapterParams] | None = None) -> list[AdapterParams]:
        """Stored adapters in source order, with ``swap`` standing in for some tasks."""
        swap = swap or {}
        return [swap[s] if s in swap else self.load_adapter(s, seed)[0] for s in self.sources]


# ----------------------------------------------------------------------
# Single runs
# ----------------------------------------------------------------------

@dataclass
class SeedRun:
    method: str
    task: str
    seed: int
    metric: float
    params: dict


def _run_method(ctx: Context, method: str, target: str, seed: int, data: Dataset | None = None,
                own_adapter: tuple[AdapterParams, TaskHead] | None = None,
                save_dir: Path | None = None) -> SeedRun:
    """One (method, target, seed) run; ``data``/``own_adapter`` override the stored ones."""
    spec, full = ctx.task(target)
    data = data or full
    bb = ctx.backbone
    if method == "adapter_stl":
        adapter, head = own_adapter or ctx.load_adapter(target, seed)
        pipe = Pipeline(bb, AdapterPlugin(adapter), head, spec)
        report = adapter_report(bb, adapter, head)
        return SeedRun(method, target, seed, pipe.evaluate(data.test)["metric"], report.to_dict())

    swap = {target: own_adapter[0]} if own_adapter else None
    sources = ctx.source_adapters(seed, swap)
    cfg = ctx.cfg.train_config(method, seed)
    if method == "soup":
        names = [a.task_name for a in sources]
        datasets = {n: (data if n == target else ctx.task(n)[1]) for n in names}
        if target not in datasets:
            raise ConfigError(f"soup needs the target {target!r} among the candidate tasks")
        top_k = min(ctx.cfg.soup_top_k, len(names))
        weights = task_similarity_weights(datasets, target, top_k, bb, ctx.cfg.soup_samples, seed)
        meta = {"soup_weights": weights}
        merged = adapter_soup_merge(sources, [weights[n] for n in names], f"soup-{target}", meta)
        head, _, pipe = train_soup_head(spec, data, merged, bb, cfg)
        report = report_for(bb, [merged], None, head)
        return SeedRun(method, target, seed, pipe.evaluate(data.test)["metric"], report.to_dict())

    params, head, history = train_transfer(spec, data, sources, method, bb, cfg)
    if save_dir is not None:
        params.save(save_dir / "transfer", target)
        head.save(save_dir / "head", {"task": target, "seed": seed, "method": method})
        atomic_write_text(save_dir / "history.jsonl",
                          "".join(json.dumps(r, sort_keys=True) + "\n" for r in history))
    pipe = transfer_pipeline(spec, sources, params, head, bb, method)
    report = report_for(bb, sources, params, head)
    return SeedRun(method, target, seed, pipe.evaluate(data.test)["metric"], report.to_dict())


def _summary(values: dict[int, float]) -> dict:
    arr = np.array([values[s] for s in sorted(values)], dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "values": {str(s): float(values[s]) for s in sorted(values)},
    }


# ----------------------------------------------------------------------
# Multi-seed experiments
# ----------------------------------------------------------------------

@dataclass
class RunResult:
    """Per method and task: metric mean, std and per-seed values; plus parameter reports."""

    tasks: list[str]
    seeds: list[int]
    methods: dict[str, dict]
    wall_clock: float = 0.0

    def mean(self, method: str, task: str) -> float:
        return self.methods[method]["tasks"][task]["mean"]

    def avg(self, method: str) -> float:
        return self.methods[method]["avg"]["mean"]

    def to_json(self) -> str:
        payload = {"tasks": self.tasks, "seeds": self.seeds, "methods": self.methods}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", *self.tasks, AVG])
        for method, res in self.methods.items():
            writer.writerow([method, *(f"{res['tasks'][t]['mean']:.6f}" for t in self.tasks),
                             f"{res['avg']['mean']:.6f}"])
        return buf.getvalue()


def _aggregate(runs: Sequence[SeedRun], methods: Sequence[str], tasks: Sequence[str],
               seeds: Sequence[int]) -> dict[str, dict]:
    out = {}
    for method in methods:
        by_task = {t: {} for t in tasks}
        params = {}
        for r in runs:
            if r.method == method:
                by_task[r.task][r.seed] = r.metric
                params.setdefault(r.task, r.params)
        task_stats = {t: _summary(by_task[t]) for t in tasks}
        per_seed_avg = {s: float(np.mean([by_task[t][s] for t in tasks])) for s in seeds}
        avg = _summary(per_seed_avg)
        # the table's Avg. is the mean of task means, which equals the mean of per-seed averages
        avg["mean"] = float(np.mean([task_stats[t]["mean"] for t in tasks]))
        out[method] = {"tasks": task_stats, "avg": avg, "params": params}
    return out


def run_experiment(cfg: ExperimentConfig, ctx: Context | None = None, write: bool = True) -> RunResult:
    """Run every configured method over every target and seed; write the result tables."""
    start = time.perf_counter()
    ctx = ctx.bind(cfg) if ctx is not None else Context.load(cfg)
    targets = ctx.targets
    needs_sources = any(m != "adapter_stl" for m in cfg.methods)
    stage1 = set(targets) if "adapter_stl" in cfg.methods else set()
    ctx.ensure_adapters([t for t in ctx.benchmark if t in stage1], cfg.seeds, train_missing=True)
    if needs_sources:
        ctx.ensure_adapters(ctx.sources, cfg.seeds, train_missing=False)

    out = Path(cfg.output_dir)
    jobs = [(m, t, s) for m in cfg.methods for t in targets for s in cfg.seeds]

    def work(job):
        m, t, s = job
        save = out / "transfer" / m / t / f"seed{s}" if m in TRANSFER_METHODS and write else None
        return _run_method(ctx, m, t, s, save_dir=save)

    runs = parallel_map(work, jobs, worker_count(cfg.threads))
    result = RunResult(targets, list(cfg.seeds), _aggregate(runs, cfg.methods, targets, cfg.seeds))
    result.wall_clock = time.perf_counter() - start
    if write:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "results.json", result.to_json())
        atomic_write_text(out / "results.csv", result.to_csv())
        atomic_write_text(out / "run_meta.json", json.dumps(
            {"wall_clock_s": result.wall_clock, "workers": worker_count(cfg.threads),
             "config": asdict(cfg)}, indent=2, sort_keys=True, default=str) + "\n")
    return result


# ----------------------------------------------------------------------
# Probing sweeps
# ----------------------------------------------------------------------

def _probe_metric(ctx: Context, target: str, source_names: Sequence[str], weights: Sequence[float],
                  seed: int) -> float:
    spec, data = ctx.task(target)
    sources = [ctx.load_adapter(name, seed)[0] for name in source_names]
    cfg = ctx.cfg.train_config("probe", seed)
    _, _, pipe = train_head_probe(spec, data, sources, weights, ctx.backbone, cfg)
    return pipe.evaluate(data.test)["metric"]


def _check_grid(grid: Sequence[float], label: str) -> list[float]:
    grid = [float(w) for w in grid]
    if not grid:
        raise ConfigError(f"{label} is empty")
    return grid


def run_probe_sweep(ctx: Context, target: str, source: str, grid: Sequence[float],
                    seeds: Sequence[int] | None = None) -> list[dict]:
    """Fixed scaling ``omega * o_source`` in every layer, head-only training, per grid value."""
    grid = _check_grid(grid, "probe grid")
    seeds = list(seeds if seeds is not None else ctx.cfg.seeds)
    ctx.task(target)
    ctx.ensure_adapters([source], seeds, train_missing=False)
    jobs = [(w, s) for w in grid for s in seeds]
    metrics = parallel_map(lambda j: _probe_metric(ctx, target, [source], [j[0]], j[1]), jobs,
                           worker_count(ctx.cfg.threads))
    rows = []
    for i, w in enumerate(grid):
        stats = _summary({s: metrics[i * len(seeds) + k] for k, s in enumerate(seeds)})
        rows.append({"omega": w, "mean": stats["mean"], "std": stats["std"], "values": stats["values"]})
    return rows


def run_pair_grid(ctx: Context, target: str, source_a: str, source_b: str,
                  grid_a: Sequence[float], grid_b: Sequence[float],
                  seeds: Sequence[int] | None = None) -> tuple[list[dict], dict]:
    """Head-only probes over ``omega_a * o_a + omega_b * o_b``; returns rows and the argmax cell."""
    grid_a = _check_grid(grid_a, "grid_a")
    grid_b = _check_grid(grid_b, "grid_b")
    seeds = list(seeds if seeds is not None else ctx.cfg.seeds)
    ctx.task(target)
    ctx.ensure_adapters([source_a, source_b], seeds, train_missing=False)
    cells = [(wa, wb) for wa in grid_a for wb in grid_b]
    jobs = [(wa, wb, s) for wa, wb in cells for s in seeds]
    metrics = parallel_map(
        lambda j: _probe_metric(ctx, target, [source_a, source_b], [j[0], j[1]], j[2]),
        jobs, worker_count(ctx.cfg.threads))
    rows = []
    for i, (wa, wb) in enumerate(cells):
        stats = _summary({s: metrics[i * len(seeds) + k] for k, s in enumerate(seeds)})
        rows.append({"omega_a": wa, "omega_b": wb, "mean": stats["mean"], "std": stats["std"],
                     "values": stats["values"]})
    best = max(rows, key=lambda r: r["mean"])
    argmax = {"omega_a": best["omega_a"], "omega_b": best["omega_b"], "mean": best["mean"],
              "sum": best["omega_a"] + best["omega_b"],
              "sums_to_one": abs(best["omega_a"] + best["omega_b"] - 1.0) < 1e-9}
    return rows, argmax


# ----------------------------------------------------------------------
# Coefficient export
# ----------------------------------------------------------------------

UNIFORM_HEADER = ("layer", "source", "value")
VECTOR_HEADER = ("layer", "source", "mean", "min", "max")


def load_transfer(directory) -> ScalingParams | FusionParams:
    arrays, meta = load_checkpoint(directory)
    kind = meta.get("kind")
    if kind == "scaling":
        return ScalingParams.from_arrays(arrays, meta)
    if kind == "fusion":
        return FusionParams.from_arrays(arrays, meta)
    raise CheckpointError(f"{directory} is not a transfer checkpoint")


def export_coefficients(params: ScalingParams | FusionParams) -> tuple[tuple[str, ...], list[dict]]:
    """Heatmap rows: exact scalars for uniform variants, mean/min/max for vector variants."""
    if isinstance(params, FusionParams):
        raise ConfigError("fusion weights depend on the input; there are no coefficients to export")
    layers = ["shared"] if params.variant.shared else list(range(params.n_layers))
    rows = []
    for i, layer in enumerate(layers):
        w = params.omega[i].data
        for s, source in enumerate(params.source_order):
            if params.variant.uniform:
                rows.append({"layer": layer, "source": source, "value": float(w[s])})
            else:
                rows.append({"layer": layer, "source": source, "mean": float(w[s].mean()),
                             "min": float(w[s].min()), "max": float(w[s].max())})
    header = UNIFORM_HEADER if params.variant.uniform else VECTOR_HEADER
    return header, rows


def omega_sums(params: ScalingParams) -> list[dict]:
    """Per layer, ``sum_s omega_s`` (scalar variants) for checking the sum-to-one question."""
    if not params.variant.uniform:
        raise ConfigError("omega sums are defined for scalar (uniform) variants")
    layers = ["shared"] if params.variant.shared else list(range(params.n_layers))
    return [{"layer": layer, "sum": float(params.omega[i].data.astype(np.float64).sum())}
            for i, layer in enumerate(layers)]


# ----------------------------------------------------------------------
# Few-shot grid
# ----------------------------------------------------------------------

FEW_SHOT_HEADER = ("method", "k", "task", "mean", "std")


def run_few_shot(cfg: ExperimentConfig, ks: Sequence[int] | None = None,
                 ctx: Context | None = None) -> list[dict]:
    """Per ``k``: a ``k``-example target adapter, composed with full-data adapters of the others.

    Rows carry ``method, k, task, mean, std`` plus the per-seed values.
    ``k`` equal to a target's training size reproduces :func:`run_experiment`.
    """
    ks = list(ks if ks is not None else cfg.few_shot_ks)
    if not ks:
        raise ConfigError("no k values given")
    ctx = ctx.bind(cfg) if ctx is not None else Context.load(cfg)
    targets = ctx.targets
    for t in targets:
        n = len(ctx.task(t)[1].train)
        too_big = [k for k in ks if k > n]
        if too_big:
            raise DataError(f"k={too_big[0]} exceeds the training split of task {t!r} ({n} examples)")
    if any(m != "adapter_stl" for m in cfg.methods):
        ctx.ensure_adapters([s for s in ctx.sources if s not in targets], cfg.seeds, train_missing=False)
        ctx.ensure_adapters([s for s in ctx.sources if s in targets], cfg.seeds, train_missing=True)

    def work(job):
        k, t, s = job
        spec, full = ctx.task(t)
        data = few_shot_subsample(full, k, s)
        adapter, head, _ = train_source_adapter(spec, data, ctx.backbone,
                                                cfg.train_config("adapter_stl", s), cfg.reduction)
        return [_run_method(ctx, m, t, s, data=data, own_adapter=(adapter, head)) for m in cfg.methods]

    jobs = [(k, t, s) for k in ks for t in targets for s in cfg.seeds]
    results = parallel_map(work, jobs, worker_count(cfg.threads))
    values: dict[tuple[str, int, str], dict[int, float]] = {}
    for (k, t, s), runs in zip(jobs, results):
        for r in runs:
            values.setdefault((r.method, k, t), {})[s] = r.metric
    rows = []
    for m in cfg.methods:
        for k in ks:
            for t in targets:
                stats = _summary(values[(m, k, t)])
                rows.append({"method": m, "k": k, "task": t, "mean": stats["mean"],
                             "std": stats["std"], "values": stats["values"]})
    return rows


# ----------------------------------------------------------------------
# CSV output
# ----------------------------------------------------------------------

def rows_to_csv(header: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(row[h]) for h in header])
    return buf.getvalue()


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)
