"""Command-line entry point: ``scalearn <command> [options]``.

Exit codes: 0 success, 2 configuration or data error, 3 missing checkpoint,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .accounting import Scope, format_table, table_rows, transfer_param_count
from .adapter import adapter_param_count
from .backbone import BackboneConfig, WarmupSpec, init_backbone
from .checkpoint import atomic_write_text
from .errors import CheckpointError, ConfigError
from .experiments import (
    FEW_SHOT_HEADER,
    METHODS,
    Context,
    ExperimentConfig,
    export_coefficients,
    load_transfer,
    prepare_inputs,
    run_experiment,
    run_few_shot,
    run_pair_grid,
    run_probe_sweep,
    rows_to_csv,
)
from .taskgen import BenchmarkSpec, corpus, generate_benchmark, read_benchmark, write_benchmark
from .tensor import NonFiniteError
from .training import (
    TRANSFER_METHODS,
    AdapterPlugin,
    Pipeline,
    TaskHead,
    gradcheck_transfer,
    transfer_pipeline,
)

log = logging.getLogger("scalearn_lab")

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 2, 3, 4


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _parse_value(text: str):
    import tomli

    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out, text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


# ----------------------------------------------------------------------
# Experiment configuration from --config plus flags
# ----------------------------------------------------------------------

def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment")
    g.add_argument("--config", help="TOML experiment file; flags below override it")
    g.add_argument("--benchmark", help="benchmark manifest.json")
    g.add_argument("--backbone", help="backbone checkpoint directory")
    g.add_argument("--methods", type=_names, help=f"comma list from: {', '.join(METHODS)}")
    g.add_argument("--seeds", type=_ints, help="comma list of seeds (default 0,1,2,3,4)")
    g.add_argument("--targets", type=_names, help="target tasks (default: all)")
    g.add_argument("--sources", type=_names, help="source tasks (default: all)")
    g.add_argument("--output-dir", dest="output_dir")
    g.add_argument("--adapter-dir", dest="adapter_dir")
    g.add_argument("--reduction", type=int, help="adapter reduction factor r (bottleneck d/r, default 16)")
    g.add_argument("--threads", type=int, help="worker threads (default: SCALEARN_THREADS or CPU count)")
    g.add_argument("--set", action="append", default=[], metavar="METHOD.KEY=VALUE",
                   help="training option override, e.g. scalearn.learning_rate=0.01")


def _experiment_config(args) -> ExperimentConfig:
    updates = {k: getattr(args, k, None) for k in
               ("benchmark", "backbone", "methods", "seeds", "targets", "sources",
                "output_dir", "adapter_dir", "reduction", "threads")}
    updates = {k: v for k, v in updates.items() if v is not None}
    if args.config:
        cfg = ExperimentConfig.from_toml(args.config, **updates)
    else:
        cfg = ExperimentConfig.from_dict(updates)
    if args.set:
        overrides = {k: dict(v) for k, v in cfg.overrides.items()}
        for item in args.set:
            key, sep, value = item.partition("=")
            method, dot, option = key.partition(".")
            if not sep or not dot:
                raise ConfigError(f"--set expects METHOD.KEY=VALUE, got {item!r}")
            overrides.setdefault(method, {})[option] = _parse_value(value)
        cfg = replace(cfg, overrides=overrides)
    return cfg


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------

def cmd_gen_benchmark(args) -> int:
    spec = BenchmarkSpec.default(args.overlap, args.low_resource_train)
    if args.n_train is not None:
        spec.tasks = [t if t.n_train == args.low_resource_train else replace(t, n_train=args.n_train)
                      for t in spec.tasks]
    spec.label_noise = args.label_noise
    bench = generate_benchmark(spec, args.seed)
    path = write_benchmark(bench, args.out, spec, args.seed)
    print(path)
    return EXIT_OK


def cmd_init_backbone(args) -> int:
    config = BackboneConfig(vocab_size=args.vocab_size, d_model=args.d_model, n_layers=args.layers,
                            n_heads=args.heads, ffn_dim=args.ffn_dim, max_seq_len=args.max_seq_len,
                            dropout_p=args.dropout)
    warmup = None
    if args.warmup_steps > 0:
        if not args.benchmark:
            raise ConfigError("--benchmark is needed for the warmup corpus (or pass --warmup-steps 0)")
        warmup = WarmupSpec(corpus(read_benchmark(args.benchmark)), steps=args.warmup_steps, seed=args.seed)
    backbone = init_backbone(config, args.seed, warmup)
    backbone.save(args.out)
    print(json.dumps({"out": str(args.out), **backbone.meta}, sort_keys=True))
    return EXIT_OK


def cmd_train_adapter(args) -> int:
    cfg = _experiment_config(args)
    ctx = Context.load(cfg)
    results = {}
    for task in args.task:
        for seed in cfg.seeds:
            adapter, head = ctx.train_adapter(task, seed)
            spec, data = ctx.task(task)
            ev = Pipeline(ctx.backbone, AdapterPlugin(adapter), head, spec).evaluate(data.split(args.split))
            results[f"{task}/seed{seed}"] = ev
    print(json.dumps(results, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train_transfer(args) -> int:
    cfg = _experiment_config(args)
    cfg = replace(cfg, methods=[args.method], targets=args.target or cfg.targets)
    result = run_experiment(cfg)
    sys.stdout.write(result.to_csv())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _experiment_config(args)
    ctx = Context.load(cfg)
    spec, data = ctx.task(args.task)
    if args.transfer:
        params = load_transfer(args.transfer)
        seed = int(params.meta.get("seed", cfg.seeds[0]))
        method = params.meta.get("method") or (params.variant.value if hasattr(params, "variant") else "fusion")
        sources = [ctx.load_adapter(name, seed)[0] for name in params.source_order]
        head = TaskHead.load(Path(args.transfer).parent / "head")
        pipe = transfer_pipeline(spec, sources, params, head, ctx.backbone, method)
    else:
        seed = cfg.seeds[0]
        adapter, head = ctx.load_adapter(args.task, seed)
        pipe = Pipeline(ctx.backbone, AdapterPlugin(adapter), head, spec)
    print(json.dumps(pipe.evaluate(data.split(args.split)), sort_keys=True))
    return EXIT_OK


def cmd_count_params(args) -> int:
    if args.variant:
        if args.variant == "adapter":
            n = adapter_param_count(args.d, args.reduction, args.layers)
            n = n * args.tasks if args.scope == Scope.ALL_TASKS.value else n
        else:
            n = transfer_param_count(args.variant, args.d, args.layers, args.sources, args.tasks, args.scope)
        print(n)
    else:
        print(format_table(table_rows(args.d, args.layers, args.sources, args.tasks, args.reduction)))
    return EXIT_OK


def cmd_sweep_scale(args) -> int:
    cfg = _experiment_config(args)
    ctx = Context.load(cfg)
    rows = run_probe_sweep(ctx, args.target, args.source, args.grid, cfg.seeds)
    text = rows_to_csv(("omega", "mean", "std"), rows)
    _emit(text, args.out)
    return EXIT_OK


def cmd_pair_grid(args) -> int:
    cfg = _experiment_config(args)
    ctx = Context.load(cfg)
    rows, best = run_pair_grid(ctx, args.target, args.source_a, args.source_b,
                               args.grid_a, args.grid_b, cfg.seeds)
    _emit(rows_to_csv(("omega_a", "omega_b", "mean", "std"), rows), args.out)
    print(json.dumps({"argmax": best}, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_export_coefficients(args) -> int:
    params = load_transfer(args.checkpoint)
    header, rows = export_coefficients(params)
    _emit(rows_to_csv(header, rows), args.out)
    return EXIT_OK


def cmd_few_shot(args) -> int:
    cfg = _experiment_config(args)
    rows = run_few_shot(cfg, args.ks)
    _emit(rows_to_csv(FEW_SHOT_HEADER, rows), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for method in args.methods:
        errors = gradcheck_transfer(method, seed=args.seed, eps=args.eps, max_coords=args.max_coords)
        shown = {k: float(f"{v:.3g}") for k, v in errors.items()}
        print(f"{method:<22} {json.dumps(shown, sort_keys=True)}")
        worst = max(worst, *(v for k, v in errors.items() if k != "shift_invariant"))
    ok = worst < args.tol
    print(f"max relative error {worst:.3g} ({'ok' if ok else 'FAILED'} at tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    prepare_inputs(cfg)
    result = run_experiment(cfg)
    sys.stdout.write(result.to_csv())
    log.info("finished in %.1f s; results in %s", result.wall_clock, cfg.output_dir)
    return EXIT_OK


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-benchmark", help="generate the synthetic multi-task benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overlap", type=float, default=0.7, help="rule overlap rho in [0, 1]")
    p.add_argument("--low-resource-train", type=int, default=64)
    p.add_argument("--n-train", type=int, help="training size of the other tasks")
    p.add_argument("--label-noise", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_benchmark)

    p = sub.add_parser("init-backbone", help="initialise, warm up and freeze the backbone")
    p.add_argument("--out", required=True)
    p.add_argument("--benchmark", help="manifest whose training text is the warmup corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup-steps", type=int, default=500)
    defaults = BackboneConfig()
    p.add_argument("--vocab-size", type=int, default=defaults.vocab_size)
    p.add_argument("--d-model", type=int, default=defaults.d_model)
    p.add_argument("--layers", type=int, default=defaults.n_layers)
    p.add_argument("--heads", type=int, default=defaults.n_heads)
    p.add_argument("--ffn-dim", type=int, default=defaults.ffn_dim)
    p.add_argument("--max-seq-len", type=int, default=defaults.max_seq_len)
    p.add_argument("--dropout", type=float, default=defaults.dropout_p)
    p.set_defaults(func=cmd_init_backbone)

    p = sub.add_parser("train-adapter", help="stage 1: train single-task adapters")
    _add_experiment_args(p)
    p.add_argument("--task", type=_names, required=True, help="task name(s)")
    p.add_argument("--split", default="validation", choices=("train", "validation", "test"))
    p.set_defaults(func=cmd_train_adapter)

    p = sub.add_parser("train-transfer", help="stage 2: train a transfer layer over frozen adapters")
    _add_experiment_args(p)
    p.add_argument("--method", required=True, choices=TRANSFER_METHODS + ("soup",))
    p.add_argument("--target", type=_names, help="target task(s)")
    p.set_defaults(func=cmd_train_transfer)

    p = sub.add_parser("evaluate", help="evaluate a stored adapter or transfer checkpoint")
    _add_experiment_args(p)
    p.add_argument("--task", required=True)
    p.add_argument("--transfer", help="transfer checkpoint directory (omit for the task's own adapter)")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("count-params", help="closed-form trainable parameter counts")
    p.add_argument("--d", type=int, default=768)
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--sources", type=int, default=8)
    p.add_argument("--tasks", type=int, default=8)
    p.add_argument("--reduction", type=int, default=16)
    p.add_argument("--variant", help="one variant (scalearn, scalearn_uniform, scalearn_pp, "
                                     "scalearn_uniform_pp, fusion, adapter); omit for the full table")
    p.add_argument("--scope", default="per_task", choices=[s.value for s in Scope])
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("sweep-scale", help="probe: fixed omega * o_source, head-only training")
    _add_experiment_args(p)
    p.add_argument("--target", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--grid", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_sweep_scale)

    p = sub.add_parser("pair-grid", help="probe: omega_a * o_a + omega_b * o_b over a grid")
    _add_experiment_args(p)
    p.add_argument("--target", required=True)
    p.add_argument("--source-a", required=True)
    p.add_argument("--source-b", required=True)
    p.add_argument("--grid-a", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--grid-b", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_pair_grid)

    p = sub.add_parser("export-coefficients", help="scaling coefficients of a transfer checkpoint as CSV")
    p.add_argument("checkpoint")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_export_coefficients)

    p = sub.add_parser("few-shot", help="k-example target adapters composed with full-data sources")
    _add_experiment_args(p)
    p.add_argument("--ks", type=_ints, help="comma list (default 4,16,32,100)")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_few_shot)

    p = sub.add_parser("gradcheck", help="finite-difference check of full transfer models")
    p.add_argument("--methods", type=_names, default=list(TRANSFER_METHODS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=6, help="scalars probed per tensor")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("run", help="full pipeline from one config: data, backbone, adapters, methods")
    _add_experiment_args(p)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
