"""Acceptance criteria, one test each; every test records a PASS/FAIL line for the run summary.

Criteria 7, 8 and 10 share one desk-scale run (six targets, five seeds), built
once per session by the ``desk_run`` fixture.
"""

import json
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from scalearn_lab.accounting import transfer_param_count
from scalearn_lab.adapter import adapter_forward, adapter_param_count, adapter_soup_merge, init_adapter
from scalearn_lab.checkpoint import checkpoint_digest
from scalearn_lab.composition import (
    ScalingParams,
    Variant,
    effective_weights,
    fusion_weights,
    init_fusion,
    init_scaling,
    restrict_equivalence,
)
from scalearn_lab.experiments import load_transfer, omega_sums, run_experiment, run_few_shot
from scalearn_lab.tensor import Tensor, precision
from scalearn_lab.training import TRANSFER_METHODS, gradcheck_transfer, train_transfer

from conftest import DESK_SEEDS, SCALEARN_VARIANTS, record

pytestmark = pytest.mark.slow

LOW_RESOURCE = "entailment_low"


def test_01_parameter_table():
    start = time.perf_counter()
    expected = {
        "scalearn": (73_728, 589_824),
        "scalearn_uniform": (96, 768),
        "scalearn_pp": (6_144, 49_152),
        "scalearn_uniform_pp": (8, 64),
        "fusion": (21_233_664, 169_869_312),
    }
    got = {v: (transfer_param_count(v, 768, 12, 8, 1, "per_task"),
               transfer_param_count(v, 768, 12, 8, 8, "all_tasks")) for v in expected}
    adapter = adapter_param_count(768, 16, 12)
    elapsed = time.perf_counter() - start
    ok = got == expected and adapter == 894_528 and elapsed < 1.0
    record(1, ok, f"adapter {adapter:,}, {elapsed * 1e3:.1f} ms")
    assert got == expected
    assert adapter == 894_528
    assert elapsed < 1.0


def test_02_gradient_check():
    start = time.perf_counter()
    worst, shift = {}, 0.0
    for method in TRANSFER_METHODS:
        errors = gradcheck_transfer(method)
        shift = max(shift, errors.pop("shift_invariant"))
        worst[method] = max(errors.values())
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = top < 1e-4 and elapsed < 60
    record(2, ok,
           f"max rel err {top:.2e} over {len(worst)} methods, {elapsed:.1f} s")
    assert top < 1e-4, worst
    assert shift < 1e-8
    assert elapsed < 60


def test_03_restriction_equivalences():
    rng = np.random.default_rng(2024)
    worst_uniform = worst_shared = 0.0
    for trial in range(100):
        S, d, L = rng.integers(1, 5), rng.integers(2, 17), rng.integers(1, 5)
        order = [f"s{i}" for i in range(S)]
        outputs = [[Tensor(rng.normal(size=(3, 5, d))) for _ in range(S)] for _ in range(L)]

        constant = rng.normal(0.5, 0.5, size=(L, S, 1)) * np.ones((1, 1, d))
        params = ScalingParams(Variant.SCALEARN, order, [Tensor(w) for w in constant], int(L))
        worst_uniform = max(worst_uniform, restrict_equivalence(params, outputs)["uniform"])

        shared = rng.normal(0.5, 0.5, size=(S, d))
        params = ScalingParams(Variant.SCALEARN, order, [Tensor(shared.copy()) for _ in range(L)], int(L))
        worst_shared = max(worst_shared, restrict_equivalence(params, outputs)["shared"])
    ok = worst_uniform < 1e-6 and worst_shared < 1e-6
    record(3, ok,
           f"max abs diff {max(worst_uniform, worst_shared):.1e} over 100 trials")
    assert worst_uniform < 1e-6
    assert worst_shared < 1e-6


def test_04_frozen_parameters(desk_run, tmp_path):
    ctx, _ = desk_run
    spec, data = ctx.task(LOW_RESOURCE)
    sources = ctx.source_adapters(0)
    on_disk = [Path(ctx.cfg.backbone)] + [ctx.adapter_dir(a.task_name, 0) / "adapter" for a in sources]
    disk_before = [checkpoint_digest(p) for p in on_disk]

    def snapshot(tag):
        ctx.backbone.save(tmp_path / tag / "backbone")
        for a in sources:
            a.save(tmp_path / tag / a.task_name)
        return [checkpoint_digest(p) for p in sorted((tmp_path / tag).iterdir())]

    before = snapshot("before")
    changed = []
    for method in TRANSFER_METHODS:
        cfg = ctx.cfg.train_config(method, 0)
        train_transfer(spec, data, sources, method, ctx.backbone, replace(cfg, max_epochs=3))
        if snapshot(method) != before:
            changed.append(method)
    disk_same = [checkpoint_digest(p) for p in on_disk] == disk_before
    ok = not changed and disk_same
    record(4, ok,
           f"{len(TRANSFER_METHODS)} methods x 3 epochs" + (f"; changed by {changed}" if changed else ""))
    assert not changed
    assert disk_same


def test_05_fusion_distribution():
    rng = np.random.default_rng(7)
    worst_sum, lowest = 0.0, 1.0
    for trial in range(1000):
        S, d = int(rng.integers(1, 6)), int(rng.integers(2, 13))
        params = init_fusion(d, 1, [f"s{i}" for i in range(S)], seed=trial)
        for p in params.layers[0].values():
            p.data = p.data + rng.normal(0, 0.5, size=p.shape)
        x = Tensor(rng.normal(0, 2, size=(2, 4, d)))
        outputs = [Tensor(rng.normal(0, 2, size=(2, 4, d))) for _ in range(S)]
        w = fusion_weights(x, outputs, params, 0).data
        worst_sum = max(worst_sum, float(np.abs(w.sum(axis=0) - 1).max()))
        lowest = min(lowest, float(w.min()))

    constrained = 0.0
    for trial in range(100):
        S, d = int(rng.integers(1, 6)), int(rng.integers(2, 13))
        order = [f"s{i}" for i in range(S)]
        initial = init_scaling("scalearn", d, 2, order, seed=trial)
        positive = init_scaling("scalearn", d, 2, order, seed=trial)
        positive.omega[1].data = rng.uniform(0.01, 1.0, size=(S, d)).astype(positive.omega[1].data.dtype)
        # sign-indefinite draws put the mean constraint's denominator near zero, where single
        # weights grow large; float32 rounding alone then exceeds the tolerance, so use 64 bits
        with precision(np.float64):
            mixed = init_scaling("scalearn", d, 2, order, seed=trial, std=0.3)
        for params in (initial, positive, mixed):
            for mode in ("mean", "softmax"):
                w = effective_weights(params, mode, 1).data
                constrained = max(constrained, float(np.abs(w.sum(axis=0) - 1).max()))
    ok = worst_sum < 1e-6 and lowest >= 0 and constrained < 1e-6
    record(5, ok,
           f"max |sum-1| {max(worst_sum, constrained):.1e}, min weight {lowest:.2e}")
    assert lowest >= 0
    assert worst_sum < 1e-6
    assert constrained < 1e-6


def test_06_soup():
    rng = np.random.default_rng(11)

    def perturbed(name, seed):
        a = init_adapter(32, 3, 4, name, seed=seed)
        for p in a.parameters():
            p.data = (p.data + rng.normal(0, 0.1, size=p.shape)).astype(p.data.dtype)
        return a

    A, B, C = perturbed("a", 0), perturbed("b", 1), perturbed("c", 2)
    identical = adapter_soup_merge([A], [1.0]).snapshot() == A.snapshot()
    worst = 0.0
    for _ in range(20):
        alpha, beta = rng.uniform(size=2)
        nested = adapter_soup_merge([adapter_soup_merge([A, B], [alpha, 1 - alpha]), C], [beta, 1 - beta])
        flat = adapter_soup_merge([A, B, C], [alpha * beta, (1 - alpha) * beta, 1 - beta])
        worst = max(worst, max(float(np.abs(p.data - q.data).max())
                               for p, q in zip(nested.parameters(), flat.parameters())))
    same_forward = adapter_soup_merge([A, A.copy()], [0.3, 0.7])
    x = Tensor(rng.normal(size=(2, 5, 32)))
    fwd = float(np.abs(adapter_forward(x, same_forward, 1).data - adapter_forward(x, A, 1).data).max())
    ok = identical and worst < 1e-6 and fwd < 1e-6
    record(6, ok, f"max abs diff {max(worst, fwd):.1e}")
    assert identical
    assert worst < 1e-6
    assert fwd < 1e-6


def test_07_transfer_effect(desk, desk_run):
    _, prep_seconds = desk
    ctx, result = desk_run
    seconds = prep_seconds + result.wall_clock
    stl_low = result.mean("adapter_stl", LOW_RESOURCE)
    margin = result.mean("scalearn", LOW_RESOURCE) - stl_low
    stl_avg = result.avg("adapter_stl")
    gaps = {v: result.avg(v) - stl_avg for v in SCALEARN_VARIANTS}
    ok = margin > 0 and min(gaps.values()) >= -0.02 and seconds < 600
    record(7, ok,
           f"{LOW_RESOURCE} +{margin:.4f}; worst Avg. gap {min(gaps.values()):+.4f}; {seconds:.0f} s")
    assert result.seeds == DESK_SEEDS and len(result.tasks) == 6
    assert margin > 0, (stl_low, margin)
    assert min(gaps.values()) >= -0.02, gaps
    assert seconds < 600


def test_08_unconstrained_sums(desk_run):
    ctx, result = desk_run
    out = Path(ctx.cfg.output_dir) / "transfer" / "scalearn_uniform"
    deviations = []
    for target in result.tasks:
        for seed in result.seeds:
            params = load_transfer(out / target / f"seed{seed}" / "transfer")
            deviations.extend(abs(row["sum"] - 1.0) for row in omega_sums(params))
    largest = max(deviations)
    ok = largest > 0.05
    record(8, ok,
           f"largest |sum-1| {largest:.3f} over {len(deviations)} layer sums")
    assert largest > 0.05


def test_09_determinism(desk, tmp_path):
    cfg, _ = desk
    tasks = ["polarity", LOW_RESOURCE]

    def fresh(tag):
        out = tmp_path / tag
        run_experiment(replace(cfg, methods=["adapter_stl", "scalearn"], seeds=[0], targets=tasks,
                               sources=tasks, output_dir=str(out), adapter_dir=str(out / "adapters")))
        return (out / "results.json").read_bytes()

    first, second = fresh("a"), fresh("b")
    ok = first == second
    record(9, ok, f"{len(first)} bytes")
    assert ok


def test_10_few_shot(desk_run):
    ctx, result = desk_run
    methods, targets = ["scalearn", "scalearn_uniform_pp"], ["polarity", "topic"]
    cfg = replace(ctx.cfg, methods=methods, seeds=[0], targets=targets)
    ks = [4, 16, 32, 100]
    rows = run_few_shot(cfg, ks, ctx)
    schema = (len(rows) == len(methods) * len(ks) * len(targets)
              and all(set(r) >= {"method", "k", "task", "mean", "std"} for r in rows))

    full = len(ctx.task("polarity")[1].train)
    assert all(len(ctx.task(t)[1].train) == full for t in targets)
    full_rows = run_few_shot(cfg, [full], ctx)
    mismatched = [(r["method"], r["task"]) for r in full_rows
                  if r["values"]["0"] != result.methods[r["method"]]["tasks"][r["task"]]["values"]["0"]]

    by = {(r["method"], r["k"], r["task"]): r["mean"] for r in rows}
    low, high = (np.mean([by[("scalearn", k, t)] for t in targets]) for k in (4, 100))
    if high < low:
        warnings.warn(f"ScaLearn at k=100 ({high:.3f}) is below k=4 ({low:.3f}) on seed 0")

    ok = schema and not mismatched
    record(10, ok,
           f"{len(rows)} rows; k=4 {low:.3f}, k=100 {high:.3f}")
    assert schema, json.dumps(rows[:2])
    assert not mismatched
