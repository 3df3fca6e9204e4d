"""Trainable-parameter accounting: closed-form counts and enumeration of live models.

Transfer-layer counts exclude biases and task heads.  Adapter counts include
the biases of both projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .adapter import AdapterParams, adapter_param_count
from .composition import FusionParams, ScalingParams, Variant
from .errors import ConfigError
from .tensor import Tensor

# Parameter count of the base-size encoder used for the reference table's percentages.
REFERENCE_BACKBONE_COUNT = 124_645_632


class Scope(str, Enum):
    PER_TASK = "per_task"
    ALL_TASKS = "all_tasks"


FUSION = "fusion"


def _variant_key(variant) -> str:
    if isinstance(variant, Variant):
        return variant.value
    key = str(variant).strip().lower().replace("-", "_")
    aliases = {
        "scalearn++": "scalearn_pp",
        "scalearnuniform": "scalearn_uniform",
        "scalearnuniform++": "scalearn_uniform_pp",
        "scalearn_uniform++": "scalearn_uniform_pp",
        "adapterfusion": FUSION,
    }
    return aliases.get(key, key)


def transfer_param_count(variant, d: int, L: int, S: int, T: int, scope: Scope | str) -> int:
    """Weight scalars of the transfer layers (biases and heads excluded)."""
    for name, value in (("d", d), ("L", L), ("S", S), ("T", T)):
        if int(value) != value or value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    scope = Scope(scope)
    per_task = {
        Variant.SCALEARN.value: d * L * S,
        Variant.SCALEARN_UNIFORM.value: L * S,
        Variant.SCALEARN_PP.value: d * S,
        Variant.SCALEARN_UNIFORM_PP.value: S,
        FUSION: 3 * d * d * L,
    }
    key = _variant_key(variant)
    if key not in per_task:
        raise ConfigError(f"unknown transfer variant {variant!r}")
    count = per_task[key]
    return count * T if scope is Scope.ALL_TASKS else count


# ----------------------------------------------------------------------
# Enumeration
# ----------------------------------------------------------------------

def _is_bias(name: str) -> bool:
    leaf = name.rsplit("/", 1)[-1]
    return leaf == "b" or (leaf.startswith("b") and len(leaf) <= 3) or leaf.endswith("_b")


@dataclass
class ComponentCount:
    count: int = 0
    weights: int = 0
    biases: int = 0


@dataclass
class ParamReport:
    components: dict[str, ComponentCount]
    backbone_count: int
    scope: Scope = Scope.PER_TASK
    frozen: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(c.count for c in self.components.values())

    def count(self, component: str) -> int:
        return self.components[component].count if component in self.components else 0

    def weights(self, component: str) -> int:
        return self.components[component].weights if component in self.components else 0

    def percent_of_backbone(self, component: str | None = None) -> float:
        n = self.total if component is None else self.count(component)
        return 100.0 * n / self.backbone_count if self.backbone_count else 0.0

    def to_dict(self) -> dict:
        return {
            "scope": self.scope.value,
            "backbone_count": self.backbone_count,
            "total": self.total,
            "components": {
                name: {"count": c.count, "weights": c.weights, "biases": c.biases,
                       "percent_of_backbone": round(self.percent_of_backbone(name), 2)}
                for name, c in self.components.items()
            },
        }


def enumerate_trainable(
    components: Mapping[str, Mapping[str, Tensor]], backbone_count: int | None = None
) -> ParamReport:
    """Count scalars with ``requires_grad`` set, per component, split into weights and biases.

    ``components`` maps a component name (``"backbone"``, ``"sources"``,
    ``"transfer"``, ``"head"``...) to its named tensors.  ``backbone_count``
    defaults to the size of the ``"backbone"`` component.
    """
    report: dict[str, ComponentCount] = {}
    frozen: dict[str, int] = {}
    for comp, named in components.items():
        c = ComponentCount()
        frozen[comp] = 0
        for name, t in named.items():
            if not t.requires_grad:
                frozen[comp] += t.size
                continue
            c.count += t.size
            if _is_bias(name):
                c.biases += t.size
            else:
                c.weights += t.size
        report[comp] = c
    if backbone_count is None:
        backbone_count = sum(t.size for t in components.get("backbone", {}).values())
    return ParamReport(report, backbone_count, frozen=frozen)


def transfer_assembly(backbone, sources: Sequence[AdapterParams], transfer, head=None,
                      target: str = "target") -> dict[str, dict[str, Tensor]]:
    """Named tensors of a stage-2 model with the frozen flags used while training it."""
    comps: dict[str, dict[str, Tensor]] = {"backbone": dict(backbone.encoder_tensors())}
    comps["sources"] = {}
    for a in sources:
        comps["sources"].update(a.named_tensors())
    # soup has no transfer layer; an empty component still reports its zero
    comps["transfer"] = transfer.named_tensors(target) if transfer is not None else {}
    if head is not None:
        comps["head"] = head.named_tensors(f"head/{target}")
    return comps


def report_with_flags(components: Mapping[str, Mapping[str, Tensor]],
                      trainable: Iterable[str]) -> ParamReport:
    """Enumerate ``components`` as if exactly the ``trainable`` ones were being trained.

    Fitting leaves every tensor frozen, so a finished model no longer carries
    its training-time flags; they are set here and restored afterwards.
    """
    trainable = set(trainable)
    saved = [(t, t.requires_grad) for named in components.values() for t in named.values()]
    try:
        for comp, named in components.items():
            for t in named.values():
                t.requires_grad = comp in trainable
        backbone_count = sum(t.size for t in components.get("backbone", {}).values())
        return enumerate_trainable(components, backbone_count)
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def report_for(backbone, sources: Sequence[AdapterParams], transfer, head) -> ParamReport:
    """Stage-2 report: the transfer layer (unless its values are fixed) and the head train."""
    comps = transfer_assembly(backbone, sources, transfer, head)
    trainable = {"head"}
    if transfer is not None and not transfer.meta.get("fixed", False):
        trainable.add("transfer")
    return report_with_flags(comps, trainable)


def adapter_report(backbone, adapter: AdapterParams, head) -> ParamReport:
    """Stage-1 report: one adapter and its head train over the frozen backbone."""
    comps = {"backbone": dict(backbone.encoder_tensors()), "adapter": adapter.named_tensors(),
             "head": head.named_tensors(f"head/{adapter.task_name}")}
    return report_with_flags(comps, {"adapter", "head"})


def transfer_weight_count(params: ScalingParams | FusionParams) -> int:
    """Weight scalars of one transfer layer set, read from the tensors themselves."""
    return sum(t.size for name, t in params.named_tensors("t").items() if not _is_bias(name))


# ----------------------------------------------------------------------
# Reference table
# ----------------------------------------------------------------------

TABLE_ROWS = (
    ("Adapter", None),
    ("AdapterFusion", FUSION),
    ("ScaLearn", Variant.SCALEARN.value),
    ("ScaLearnUniform", Variant.SCALEARN_UNIFORM.value),
    ("ScaLearn++", Variant.SCALEARN_PP.value),
    ("ScaLearnUniform++", Variant.SCALEARN_UNIFORM_PP.value),
)


def table_rows(d: int = 768, L: int = 12, S: int = 8, T: int = 8, r: int = 16,
               backbone_count: int = REFERENCE_BACKBONE_COUNT) -> list[dict]:
    rows = []
    for label, key in TABLE_ROWS:
        if key is None:
            per_task = adapter_param_count(d, r, L)
            all_tasks = per_task * T
        else:
            per_task = transfer_param_count(key, d, L, S, T, Scope.PER_TASK)
            all_tasks = transfer_param_count(key, d, L, S, T, Scope.ALL_TASKS)
        rows.append({
            "model": label,
            "per_task": per_task,
            "per_task_pct": 100.0 * per_task / backbone_count,
            "all_tasks": all_tasks,
            "all_tasks_pct": 100.0 * all_tasks / backbone_count,
        })
    return rows


def _short(n: int) -> str:
    for div, suffix in ((1_000_000, "M"), (1_000, "K")):
        if n >= div:
            return f"{round(n / div)}{suffix}"
    return str(n)


def format_table(rows: Iterable[dict]) -> str:
    lines = [f"{'Model':<20}{'per task':>28}{'all tasks':>32}"]
    for row in rows:
        left = f"{row['per_task_pct']:.2f}% ({_short(row['per_task'])}) {row['per_task']:>10,}"
        right = f"{row['all_tasks_pct']:.2f}% ({_short(row['all_tasks'])}) {row['all_tasks']:>11,}"
        lines.append(f"{row['model']:<20}{left:>28}{right:>32}")
    return "\n".join(lines)
