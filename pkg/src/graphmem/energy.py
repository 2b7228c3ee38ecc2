"""Importance scoring and token budget allocation for the visual memory bank.

Each bank item gets an intrinsic score combining its semantic priority, the
structural centrality (out-degree) of its owning node, and exponential decay
in the number of steps since that node was created.  Scores are then
reinforced top-down: an item also earns a share of the mean score of every
child of its owning node, so early evidence that feeds later reasoning keeps
its weight.  The token budget is split across the top-K surviving items in
proportion to their reinforced scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import DomainError

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, typing only
    from .graph import MemoryGraph

S_TOTAL_DEFAULT = 5 * 256 * 32 * 32  # 1,310,720 vision tokens
PATCH_SIDE_DEFAULT = 32


class EnergyError(DomainError):
    code = "EnergyError"


class BadPriority(EnergyError):
    code = "BadPriority"


class ClockInconsistency(EnergyError):
    code = "ClockInconsistency"


class ItemModality(str, Enum):
    TEXT = "text"
    IMAGE = "image"
    VIDEO_FRAME = "video_frame"


@dataclass
class VisualItem:
    """One entry of the graph's memory bank.

    ``ordinal`` is the item's position in the bank, ``owner_node``/``slot``
    locate it on the graph (identity fields may be -1 on seeds that have not
    been attached yet), ``payload_ref`` is an opaque pointer into the asset
    store; raw pixels never live here.
    """

    ordinal: int
    owner_node: int
    slot: int
    modality: ItemModality
    payload_ref: str
    saliency: int = 1
    priority: int = 3
    source_timestamp_s: float | None = None
    allocated_budget: int = 0
    dropped: bool = False

    def __post_init__(self) -> None:
        if self.saliency not in (0, 1):
            raise ValueError(f"saliency must be 0 or 1, got {self.saliency!r}")
        if not isinstance(self.priority, int) or isinstance(self.priority, bool) \
                or not 1 <= self.priority <= 5:
            raise ValueError(f"priority must be an integer in [1, 5], got {self.priority!r}")
        if self.allocated_budget < 0:
            raise ValueError("allocated_budget must be >= 0")
        if self.dropped and self.allocated_budget != 0:
            raise ValueError("dropped items carry no budget")

    def to_dict(self) -> dict:
        record = {
            "ordinal": self.ordinal,
            "owner_node": self.owner_node,
            "slot": self.slot,
            "modality": self.modality.value,
            "payload_ref": self.payload_ref,
            "saliency": self.saliency,
            "priority": self.priority,
            "allocated_budget": self.allocated_budget,
            "dropped": self.dropped,
        }
        if self.source_timestamp_s is not None:
            record["source_timestamp_s"] = self.source_timestamp_s
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "VisualItem":
        return cls(
            ordinal=record["ordinal"],
            owner_node=record["owner_node"],
            slot=record["slot"],
            modality=ItemModality(record["modality"]),
            payload_ref=record["payload_ref"],
            saliency=record["saliency"],
            priority=record["priority"],
            source_timestamp_s=record.get("source_timestamp_s"),
            allocated_budget=record["allocated_budget"],
            dropped=record["dropped"],
        )


@dataclass(frozen=True)
class EnergyParams:
    """Knobs for scoring and allocation.

    ``uniform_mode`` bypasses proportional allocation and splits the budget
    evenly over retained items (the training-time configuration; dynamic
    allocation is an inference-time feature).
    """

    lambda_decay: float = 0.1
    gamma_feedback: float = 0.3
    s_total: int = S_TOTAL_DEFAULT
    top_k: int = 5
    uniform_mode: bool = False

    def __post_init__(self) -> None:
        for name in ("lambda_decay", "gamma_feedback"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
        if self.s_total <= 0:
            raise ValueError(f"s_total must be > 0, got {self.s_total!r}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k!r}")


@dataclass(frozen=True)
class EnergyReport:
    """Scores from one evaluation pass: per-item intrinsic and reinforced
    values plus the per-node mean used for parent feedback."""

    intrinsic: dict[int, float]
    total: dict[int, float]
    node_mean: dict[int, float]
    evaluation_step: int

    def to_dict(self) -> dict:
        return {
            "evaluation_step": self.evaluation_step,
            "intrinsic": {str(k): v for k, v in sorted(self.intrinsic.items())},
            "total": {str(k): v for k, v in sorted(self.total.items())},
            "node_mean": {str(k): v for k, v in sorted(self.node_mean.items())},
        }


@dataclass(frozen=True)
class BudgetAssignment:
    """Outcome of one shaping pass: the ranked retained ordinals, their token
    budgets, leftover tokens from floor rounding, and the step stamp used to
    detect staleness."""

    retained: tuple[int, ...]
    budgets: dict[int, int]
    slack: int
    step: int

    def to_dict(self) -> dict:
        return {
            "retained": list(self.retained),
            "budgets": [[ordinal, self.budgets[ordinal]] for ordinal in self.retained],
            "slack": self.slack,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "BudgetAssignment":
        return cls(
            retained=tuple(record["retained"]),
            budgets={ordinal: budget for ordinal, budget in record["budgets"]},
            slack=record["slack"],
            step=record["step"],
        )


def normalize_priority(priority: int) -> float:
    """Map the 1-5 priority score onto [0, 1] affinely: (p - 1) / 4."""
    if not isinstance(priority, int) or isinstance(priority, bool) \
            or not 1 <= priority <= 5:
        raise BadPriority(f"priority must be an integer in [1, 5], got {priority!r}")
    return (priority - 1) / 4.0


def _intrinsic(item: VisualItem, age: int, out_degree: int, params: EnergyParams) -> float:
    return (
        normalize_priority(item.priority)
        * (1 + out_degree)
        * math.exp(-params.lambda_decay * age)
    )


def intrinsic_energy(item: VisualItem, graph: "MemoryGraph", params: EnergyParams) -> float:
    """Base importance of one live item: priority x structural centrality of
    its owning node x exponential decay over elapsed steps."""
    if item.dropped:
        raise EnergyError(f"item {item.ordinal} is dropped and has no energy")
    owner = graph.nodes[item.owner_node]
    if graph.step < owner.created_step:
        raise ClockInconsistency(
            f"graph step {graph.step} precedes node creation step {owner.created_step}"
        )
    age = graph.step - owner.created_step
    return _intrinsic(item, age, graph.out_degree(item.owner_node), params)


def recursive_energy(graph: "MemoryGraph", params: EnergyParams) -> EnergyReport:
    """Score every saliency-passing item, reinforcing intrinsic values with
    feedback from descendant nodes.

    Nodes are visited in reverse index order; every edge points from a lower
    to a higher index, so children are always scored before their parents and
    each node's mean is computed exactly once.  A node without scoreable
    items contributes a mean of 0.  Items evicted by an earlier top-K pass
    keep their scores (the saliency gate is the only hard exclusion); this
    keeps repeated shaping at one step stable.
    """
    children: list[list[int]] = [[] for _ in graph.nodes]
    for node in graph.nodes:
        for parent in node.parent_indices:
            children[parent].append(node.index)

    by_owner: dict[int, list[VisualItem]] = {}
    for item in graph.memory_bank:
        if item.saliency == 1:
            by_owner.setdefault(item.owner_node, []).append(item)

    intrinsic: dict[int, float] = {}
    total: dict[int, float] = {}
    node_mean: dict[int, float] = {}
    for node in reversed(graph.nodes):
        feedback = params.gamma_feedback * sum(
            node_mean[child] for child in children[node.index]
        )
        out_degree = len(children[node.index])
        age = graph.step - node.created_step
        omegas = []
        for item in sorted(by_owner.get(node.index, []), key=lambda it: it.slot):
            base = _intrinsic(item, age, out_degree, params)
            omega = base + feedback
            intrinsic[item.ordinal] = base
            total[item.ordinal] = omega
            omegas.append(omega)
        node_mean[node.index] = sum(omegas) / len(omegas) if omegas else 0.0
    return EnergyReport(intrinsic, total, node_mean, graph.step)


def select_top_k(
    report: EnergyReport,
    params: EnergyParams,
    items: Iterable[VisualItem],
) -> tuple[int, ...]:
    """Rank candidate items by (score desc, owner node asc, slot asc) and
    keep at most ``top_k`` of them."""
    ranked = sorted(
        items,
        key=lambda it: (-report.total[it.ordinal], it.owner_node, it.slot),
    )
    return tuple(it.ordinal for it in ranked[: params.top_k])


def allocate_budget(
    retained: Sequence[int],
    report: EnergyReport,
    params: EnergyParams,
) -> BudgetAssignment:
    """Split the total token budget over the retained items, floored:
    b = floor(s_total * omega / sum(omega)).

    Exact rational arithmetic guarantees the floor never over-allocates.
    Uniform mode, and the degenerate all-zero-score case, split evenly.
    """
    retained = tuple(retained)
    if not retained:
        return BudgetAssignment((), {}, params.s_total, report.evaluation_step)
    weight_sum = sum(Fraction(report.total[ordinal]) for ordinal in retained)
    if params.uniform_mode or weight_sum <= 0:
        share = params.s_total // len(retained)
        budgets = {ordinal: share for ordinal in retained}
    else:
        budgets = {
            ordinal: int(Fraction(params.s_total) * Fraction(report.total[ordinal]) / weight_sum)
            for ordinal in retained
        }
    slack = params.s_total - sum(budgets.values())
    return BudgetAssignment(retained, budgets, slack, report.evaluation_step)


def shape_memory(graph: "MemoryGraph", params: EnergyParams) -> BudgetAssignment:
    """One full shaping pass over the memory bank, with write-back.

    Saliency-0 items are dropped outright before anything is ranked.  The
    remaining live items are scored, the top-K survive, everything else is
    evicted (permanently: evicted items never re-enter a later retained set),
    and budgets are written into the bank.  Re-running at an unchanged step
    reproduces the same assignment.
    """
    for item in graph.memory_bank:
        if item.saliency == 0 and not item.dropped:
            item.dropped = True
            item.allocated_budget = 0

    report = recursive_energy(graph, params)
    live = [item for item in graph.memory_bank if not item.dropped]
    retained = select_top_k(report, params, live)
    assignment = allocate_budget(retained, report, params)

    retained_set = set(retained)
    for item in live:
        if item.ordinal in retained_set:
            item.allocated_budget = assignment.budgets[item.ordinal]
        else:
            item.dropped = True
            item.allocated_budget = 0
    return assignment


def budget_to_resolution(budget: int, patch_side: int = PATCH_SIDE_DEFAULT) -> tuple[int, int]:
    """Largest near-square patch grid whose patch count fits the budget,
    returned as (width, height) in pixels.

    Columns take floor(sqrt(budget)); rows absorb the remainder, so height
    is always >= width. A budget below one patch yields (0, 0).
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if patch_side <= 0:
        raise ValueError("patch_side must be > 0")
    cols = math.isqrt(budget)
    if cols == 0:
        return (0, 0)
    rows = budget // cols
    return (cols * patch_side, rows * patch_side)
