"""The reasoning-state graph: node lifecycle, validation, critical path,
linearization, structural statistics, and persistence.

The graph is a DAG with exactly one root (index 0), any number of search
nodes, and at most one answer node.  Every edge points from a lower index to
a higher index, so insertion order is a topological order and the graph is
acyclic by construction.  Once an answer node exists the graph is terminal
and refuses further mutation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

from .canon import canonical_dumps, normalize_text
from .energy import VisualItem
from .errors import DomainError

GRAPH_SCHEMA = "memory-graph/1"
ROOT_TITLE = "root"


class GraphError(DomainError):
    code = "GraphError"


class EmptyQuery(GraphError):
    code = "EmptyQuery"


class BadTitle(GraphError):
    code = "BadTitle"


class UnknownParent(GraphError):
    code = "UnknownParent"


class DuplicateTitle(GraphError):
    code = "DuplicateTitle"


class GraphTerminal(GraphError):
    code = "GraphTerminal"


class AlreadyPopulated(GraphError):
    code = "AlreadyPopulated"


class NotASearchNode(GraphError):
    code = "NotASearchNode"


class BadItemRef(GraphError):
    code = "BadItemRef"


class BadIndex(GraphError):
    code = "BadIndex"


class SchemaMismatch(GraphError):
    code = "SchemaMismatch"


class CorruptGraph(GraphError):
    code = "CorruptGraph"


class NodeKind(str, Enum):
    ROOT = "root"
    SEARCH = "search"
    ANSWER = "answer"


@dataclass
class MemoryNode:
    """One epistemic state: where it hangs (parents), what was asked (query),
    what was learned (summary), and which bank items back it up (items)."""

    index: int
    kind: NodeKind
    title: str
    parent_indices: frozenset[int]
    query: str = ""
    summary: str = ""
    items: list[int] = field(default_factory=list)
    created_step: int = 0
    answer_text: str = ""
    populated: bool = False

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind.value,
            "title": self.title,
            "parent_indices": sorted(self.parent_indices),
            "query": self.query,
            "summary": self.summary,
            "items": list(self.items),
            "created_step": self.created_step,
            "answer_text": self.answer_text,
            "populated": self.populated,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "MemoryNode":
        return cls(
            index=record["index"],
            kind=NodeKind(record["kind"]),
            title=record["title"],
            parent_indices=frozenset(record["parent_indices"]),
            query=record["query"],
            summary=record["summary"],
            items=list(record["items"]),
            created_step=record["created_step"],
            answer_text=record["answer_text"],
            populated=record["populated"],
        )


@dataclass
class MemoryGraph:
    root_query: str
    nodes: list[MemoryNode] = field(default_factory=list)
    memory_bank: list[VisualItem] = field(default_factory=list)
    step: int = 0

    # -- reads ------------------------------------------------------------

    @property
    def is_terminal(self) -> bool:
        return any(node.kind is NodeKind.ANSWER for node in self.nodes)

    def node_at(self, index: int) -> MemoryNode:
        if not 0 <= index < len(self.nodes):
            raise BadIndex(f"no node at index {index}")
        return self.nodes[index]

    def resolve_title(self, title: str) -> int:
        for node in self.nodes:
            if node.title == title:
                return node.index
        raise UnknownParent(f"no node titled {title!r}")

    def out_degree(self, index: int) -> int:
        """Number of edges leaving the node, counting edges into every node
        kind including the answer node."""
        self.node_at(index)
        return sum(1 for node in self.nodes if index in node.parent_indices)

    def critical_path(self) -> set[int]:
        """Indices of all nodes with a directed path to the answer node,
        answer included.  Empty when no answer node exists."""
        answer = next((n for n in self.nodes if n.kind is NodeKind.ANSWER), None)
        if answer is None:
            return set()
        reached = {answer.index}
        stack = [answer.index]
        while stack:
            for parent in self.nodes[stack.pop()].parent_indices:
                if parent not in reached:
                    reached.add(parent)
                    stack.append(parent)
        return reached

    def duplicate_query_count(self) -> int:
        """Search nodes whose normalized query repeats an earlier node's
        (case-folded, whitespace-collapsed)."""
        seen: set[str] = set()
        duplicates = 0
        for node in self.nodes:
            if node.kind is not NodeKind.SEARCH:
                continue
            key = normalize_text(node.query)
            if key in seen:
                duplicates += 1
            else:
                seen.add(key)
        return duplicates

    def linearize(self) -> str:
        """Deterministic index-ordered text rendering of the whole graph:
        one canonical JSON record per node, preceded by a header line.

        Bank items appear under their owning node with their current budget
        and opaque payload reference; raw visual payloads never appear.
        Byte-identical across runs for identical graphs, and distinct graphs
        render distinctly (all node and item fields participate; items not
        yet attached to a node show up only in the header's bank count).
        """
        lines = [
            canonical_dumps(
                {
                    "bank": len(self.memory_bank),
                    "nodes": len(self.nodes),
                    "root_query": self.root_query,
                    "schema": GRAPH_SCHEMA,
                    "step": self.step,
                }
            )
        ]
        for node in self.nodes:
            record: dict = {
                "index": node.index,
                "kind": node.kind.value,
                "title": node.title,
                "parents": [self.nodes[p].title for p in sorted(node.parent_indices)],
                "created_step": node.created_step,
            }
            if node.kind is NodeKind.ROOT:
                record["query"] = node.query
            elif node.kind is NodeKind.SEARCH:
                record["query"] = node.query
                record["populated"] = node.populated
                record["summary"] = node.summary
                record["items"] = [self._item_record(k) for k in node.items]
            else:
                record["answer"] = node.answer_text
            lines.append(canonical_dumps(record))
        return "\n".join(lines) + "\n"

    def _item_record(self, ordinal: int) -> dict:
        item = self.memory_bank[ordinal]
        record = {
            "budget": item.allocated_budget,
            "dropped": item.dropped,
            "modality": item.modality.value,
            "ordinal": item.ordinal,
            "priority": item.priority,
            "ref": item.payload_ref,
            "saliency": item.saliency,
            "slot": item.slot,
        }
        if item.source_timestamp_s is not None:
            record["ts"] = item.source_timestamp_s
        return record

    # -- mutations (single writer) ----------------------------------------

    def add_search_node(self, title: str, parent_titles: Iterable[str], query: str) -> int:
        if self.is_terminal:
            raise GraphTerminal("graph already has an answer node")
        if not title:
            raise BadTitle("search node title must be non-empty")
        if any(node.title == title for node in self.nodes):
            raise DuplicateTitle(f"title already in use: {title!r}")
        parents = frozenset(self.resolve_title(t) for t in parent_titles)
        if not parents:
            raise UnknownParent("a search node needs at least one parent")
        self.step += 1
        node = MemoryNode(
            index=len(self.nodes),
            kind=NodeKind.SEARCH,
            title=title,
            parent_indices=parents,
            query=query,
            created_step=self.step,
        )
        self.nodes.append(node)
        self.validate()
        return node.index

    def populate_node(self, index: int, summary: str, item_refs: Iterable[int]) -> None:
        if self.is_terminal:
            raise GraphTerminal("graph already has an answer node")
        node = self.node_at(index)
        if node.kind is not NodeKind.SEARCH:
            raise NotASearchNode(f"node {index} is a {node.kind.value} node")
        if node.populated:
            raise AlreadyPopulated(f"node {index} was already populated")
        refs = list(item_refs)
        for ref in refs:
            if not 0 <= ref < len(self.memory_bank):
                raise BadItemRef(f"no memory bank item at ordinal {ref}")
        node.summary = summary
        node.items = refs
        node.populated = True
        self.validate()

    def add_answer_node(self, parent_titles: Iterable[str], answer: str) -> int:
        if self.is_terminal:
            raise GraphTerminal("graph already has an answer node")
        parents = frozenset(self.resolve_title(t) for t in parent_titles)
        if not parents:
            raise UnknownParent("an answer node needs at least one parent")
        node = MemoryNode(
            index=len(self.nodes),
            kind=NodeKind.ANSWER,
            title="",
            parent_indices=parents,
            answer_text=answer,
            created_step=self.step,
        )
        self.nodes.append(node)
        self.validate()
        return node.index

    def append_item(self, item: VisualItem) -> int:
        """Append a fully-identified item to the memory bank."""
        if self.is_terminal:
            raise GraphTerminal("graph already has an answer node")
        if item.ordinal != len(self.memory_bank):
            raise BadItemRef(
                f"item ordinal {item.ordinal} does not match bank position {len(self.memory_bank)}"
            )
        self.node_at(item.owner_node)
        self.memory_bank.append(item)
        return item.ordinal

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        """Assert the structural invariants; raises CorruptGraph on any
        violation.  Runs after every mutation and on load."""
        if not self.nodes or self.nodes[0].kind is not NodeKind.ROOT:
            raise CorruptGraph("node 0 must be the root")
        answers = 0
        titles: set[str] = set()
        max_created = 0
        for position, node in enumerate(self.nodes):
            if node.index != position:
                raise CorruptGraph(f"node index {node.index} at position {position}")
            if node.kind is NodeKind.ROOT and position != 0:
                raise CorruptGraph("root must be unique and at index 0")
            if node.kind is NodeKind.ANSWER:
                answers += 1
            if node.parent_indices and max(node.parent_indices) >= node.index:
                raise CorruptGraph(f"node {node.index} has a parent at or above its own index")
            if min(node.parent_indices, default=0) < 0:
                raise CorruptGraph(f"node {node.index} has a negative parent index")
            if node.kind is NodeKind.ROOT and node.parent_indices:
                raise CorruptGraph("root must have no parents")
            if node.kind is not NodeKind.ROOT and not node.parent_indices:
                raise CorruptGraph(f"node {node.index} must have at least one parent")
            if node.kind is not NodeKind.ANSWER:
                if node.title in titles:
                    raise CorruptGraph(f"duplicate title {node.title!r}")
                titles.add(node.title)
            max_created = max(max_created, node.created_step)
            for ref in node.items:
                if not 0 <= ref < len(self.memory_bank):
                    raise CorruptGraph(f"node {node.index} references missing item {ref}")
        if answers > 1:
            raise CorruptGraph("at most one answer node is allowed")
        if self.step < max_created:
            raise CorruptGraph("graph step is behind a node creation step")
        for position, item in enumerate(self.memory_bank):
            if item.ordinal != position:
                raise CorruptGraph(f"bank item ordinal {item.ordinal} at position {position}")
            if not 0 <= item.owner_node < len(self.nodes):
                raise CorruptGraph(f"bank item {position} has unknown owner {item.owner_node}")

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": GRAPH_SCHEMA,
            "root_query": self.root_query,
            "step": self.step,
            "nodes": [node.to_dict() for node in self.nodes],
            "memory_bank": [item.to_dict() for item in self.memory_bank],
        }

    @classmethod
    def from_dict(cls, record: dict) -> "MemoryGraph":
        if record.get("schema") != GRAPH_SCHEMA:
            raise SchemaMismatch(
                f"expected schema {GRAPH_SCHEMA!r}, got {record.get('schema')!r}"
            )
        try:
            graph = cls(
                root_query=record["root_query"],
                nodes=[MemoryNode.from_dict(n) for n in record["nodes"]],
                memory_bank=[VisualItem.from_dict(i) for i in record["memory_bank"]],
                step=record["step"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptGraph(f"malformed graph record: {exc}") from exc
        graph.validate()
        return graph


def new_graph(root_query: str) -> MemoryGraph:
    """Fresh graph holding only the root node for ``root_query`` at step 0."""
    if not root_query or not root_query.strip():
        raise EmptyQuery("root query must be non-empty")
    graph = MemoryGraph(root_query=root_query)
    graph.nodes.append(
        MemoryNode(
            index=0,
            kind=NodeKind.ROOT,
            title=ROOT_TITLE,
            parent_indices=frozenset(),
            query=root_query,
        )
    )
    graph.validate()
    return graph


def save_graph(graph: MemoryGraph, path: str | Path) -> None:
    Path(path).write_text(canonical_dumps(graph.to_dict()) + "\n", encoding="utf-8")


def load_graph(path: str | Path) -> MemoryGraph:
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptGraph(f"not a JSON graph file: {exc}") from exc
    if not isinstance(record, dict):
        raise CorruptGraph("graph file must hold a JSON object")
    return MemoryGraph.from_dict(record)
