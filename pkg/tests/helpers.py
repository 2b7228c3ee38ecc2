"""Independent oracles and random-structure generators shared by the tests.

Everything here is deliberately written straight from the definitions, with
different code shapes than the implementations it checks (top-down recursion
vs. bottom-up sweep, per-node DFS vs. reverse BFS, pure-Python dot products
vs. the numpy matrix path).
"""

from __future__ import annotations

import math
import random
from collections import defaultdict

from graphmem.energy import EnergyParams, ItemModality, VisualItem
from graphmem.graph import MemoryGraph, NodeKind, new_graph
from graphmem.protocol import (
    Answer,
    Memorize,
    MemorizeDecision,
    Retrieve,
    serialize_action,
)

# -- energy oracle -----------------------------------------------------------


def naive_omega(graph: MemoryGraph, params: EnergyParams) -> dict[int, float]:
    """Definitional top-down evaluation of the reinforced score, without
    memoization: every node mean is recomputed on demand."""
    children: dict[int, list[int]] = defaultdict(list)
    for node in graph.nodes:
        for parent in node.parent_indices:
            children[parent].append(node.index)
    items_of: dict[int, list[VisualItem]] = defaultdict(list)
    for item in graph.memory_bank:
        if item.saliency == 1:
            items_of[item.owner_node].append(item)

    def intrinsic(item: VisualItem) -> float:
        owner = graph.nodes[item.owner_node]
        degree = sum(1 for n in graph.nodes if item.owner_node in n.parent_indices)
        priority_hat = (item.priority - 1) / 4.0
        age = graph.step - owner.created_step
        return priority_hat * (1 + degree) * math.exp(-params.lambda_decay * age)

    def omega(item: VisualItem) -> float:
        feedback = sum(node_mean(child) for child in children[item.owner_node])
        return intrinsic(item) + params.gamma_feedback * feedback

    def node_mean(index: int) -> float:
        items = items_of[index]
        if not items:
            return 0.0
        return sum(omega(item) for item in items) / len(items)

    return {
        item.ordinal: omega(item)
        for item in graph.memory_bank
        if item.saliency == 1
    }


def naive_intrinsic(graph: MemoryGraph, params: EnergyParams) -> dict[int, float]:
    children_count: dict[int, int] = defaultdict(int)
    for node in graph.nodes:
        for parent in node.parent_indices:
            children_count[parent] += 1
    out = {}
    for item in graph.memory_bank:
        if item.saliency != 1:
            continue
        owner = graph.nodes[item.owner_node]
        out[item.ordinal] = (
            (item.priority - 1) / 4.0
            * (1 + children_count[item.owner_node])
            * math.exp(-params.lambda_decay * (graph.step - owner.created_step))
        )
    return out


# -- reachability oracle -------------------------------------------------------


def forward_reachability_path(graph: MemoryGraph) -> set[int]:
    """A node is on the critical path iff a directed path from it reaches the
    answer node; checked by per-node DFS over child edges."""
    answer = next((n.index for n in graph.nodes if n.kind is NodeKind.ANSWER), None)
    if answer is None:
        return set()
    children: dict[int, list[int]] = defaultdict(list)
    for node in graph.nodes:
        for parent in node.parent_indices:
            children[parent].append(node.index)

    def reaches_answer(start: int) -> bool:
        stack, seen = [start], set()
        while stack:
            current = stack.pop()
            if current == answer:
                return True
            if current in seen:
                continue
            seen.add(current)
            stack.extend(children[current])
        return False

    return {node.index for node in graph.nodes if reaches_answer(node.index)}


# -- random structures ---------------------------------------------------------


def path_count(n_nodes: int, parent_sets: list[frozenset[int]]) -> int:
    """Number of root-to-anywhere paths; bounds the cost of the naive
    recursion on a candidate DAG."""
    paths = [0] * n_nodes
    paths[0] = 1
    for index in range(1, n_nodes):
        paths[index] = sum(paths[parent] for parent in parent_sets[index])
    return sum(paths)


def random_graph_with_items(
    rng: random.Random,
    *,
    max_nodes: int = 20,
    max_items_per_node: int = 4,
    max_parents: int = 2,
    max_path_count: int = 200_000,
) -> MemoryGraph:
    """A random legal graph built through the public API, with random bank
    items attached to its search nodes.  Parent fan-in is bounded and dense
    shapes are resampled so the naive oracle stays cheap."""
    while True:
        n_nodes = rng.randint(1, max_nodes)
        parent_sets: list[frozenset[int]] = [frozenset()]
        for index in range(1, n_nodes):
            k = rng.randint(1, min(max_parents, index))
            parent_sets.append(frozenset(rng.sample(range(index), k)))
        if path_count(n_nodes, parent_sets) <= max_path_count:
            break

    graph = new_graph(f"probe query {rng.randint(0, 10**9)}")
    titles = ["root"]
    for index in range(1, n_nodes):
        title = f"n{index}"
        graph.add_search_node(
            title,
            {titles[parent] for parent in parent_sets[index]},
            f"sub-query {index}",
        )
        titles.append(title)

    for index in range(1, n_nodes):
        n_items = rng.randint(0, max_items_per_node)
        refs = []
        for slot in range(n_items):
            item = VisualItem(
                ordinal=len(graph.memory_bank),
                owner_node=index,
                slot=slot,
                modality=rng.choice(list(ItemModality)),
                payload_ref=f"ref://{index}/{slot}",
                saliency=rng.choice([0, 1, 1, 1]),
                priority=rng.randint(1, 5),
            )
            refs.append(graph.append_item(item))
        graph.populate_node(index, f"summary {index}", refs)
    return graph


def random_action(rng: random.Random):
    """A random structurally valid action, including awkward strings."""
    kind = rng.choice(["retrieve", "memorize", "answer"])
    if kind == "retrieve":
        return Retrieve(
            title=random_text(rng, empty_ok=False),
            parent_titles=tuple(random_text(rng, empty_ok=False) for _ in range(rng.randint(1, 3))),
            query=random_text(rng, empty_ok=False),
        )
    if kind == "answer":
        return Answer(
            parent_titles=tuple(random_text(rng, empty_ok=False) for _ in range(rng.randint(1, 3))),
            answer=random_text(rng, empty_ok=False),
        )
    decisions = tuple(
        MemorizeDecision(
            information_id=random_text(rng, empty_ok=False),
            is_useful=rng.random() < 0.5,
            key_timestamps_s=tuple(
                round(rng.uniform(0, 3600), 1) for _ in range(rng.randint(0, 3))
            ),
            priority_score=rng.randint(1, 5),
        )
        for _ in range(rng.randint(0, 4))
    )
    return Memorize(summary=random_text(rng, empty_ok=True), decisions=decisions)


_NASTY = [
    '"',
    "\\",
    "\n",
    "\t",
    "<",
    ">",
    "</tool_call>",
    "<thinking>",
    "{",
    "}",
    "é",
    "中文",
    "\U0001f600",
    " ",
]


def random_text(rng: random.Random, *, empty_ok: bool) -> str:
    parts = []
    for _ in range(rng.randint(0 if empty_ok else 1, 6)):
        if rng.random() < 0.3:
            parts.append(rng.choice(_NASTY))
        else:
            parts.append(
                "".join(rng.choice("abcdefghij XYZ0123") for _ in range(rng.randint(1, 8)))
            )
    text = "".join(parts)
    if not empty_ok and not text.strip():
        text = "x" + text
    return text


def random_response(rng: random.Random) -> str:
    return serialize_action(random_action(rng), random_text(rng, empty_ok=True))


# -- objective oracle ---------------------------------------------------------


def plain_clipped_objective(ratios, advantages, eps) -> float:
    """The unmasked clipped surrogate, straight from the formula."""
    total = sum(len(row) for row in ratios)
    if total == 0:
        return 0.0
    acc = 0.0
    for row, advantage in zip(ratios, advantages):
        for ratio in row:
            clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
            acc += min(ratio * advantage, clipped * advantage)
    return acc / total


def brute_force_mu(reward: int, node_index, critical_path, r_val) -> int:
    """Literal evaluation of the mask indicator expression."""
    if node_index is None:
        return 0
    first = (1 if reward == 1 else 0) * (1 if node_index not in critical_path else 0)
    second = (1 if reward == 0 else 0) * (1 if node_index in r_val else 0)
    return first + second


# -- stub endpoints --------------------------------------------------------------


class StubChatServer:
    """Local chat-completions endpoint replaying canned contents in order;
    records every request payload and auth header."""

    def __init__(self, contents: list[str]):
        import json as _json
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        self.requests: list[dict] = []
        self.auth_headers: list[str | None] = []
        contents_iter = iter(contents)
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                payload = _json.loads(self.rfile.read(length).decode("utf-8"))
                outer.requests.append(payload)
                outer.auth_headers.append(self.headers.get("Authorization"))
                if self.path != "/chat/completions":
                    self.send_response(404)
                    self.end_headers()
                    return
                try:
                    content = next(contents_iter)
                except StopIteration:
                    self.send_response(500)
                    self.end_headers()
                    return
                body = _json.dumps(
                    {"choices": [{"message": {"role": "assistant", "content": content}}]}
                ).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)

    @property
    def base_url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        import threading

        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
        self._thread.join(timeout=5)


# -- cosine oracle --------------------------------------------------------------


def pure_python_topk(vectors: list[list[float]], query: list[float], k: int) -> list[int]:
    """Exhaustive cosine ranking with pure-Python dots and full sort, with the
    same 12-decimal quantization the engine applies before ranking."""
    scored = []
    for position, vector in enumerate(vectors):
        dot = math.fsum(a * b for a, b in zip(vector, query))
        scored.append((round(-dot, 12), position))
    scored.sort()
    return [position for _, position in scored[:k]]
