"""Episode driver: the reason -> retrieve -> perceive -> shape loop.

Each cycle shapes the memory bank at the current step, renders the prompt
from the shaped graph, asks the policy for an action, and applies it.  A
retrieve action spawns a skeletal search node and immediately triggers a
second policy call that must memorize the retrieved observations before
anything else happens (the action sequence of a legal episode always matches
``(retrieve memorize)* (answer | truncation)``).  The whole loop is
deterministic under a scripted policy: corpus + config + script fully
determine the trajectory bytes.
"""

from __future__ import annotations

import json
import os
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import requests

from .canon import canonical_dumps, normalize_text
from .energy import BudgetAssignment, EnergyParams, ItemModality, VisualItem, shape_memory
from .errors import DomainError
from .graph import GraphError, MemoryGraph, NodeKind, new_graph
from .protocol import (
    Action,
    Answer,
    FORMAT_REMINDER,
    DEFAULT_INSTRUCTION,
    MEMORIZE_PROMPT,
    Memorize,
    ParsedResponse,
    PromptBundle,
    ProtocolError,
    Retrieve,
    SchemaViolation,
    action_payload,
    parse_response,
    render_context,
    render_observation,
)
from .retrieval import Corpus, Modality, Observation, resolve_keyframes, search

SESSION_SCHEMA = "session/1"
TRAJECTORY_SCHEMA = "trajectory/1"

TOKEN_ENV_DEFAULT = "GRAPHMEM_API_TOKEN"


class EpisodeError(DomainError):
    code = "RuntimeError"


class PolicyProtocolError(EpisodeError):
    code = "PolicyProtocolError"


class IllegalTransition(EpisodeError):
    code = "IllegalTransition"

    def __init__(self, expected: str, got: str):
        super().__init__(f"expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class JudgeError(EpisodeError):
    code = "JudgeError"


class SessionSchemaMismatch(EpisodeError):
    code = "SessionSchemaMismatch"


class CorruptSession(EpisodeError):
    code = "CorruptSession"


# -- policies ---------------------------------------------------------------


class Policy(ABC):
    """Action source.  ``followup`` carries extra conversation turns beyond
    the prompt bundle as (role, content) pairs; the memorize turn passes the
    assistant's retrieve reply plus the rendered observations."""

    @abstractmethod
    def act(self, bundle: PromptBundle, followup: Sequence[tuple[str, str]] = ()) -> str:
        raise NotImplementedError


class ScriptedPolicy(Policy):
    """Deterministic test double replaying a fixed response list."""

    def __init__(self, responses: Sequence[str]):
        self._responses = list(responses)
        self._cursor = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedPolicy":
        responses = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(responses, list) or not all(isinstance(r, str) for r in responses):
            raise PolicyProtocolError(f"{path}: script must be a JSON list of strings")
        return cls(responses)

    @property
    def calls(self) -> int:
        return self._cursor

    def seek(self, n: int) -> None:
        """Skip the first ``n`` responses (used when resuming a session)."""
        if not 0 <= n <= len(self._responses):
            raise PolicyProtocolError(f"cannot seek script to call {n}")
        self._cursor = n

    def act(self, bundle: PromptBundle, followup: Sequence[tuple[str, str]] = ()) -> str:
        if self._cursor >= len(self._responses):
            raise PolicyProtocolError("scripted policy ran out of responses")
        response = self._responses[self._cursor]
        self._cursor += 1
        return response


def bundle_messages(
    bundle: PromptBundle, followup: Sequence[tuple[str, str]] = ()
) -> list[dict]:
    messages = [
        {"role": "system", "content": bundle.instruction},
        {"role": "user", "content": bundle.user_text()},
    ]
    messages.extend({"role": role, "content": content} for role, content in followup)
    return messages


class ChatCompletionsClient:
    """Thin client for a chat-completions style HTTP endpoint.  The auth
    token is read from an environment variable; raw request/response pairs
    are recorded for audit and replay."""

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        token_env: str = TOKEN_ENV_DEFAULT,
        timeout_s: float = 60.0,
        max_in_flight: int = 8,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.token_env = token_env
        self.timeout_s = timeout_s
        self.transcripts: list[dict] = []
        self._gate = threading.Semaphore(max_in_flight)
        self._session = session or requests.Session()

    def complete(self, messages: list[dict]) -> str:
        payload = {"model": self.model, "messages": messages}
        headers = {}
        token = os.environ.get(self.token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        with self._gate:
            response = self._session.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout_s,
            )
        response.raise_for_status()
        data = response.json()
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise PolicyProtocolError(f"malformed chat-completions response: {exc}") from exc
        self.transcripts.append({"request": payload, "response": data})
        return content


class RemotePolicy(Policy):
    """Policy backed by a remote chat-completions endpoint."""

    def __init__(self, client: ChatCompletionsClient):
        self.client = client

    @property
    def transcripts(self) -> list[dict]:
        return self.client.transcripts

    def act(self, bundle: PromptBundle, followup: Sequence[tuple[str, str]] = ()) -> str:
        return self.client.complete(bundle_messages(bundle, followup))


# -- judging ----------------------------------------------------------------


JUDGE_SYSTEM_PROMPT = """\
You are an expert evaluation system for a question answering chatbot.
You are given the query, a reference answer, and a generated answer.
Your task is to evaluate the correctness of the generated answer.
Note that the generated answer may contain additional information beyond the
reference answer.
Respond in exactly this format:
<judge>True or False</judge>
"""

_JUDGE_RE = re.compile(r"<judge>\s*(True|False)\s*</judge>")


def judge_exact(answer: str, gold: str) -> int:
    """Binary reward by normalized string equality (case-fold, trim,
    collapse whitespace)."""
    return int(normalize_text(answer) == normalize_text(gold))


class ExactMatchJudge:
    def judge(self, query: str, gold: str, answer: str) -> int:
        return judge_exact(answer, gold)


class RemoteJudge:
    """Sends the grading prompt to a judge endpoint and parses the
    ``<judge>True|False</judge>`` verdict."""

    def __init__(self, client: ChatCompletionsClient):
        self.client = client

    def judge(self, query: str, gold: str, answer: str) -> int:
        messages = [
            {"role": "system", "content": JUDGE_SYSTEM_PROMPT},
            {
                "role": "user",
                "content": (
                    f"Query: {query}\nReference Answer: {gold}\nGenerated Answer: {answer}"
                ),
            },
        ]
        try:
            content = self.client.complete(messages)
        except (requests.RequestException, PolicyProtocolError) as exc:
            raise JudgeError(f"judge endpoint failed: {exc}") from exc
        match = _JUDGE_RE.search(content)
        if match is None:
            raise JudgeError(f"no <judge> verdict in response: {content!r}")
        return 1 if match.group(1) == "True" else 0


# -- episode state ------------------------------------------------------------


@dataclass
class EpisodeConfig:
    t_max: int = 20
    energy: EnergyParams = field(default_factory=EnergyParams)
    search_k: int = 5
    n_frames: int = 8
    instruction: str = DEFAULT_INSTRUCTION

    def __post_init__(self) -> None:
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max!r}")
        if self.search_k < 1:
            raise ValueError(f"search_k must be >= 1, got {self.search_k!r}")
        if self.n_frames < 1:
            raise ValueError(f"n_frames must be >= 1, got {self.n_frames!r}")


@dataclass
class CycleRecord:
    """Everything one cycle produced: the prompt fingerprint, the raw and
    parsed responses of both turns, the observations, and the shaping
    assignment in force when the prompt was rendered."""

    cycle: int
    step: int
    prompt_digest: str
    prompt_chars: int
    response: str
    action: dict
    kind: str  # "retrieve" | "answer"
    node_index: int
    assignment: BudgetAssignment
    observations: tuple[Observation, ...] = ()
    memorize_prompt_chars: int = 0
    memorize_response: str = ""
    memorize_action: dict | None = None

    def to_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "step": self.step,
            "prompt_digest": self.prompt_digest,
            "prompt_chars": self.prompt_chars,
            "response": self.response,
            "action": self.action,
            "kind": self.kind,
            "node_index": self.node_index,
            "assignment": self.assignment.to_dict(),
            "observations": [obs.to_dict() for obs in self.observations],
            "memorize_prompt_chars": self.memorize_prompt_chars,
            "memorize_response": self.memorize_response,
            "memorize_action": self.memorize_action,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "CycleRecord":
        return cls(
            cycle=record["cycle"],
            step=record["step"],
            prompt_digest=record["prompt_digest"],
            prompt_chars=record["prompt_chars"],
            response=record["response"],
            action=record["action"],
            kind=record["kind"],
            node_index=record["node_index"],
            assignment=BudgetAssignment.from_dict(record["assignment"]),
            observations=tuple(Observation.from_dict(o) for o in record["observations"]),
            memorize_prompt_chars=record["memorize_prompt_chars"],
            memorize_response=record["memorize_response"],
            memorize_action=record["memorize_action"],
        )


@dataclass
class PendingSearch:
    """A search node whose observations await the memorize turn.

    Beyond the observations, it carries everything needed to replay the
    memorize turn after a mid-cycle checkpoint: the retrieve-turn transcript
    and the exact bundle (context + attachments) that turn was rendered from,
    which predates the node addition and cannot be re-rendered from the
    mutated graph.
    """

    node_index: int
    observations: tuple[Observation, ...]
    offered_ids: tuple[str, ...]
    observation_text: str
    prompt_digest: str = ""
    prompt_chars: int = 0
    response: str = ""
    action: dict = field(default_factory=dict)
    assignment: BudgetAssignment | None = None
    context: str = ""
    attachments: tuple[tuple[int, int, str], ...] = ()

    def to_dict(self) -> dict:
        return {
            "node_index": self.node_index,
            "observations": [obs.to_dict() for obs in self.observations],
            "offered_ids": list(self.offered_ids),
            "observation_text": self.observation_text,
            "prompt_digest": self.prompt_digest,
            "prompt_chars": self.prompt_chars,
            "response": self.response,
            "action": self.action,
            "assignment": None if self.assignment is None else self.assignment.to_dict(),
            "context": self.context,
            "attachments": [list(entry) for entry in self.attachments],
        }

    @classmethod
    def from_dict(cls, record: dict) -> "PendingSearch":
        return cls(
            node_index=record["node_index"],
            observations=tuple(Observation.from_dict(o) for o in record["observations"]),
            offered_ids=tuple(record["offered_ids"]),
            observation_text=record["observation_text"],
            prompt_digest=record["prompt_digest"],
            prompt_chars=record["prompt_chars"],
            response=record["response"],
            action=record["action"],
            assignment=(
                None
                if record["assignment"] is None
                else BudgetAssignment.from_dict(record["assignment"])
            ),
            context=record["context"],
            attachments=tuple(
                (ordinal, budget, ref) for ordinal, budget, ref in record["attachments"]
            ),
        )


@dataclass
class SessionState:
    """Checkpointable episode state: the graph (which owns the memory bank),
    completed cycle records, any half-finished cycle, and the number of
    policy calls made so far (used to reposition a scripted policy)."""

    graph: MemoryGraph
    records: list[CycleRecord] = field(default_factory=list)
    pending: PendingSearch | None = None
    policy_calls: int = 0
    truncated: bool = False

    @classmethod
    def new(cls, query: str) -> "SessionState":
        return cls(graph=new_graph(query))


@dataclass
class Trajectory:
    """One finished (or truncated) episode, ready for judging, statistics,
    and trainer-side segmentation."""

    query: str
    records: list[CycleRecord]
    graph: MemoryGraph
    answer_text: str | None
    truncated: bool
    reward: int | None = None

    def to_jsonl(self) -> str:
        meta = {
            "kind": "meta",
            "schema": TRAJECTORY_SCHEMA,
            "query": self.query,
            "answer": self.answer_text,
            "truncated": self.truncated,
            "reward": self.reward,
            "graph": self.graph.to_dict(),
        }
        lines = [canonical_dumps(meta)]
        for record in self.records:
            lines.append(canonical_dumps({"kind": "cycle", **record.to_dict()}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Trajectory":
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise CorruptSession("empty trajectory file")
        try:
            meta = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise CorruptSession(f"bad trajectory meta line: {exc}") from exc
        if meta.get("kind") != "meta" or meta.get("schema") != TRAJECTORY_SCHEMA:
            raise SessionSchemaMismatch(
                f"expected a {TRAJECTORY_SCHEMA!r} meta line, got {meta.get('schema')!r}"
            )
        try:
            records = [CycleRecord.from_dict(json.loads(line)) for line in lines[1:]]
            return cls(
                query=meta["query"],
                records=records,
                graph=MemoryGraph.from_dict(meta["graph"]),
                answer_text=meta["answer"],
                truncated=meta["truncated"],
                reward=meta["reward"],
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise CorruptSession(f"malformed trajectory record: {exc}") from exc


def save_trajectory(trajectory: Trajectory, path: str | Path) -> None:
    Path(path).write_text(trajectory.to_jsonl(), encoding="utf-8")


def load_trajectory(path: str | Path) -> Trajectory:
    return Trajectory.from_jsonl(Path(path).read_text(encoding="utf-8"))


# -- transitions --------------------------------------------------------------


def _action_kind(action: Action) -> str:
    if isinstance(action, Retrieve):
        return "retrieve"
    if isinstance(action, Memorize):
        return "memorize"
    return "answer"


def _item_ref_for(observation: Observation) -> str:
    return observation.asset_ref or f"corpus://{observation.source_id}"


def _seed_items(
    state: SessionState, action: Memorize, pending: PendingSearch
) -> list[int]:
    """Turn useful memorize decisions into bank items: one per useful text or
    image observation, one per resolved keyframe for videos."""
    by_id = {obs.id: obs for obs in pending.observations}
    refs: list[int] = []
    slot = 0
    for decision in action.decisions:
        if not decision.is_useful:
            continue
        obs = by_id[decision.information_id]
        if obs.modality is Modality.VIDEO:
            seeds = resolve_keyframes(obs, decision.key_timestamps_s)
        else:
            modality = ItemModality.TEXT if obs.modality is Modality.TEXT else ItemModality.IMAGE
            seeds = [
                VisualItem(
                    ordinal=-1,
                    owner_node=-1,
                    slot=-1,
                    modality=modality,
                    payload_ref=_item_ref_for(obs),
                )
            ]
        for seed in seeds:
            item = replace(
                seed,
                ordinal=len(state.graph.memory_bank),
                owner_node=pending.node_index,
                slot=slot,
                saliency=1,
                priority=decision.priority_score,
            )
            refs.append(state.graph.append_item(item))
            slot += 1
    return refs


def apply_action(
    state: SessionState,
    action: Action,
    corpus: Corpus,
    config: EpisodeConfig,
) -> SessionState:
    """Apply one parsed action to the session state, enforcing the episode
    state machine: a retrieve must be followed by a memorize before any other
    action, and nothing follows an answer."""
    if isinstance(action, Retrieve):
        if state.pending is not None:
            raise IllegalTransition("memorize", "retrieve")
        if state.graph.is_terminal:
            raise IllegalTransition("nothing (episode answered)", "retrieve")
        node_index = state.graph.add_search_node(
            action.title, action.parent_titles, action.query
        )
        observations = tuple(
            search(corpus, action.query, config.search_k, n_frames=config.n_frames)
        )
        rendered = render_observation(observations)
        state.pending = PendingSearch(
            node_index=node_index,
            observations=observations,
            offered_ids=rendered.offered_ids,
            observation_text=rendered.text,
        )
        return state

    if isinstance(action, Memorize):
        if state.pending is None:
            raise IllegalTransition("retrieve or answer", "memorize")
        pending = state.pending
        offered = set(pending.offered_ids)
        for decision in action.decisions:
            if decision.information_id not in offered:
                raise SchemaViolation(
                    f"information_id {decision.information_id!r} was not offered "
                    f"(offered: {sorted(offered)})",
                    field_name="information_id",
                )
        refs = _seed_items(state, action, pending)
        state.graph.populate_node(pending.node_index, action.summary, refs)
        state.pending = None
        return state

    if isinstance(action, Answer):
        if state.pending is not None:
            raise IllegalTransition("memorize", "answer")
        if state.graph.is_terminal:
            raise IllegalTransition("nothing (episode answered)", "answer")
        state.graph.add_answer_node(action.parent_titles, action.answer)
        return state

    raise TypeError(f"not an action: {action!r}")


# -- the loop -----------------------------------------------------------------


def _conversation_chars(bundle: PromptBundle, followup: Sequence[tuple[str, str]]) -> int:
    return bundle.char_count() + sum(len(content) for _, content in followup)


def _act_and_parse(
    policy: Policy,
    state: SessionState,
    bundle: PromptBundle,
    followup: Sequence[tuple[str, str]],
) -> tuple[str, ParsedResponse]:
    """One policy call with a single retry on unparseable output; the retry
    appends the offending reply and a format reminder."""
    raw = policy.act(bundle, followup)
    state.policy_calls += 1
    try:
        return raw, parse_response(raw)
    except ProtocolError:
        reminder = tuple(followup) + (("assistant", raw), ("user", FORMAT_REMINDER))
        raw2 = policy.act(bundle, reminder)
        state.policy_calls += 1
        try:
            return raw2, parse_response(raw2)
        except ProtocolError as second:
            raise PolicyProtocolError(
                f"unparseable policy output after one retry: {second}"
            ) from second


def run_episode(
    policy: Policy,
    corpus: Corpus,
    query: str,
    config: EpisodeConfig,
    *,
    resume: SessionState | None = None,
) -> Trajectory:
    """Run (or resume) one episode to its answer or the cycle bound.

    Every cycle: shape the memory bank at the current step, render the
    prompt, ask the policy, apply.  Retrieve cycles run the memorize turn
    against the same bundle plus the rendered observations before the cycle
    closes.  Episodes that hit the bound keep their trailing skeletal node,
    if any, and are marked truncated.
    """
    state = resume if resume is not None else SessionState.new(query)
    graph = state.graph
    while not graph.is_terminal and len(state.records) < config.t_max:
        cycle = len(state.records)
        if state.pending is None:
            assignment = shape_memory(graph, config.energy)
            bundle = render_context(graph, assignment, config.instruction)
            raw, parsed = _act_and_parse(policy, state, bundle, ())
            try:
                apply_action(state, parsed.action, corpus, config)
            except GraphError as exc:
                raise PolicyProtocolError(
                    f"policy action rejected at cycle {cycle}: {exc}"
                ) from exc
            if isinstance(parsed.action, Answer):
                state.records.append(
                    CycleRecord(
                        cycle=cycle,
                        step=assignment.step,
                        prompt_digest=bundle.digest(),
                        prompt_chars=bundle.char_count(),
                        response=raw,
                        action=action_payload(parsed.action),
                        kind="answer",
                        node_index=len(graph.nodes) - 1,
                        assignment=assignment,
                    )
                )
                break
            state.pending = replace(
                state.pending,
                prompt_digest=bundle.digest(),
                prompt_chars=bundle.char_count(),
                response=raw,
                action=action_payload(parsed.action),
                assignment=assignment,
                context=bundle.context,
                attachments=bundle.memory_attachments,
            )
        else:
            # resumed mid-cycle: rebuild the retrieve-turn bundle from the
            # checkpoint (the graph has mutated since it was rendered)
            assignment = state.pending.assignment
            if assignment is None:
                raise CorruptSession("pending search is missing its shaping assignment")
            bundle = PromptBundle(
                instruction=config.instruction,
                query=graph.root_query,
                context=state.pending.context,
                memory_attachments=state.pending.attachments,
            )

        pending = state.pending
        followup = (
            ("assistant", pending.response),
            ("user", pending.observation_text + "\n" + MEMORIZE_PROMPT),
        )
        raw2, parsed2 = _act_and_parse(policy, state, bundle, followup)
        if not isinstance(parsed2.action, Memorize):
            raise IllegalTransition("memorize", _action_kind(parsed2.action))
        apply_action(state, parsed2.action, corpus, config)
        state.records.append(
            CycleRecord(
                cycle=cycle,
                step=assignment.step,
                prompt_digest=pending.prompt_digest,
                prompt_chars=pending.prompt_chars,
                response=pending.response,
                action=pending.action,
                kind="retrieve",
                node_index=pending.node_index,
                assignment=assignment,
                observations=pending.observations,
                memorize_prompt_chars=_conversation_chars(bundle, followup),
                memorize_response=raw2,
                memorize_action=action_payload(parsed2.action),
            )
        )

    state.truncated = not graph.is_terminal
    answer_text = next(
        (node.answer_text for node in graph.nodes if node.kind is NodeKind.ANSWER), None
    )
    return Trajectory(
        query=graph.root_query,
        records=state.records,
        graph=graph,
        answer_text=answer_text,
        truncated=state.truncated,
    )


# -- session persistence -------------------------------------------------------


def save_session(state: SessionState, path: str | Path) -> None:
    record = {
        "schema": SESSION_SCHEMA,
        "graph": state.graph.to_dict(),
        "records": [r.to_dict() for r in state.records],
        "pending": None if state.pending is None else state.pending.to_dict(),
        "policy_calls": state.policy_calls,
        "truncated": state.truncated,
    }
    Path(path).write_text(canonical_dumps(record) + "\n", encoding="utf-8")


def load_session(path: str | Path) -> SessionState:
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptSession(f"not a JSON session file: {exc}") from exc
    if not isinstance(record, dict) or record.get("schema") != SESSION_SCHEMA:
        raise SessionSchemaMismatch(
            f"expected schema {SESSION_SCHEMA!r}, got "
            f"{record.get('schema') if isinstance(record, dict) else type(record).__name__!r}"
        )
    try:
        return SessionState(
            graph=MemoryGraph.from_dict(record["graph"]),
            records=[CycleRecord.from_dict(r) for r in record["records"]],
            pending=(
                None if record["pending"] is None else PendingSearch.from_dict(record["pending"])
            ),
            policy_calls=record["policy_calls"],
            truncated=record["truncated"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptSession(f"malformed session record: {exc}") from exc
